"""Pipeline orchestration: subcommands over a shared JSON config.

Stages form a linear graph; each completed stage records a hash of the
config subset it depends on. A stage refuses to run if an upstream stage
is missing or was built under a different config (StaleUpstream).

Exit codes: 0 success, 2 config error, 3 stage failure, 4 stale upstream.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
import torch

from . import balance as balance_mod
from . import gan as gan_mod
from . import metrics as metrics_mod
from . import xai as xai_mod
from .classifier import (
    ClassifierConfig,
    ModelCheckpoint,
    classifier_augment,
    predict_proba,
    train_classifier,
)
from .errors import ConfigError, LesionLabError, StaleUpstream
from .manifest import (
    compute_distribution,
    ingest_metadata,
    load_manifest,
    load_split,
    save_manifest,
    save_split,
)
from .pixels import (
    PixelArray,
    RangeTag,
    load_image,
    normalize_for_classifier,
    normalize_for_gan,
    resize_image,
    to_unit,
)
from .splits import stratified_split
from .toydata import generate_toy_dataset

STAGES = ["ingest", "split", "train-gan", "synthesize", "train-clf", "evaluate", "explain", "report"]
UPSTREAM = {
    "ingest": [],
    "split": ["ingest"],
    "train-gan": ["split"],
    "synthesize": ["train-gan"],
    "train-clf": ["synthesize"],
    "evaluate": ["train-clf"],
    "explain": ["train-clf"],
    "report": ["evaluate"],
}

DEFAULT_CONFIG = {
    "paths": {"data_csv": "", "image_root": "", "run_dir": "run"},
    "seed": 0,
    "toy_mode": False,
    "toy": {"classes": 4, "per_class_counts": [40, 16, 16, 16]},
    "data": {"ratios": [0.70, 0.15, 0.15]},
    "gan": {
        "lr_g": 1e-5,
        "lr_d": 1e-5,
        "batch_size": 64,
        "epochs": 300,
        "real_label": 0.9,
        "fake_label": 0.4,
        "checkpoint_every": 0,
        "nz": 100,
        "g_base_channels": 512,
        "d_base_channels": 64,
    },
    "classifier": {
        "backbone": "resnet50",
        "freeze_base": True,
        "head_hidden": 256,
        "dropout": 0.3,
        "lr": 1e-5,
        "batch_size": 64,
        "max_epochs": 30,
        "patience": 5,
    },
    "xai": {
        "target_segments": 12,
        "lime_samples": 1000,
        "top_k": 5,
        "kernel_sigma": 0.25,
        "ridge_lambda": 1.0,
        "shap_permutations": 200,
    },
}

# Config subsets each stage's behavior depends on (cumulative with upstream).
_OWN_KEYS = {
    "ingest": ["paths.data_csv", "paths.image_root", "toy_mode", "toy", "seed"],
    "split": ["data"],
    "train-gan": ["gan"],
    "synthesize": [],
    "train-clf": ["classifier"],
    "evaluate": [],
    "explain": ["xai"],
    "report": [],
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _get_path(config: dict, dotted: str):
    node = config
    for part in dotted.split("."):
        node = node[part]
    return node


def _set_path(config: dict, dotted: str, value):
    parts = dotted.split(".")
    node = config
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    old = node[parts[-1]]
    if isinstance(old, bool):
        value = value.lower() in ("1", "true", "yes")
    elif isinstance(old, int):
        value = int(value)
    elif isinstance(old, float):
        value = float(value)
    elif isinstance(old, list):
        value = json.loads(value)
    node[parts[-1]] = value


def load_config(config_path, overrides=(), run_dir=None, seed=None, toy_mode=None) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        try:
            user = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {config_path}: {exc}") from exc
        config = _deep_merge(config, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_path(config, key, value)
    if run_dir is not None:
        config["paths"]["run_dir"] = str(run_dir)
    if seed is not None:
        config["seed"] = seed
    if toy_mode:
        config["toy_mode"] = True
    return config


def stage_hash(stage: str, config: dict) -> str:
    """Hash of every config subset this stage transitively depends on."""
    keys: list[str] = []

    def collect(s):
        for up in UPSTREAM[s]:
            collect(up)
        keys.extend(_OWN_KEYS[s])

    collect(stage)
    subset = {k: _get_path(config, k) for k in sorted(set(keys))}
    blob = json.dumps(subset, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


class RunLedger:
    def __init__(self, run_dir: Path):
        self.path = run_dir / "ledger.json"
        self.doc = {"stages": {}}
        if self.path.exists():
            self.doc = json.loads(self.path.read_text())

    def status(self, stage: str) -> str:
        return self.doc["stages"].get(stage, {}).get("status", "pending")

    def recorded_hash(self, stage: str):
        return self.doc["stages"].get(stage, {}).get("config_hash")

    def mark(self, stage: str, status: str, config_hash: str, artifacts=()):
        self.doc["stages"][stage] = {
            "status": status,
            "config_hash": config_hash,
            "artifacts": [str(a) for a in artifacts],
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.doc, indent=2, sort_keys=True))
        tmp.replace(self.path)


def check_upstream(stage: str, ledger: RunLedger, config: dict):
    for up in UPSTREAM[stage]:
        check_upstream(up, ledger, config)
        if ledger.status(up) != "done":
            raise StaleUpstream(f"stage {up!r} must complete before {stage!r}")
        if ledger.recorded_hash(up) != stage_hash(up, config):
            raise StaleUpstream(f"stage {up!r} was built under a different config; re-run it")


class RunLock:
    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LesionLabError(f"run directory is locked by {self.path}")
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)


# --- stage bodies ---

def _load_record_image(manifest, record, size: int) -> PixelArray:
    img = load_image(Path(manifest.image_root) / record.relative_path)
    return resize_image(img, (size, size))


def _input_size(config: dict) -> int:
    return 64 if config["toy_mode"] or config["classifier"]["backbone"] == "tiny" else 224


def _classifier_config(config: dict, num_classes: int) -> ClassifierConfig:
    block = dict(config["classifier"])
    if config["toy_mode"]:
        block["backbone"] = "tiny"
    return ClassifierConfig(num_classes=num_classes, seed=config["seed"], **block)


def stage_ingest(config: dict, run_dir: Path) -> list[Path]:
    if config["toy_mode"]:
        toy = config["toy"]
        manifest = generate_toy_dataset(
            run_dir / "toydata", toy["classes"], toy["per_class_counts"], seed=config["seed"]
        )
    else:
        paths = config["paths"]
        if not paths["data_csv"] or not paths["image_root"]:
            raise ConfigError("paths.data_csv and paths.image_root are required unless toy_mode is set")
        manifest = ingest_metadata(paths["data_csv"], paths["image_root"], seed=config["seed"])
    out = run_dir / "manifest.json"
    save_manifest(manifest, out)
    return [out]


def stage_split(config: dict, run_dir: Path) -> list[Path]:
    manifest = load_manifest(run_dir / "manifest.json")
    split = stratified_split(manifest, tuple(config["data"]["ratios"]), seed=config["seed"])
    out = run_dir / "split.json"
    save_split(split, out)
    return [out]


def _train_split_records(manifest, split):
    return [r for r in manifest.records if split.assignment.get(r.image_id) == "train"]


def stage_train_gan(config: dict, run_dir: Path, class_filter=None) -> list[Path]:
    manifest = load_manifest(run_dir / "manifest.json")
    split = load_split(run_dir / "split.json")
    train_records = _train_split_records(manifest, split)
    dist = compute_distribution(manifest, train_records)
    minority = [c for c in manifest.class_set if c != dist.majority_class]
    if class_filter:
        minority = [c for c in minority if c.name == class_filter]
        if not minority:
            raise ConfigError(f"{class_filter!r} is not a minority class")

    torch.set_num_threads(1)
    block = dict(config["gan"])
    gan_dir = run_dir / "gan"
    artifacts = []
    for label in minority:
        images = []
        for r in train_records:
            if r.label != label:
                continue
            img = _load_record_image(manifest, r, 128)
            images.append(normalize_for_gan(img))
        cfg = gan_mod.GanTrainConfig(seed=config["seed"], **block)
        ckpt = gan_mod.train_dcgan(images, cfg, class_name=label.name, out_dir=gan_dir)
        artifacts.append(gan_dir / f"gan_{label.name}_{ckpt.epoch}.ckpt")
        artifacts.append(gan_dir / f"gan_{label.name}_losses.csv")
    return artifacts


def _latest_checkpoints(gan_dir: Path) -> dict[str, gan_mod.GanCheckpoint]:
    out = {}
    best_epoch = {}
    for path in sorted(gan_dir.glob("gan_*.ckpt")):
        ckpt = gan_mod.GanCheckpoint.load(path)
        if ckpt.epoch >= best_epoch.get(ckpt.class_name, -1):
            best_epoch[ckpt.class_name] = ckpt.epoch
            out[ckpt.class_name] = ckpt
    return out


def stage_synthesize(config: dict, run_dir: Path) -> list[Path]:
    manifest = load_manifest(run_dir / "manifest.json")
    split = load_split(run_dir / "split.json")
    train_records = _train_split_records(manifest, split)
    dist = compute_distribution(manifest, train_records)
    plan = balance_mod.plan_synthesis(dist)
    checkpoints = _latest_checkpoints(run_dir / "gan")
    torch.set_num_threads(1)
    new_manifest, new_split = balance_mod.apply_plan(
        manifest, split, plan, checkpoints, run_dir / "synthetic", seed=config["seed"]
    )
    outs = [run_dir / "plan.json", run_dir / "balanced_manifest.json", run_dir / "balanced_split.json"]
    balance_mod.save_plan(plan, outs[0])
    save_manifest(new_manifest, outs[1])
    save_split(new_split, outs[2])
    return outs


def _split_arrays(config, manifest, split, class_order, size):
    """Load, resize, normalize (and augment, train only) every split."""
    index = {name: i for i, name in enumerate(class_order)}
    out = {}
    rng = np.random.default_rng(config["seed"])
    for split_name in ("train", "validation", "test"):
        records = [r for r in manifest.records if split.assignment.get(r.image_id) == split_name]
        xs = np.empty((len(records), size, size, 3), dtype=np.float32)
        ys = np.empty(len(records), dtype=np.int64)
        ids = []
        for i, r in enumerate(records):
            img = to_unit(_load_record_image(manifest, r, size))
            if split_name == "train":
                img = classifier_augment(img, int(rng.integers(0, 2**31 - 1)))
            img = normalize_for_classifier(img)
            xs[i] = img.values
            ys[i] = index[r.label.name]
            ids.append(r.image_id)
        out[split_name] = (xs, ys, ids)
    return out


def stage_train_clf(config: dict, run_dir: Path) -> list[Path]:
    manifest = load_manifest(run_dir / "balanced_manifest.json")
    split = load_split(run_dir / "balanced_split.json")
    class_order = [c.name for c in manifest.class_set]
    size = _input_size(config)
    torch.set_num_threads(1)
    data = _split_arrays(config, manifest, split, class_order, size)
    cfg = _classifier_config(config, len(class_order))
    ckpt, history = train_classifier(
        {k: (v[0], v[1]) for k, v in data.items() if k != "test"},
        cfg,
        class_order,
        pretrained=not config["toy_mode"],
    )
    outs = [run_dir / "clf_best.ckpt", run_dir / "training_history.csv"]
    ckpt.save(outs[0])
    history.write_csv(outs[1])
    return outs


def stage_evaluate(config: dict, run_dir: Path) -> list[Path]:
    manifest = load_manifest(run_dir / "balanced_manifest.json")
    split = load_split(run_dir / "balanced_split.json")
    ckpt = ModelCheckpoint.load(run_dir / "clf_best.ckpt")
    class_order = ckpt.class_name_order
    size = _input_size(config)
    torch.set_num_threads(1)
    data = _split_arrays(config, manifest, split, class_order, size)
    xs, ys, _ = data["test"]
    probs = predict_proba(ckpt, xs)
    predicted = [class_order[i] for i in probs.argmax(axis=1)]
    truths = [class_order[i] for i in ys]
    report = metrics_mod.build_report(truths, predicted, probs, class_order, history=ckpt.history)
    out = run_dir / "metrics.json"
    out.write_text(json.dumps(metrics_mod.report_to_dict(report), indent=2, sort_keys=True))
    return [out]


def stage_explain(config: dict, run_dir: Path, image_id=None, method="both") -> list[Path]:
    manifest = load_manifest(run_dir / "balanced_manifest.json")
    split = load_split(run_dir / "balanced_split.json")
    ckpt = ModelCheckpoint.load(run_dir / "clf_best.ckpt")
    size = _input_size(config)
    torch.set_num_threads(1)

    test_records = [r for r in manifest.records if split.assignment.get(r.image_id) == "test"]
    if image_id is None:
        record = test_records[0]
    else:
        matches = [r for r in manifest.records if r.image_id == image_id]
        if not matches:
            raise ConfigError(f"image {image_id!r} not found in manifest")
        record = matches[0]

    img = to_unit(_load_record_image(manifest, record, size))

    def model_fn(batch_unit: np.ndarray) -> np.ndarray:
        from .pixels import IMAGENET_MEAN, IMAGENET_STD

        normalized = (batch_unit - IMAGENET_MEAN) / IMAGENET_STD
        return predict_proba(ckpt, normalized.astype(np.float32))

    probs = model_fn(img.values[None])
    class_index = int(probs.argmax())

    block = config["xai"]
    segmentation = xai_mod.segment_superpixels(img, block["target_segments"], seed=config["seed"])
    out_dir = run_dir / "explanations"
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    if method in ("lime", "both"):
        lime = xai_mod.lime_explain(
            model_fn, img, class_index, segmentation,
            xai_mod.LimeConfig(
                n_samples=block["lime_samples"], top_k=block["top_k"],
                kernel_sigma=block["kernel_sigma"], ridge_lambda=block["ridge_lambda"],
                seed=config["seed"],
            ),
        )
        png = out_dir / f"{record.image_id}_lime.png"
        xai_mod.render_lime_overlay(img, lime, segmentation, png)
        js = out_dir / f"{record.image_id}_lime.json"
        xai_mod.save_explanation(lime, record.image_id, js)
        artifacts += [png, js]
    if method in ("shap", "both"):
        shap = xai_mod.shap_explain(
            model_fn, img, class_index, segmentation,
            xai_mod.ShapConfig(n_permutations=block["shap_permutations"], seed=config["seed"]),
        )
        png = out_dir / f"{record.image_id}_shap.png"
        xai_mod.render_shap_heatmap(img, shap, segmentation, png)
        js = out_dir / f"{record.image_id}_shap.json"
        xai_mod.save_explanation(shap, record.image_id, js)
        artifacts += [png, js]
    return artifacts


def stage_report(config: dict, run_dir: Path) -> list[Path]:
    doc = json.loads((run_dir / "metrics.json").read_text())
    report = metrics_mod.report_from_dict(doc)
    ckpt_path = run_dir / "clf_best.ckpt"
    if ckpt_path.exists():
        report.history = ModelCheckpoint.load(ckpt_path).history
    return metrics_mod.render_report(report, run_dir / "report")


_STAGE_FUNCS = {
    "ingest": stage_ingest,
    "split": stage_split,
    "train-gan": stage_train_gan,
    "synthesize": stage_synthesize,
    "train-clf": stage_train_clf,
    "evaluate": stage_evaluate,
    "explain": stage_explain,
    "report": stage_report,
}


def run_stage(stage: str, config: dict, force: bool = False, **kwargs) -> int:
    """Execute one stage under the run lock. Returns an exit code."""
    run_dir = Path(config["paths"]["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    ledger = RunLedger(run_dir)
    h = stage_hash(stage, config)

    def record_error(exc):
        (run_dir / "error.json").write_text(json.dumps({
            "stage": stage,
            "error_type": type(exc).__name__,
            "message": str(exc),
        }, indent=2))

    try:
        check_upstream(stage, ledger, config)
    except StaleUpstream as exc:
        record_error(exc)
        click.echo(f"error: {exc}", err=True)
        return 4

    if not force and ledger.status(stage) == "done" and ledger.recorded_hash(stage) == h:
        click.echo(f"{stage}: already done (config unchanged)")
        return 0

    try:
        with RunLock(run_dir):
            artifacts = _STAGE_FUNCS[stage](config, run_dir, **kwargs)
            ledger.mark(stage, "done", h, artifacts)
    except LesionLabError as exc:
        ledger.mark(stage, "failed", h)
        record_error(exc)
        click.echo(f"error in stage {stage}: {exc}", err=True)
        return 3
    except Exception as exc:
        ledger.mark(stage, "failed", h)
        record_error(exc)
        traceback.print_exc()
        return 3
    click.echo(f"{stage}: done")
    return 0


# --- click wiring ---

def _config_from_ctx(ctx) -> dict:
    p = ctx.obj
    try:
        return load_config(p["config"], p["sets"], p["run_dir"], p["seed"], p["toy_mode"])
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)


@click.group()
@click.option("--config", type=click.Path(), default=None, help="JSON config file")
@click.option("--set", "sets", multiple=True, help="override a config key, e.g. --set gan.epochs=2")
@click.option("--run-dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--toy-mode", is_flag=True, default=False)
@click.pass_context
def main(ctx, config, sets, run_dir, seed, toy_mode):
    """Imbalanced-image pipeline: GAN rebalancing, transfer classifier, explanations."""
    ctx.obj = {"config": config, "sets": sets, "run_dir": run_dir, "seed": seed, "toy_mode": toy_mode}


def _simple_stage(name):
    @main.command(name)
    @click.pass_context
    def _cmd(ctx):
        sys.exit(run_stage(name, _config_from_ctx(ctx)))

    return _cmd


_simple_stage("ingest")
_simple_stage("split")
_simple_stage("synthesize")
_simple_stage("evaluate")
_simple_stage("report")


@main.command("train-gan")
@click.option("--class", "class_name", default=None, help="train a single minority class")
@click.option("--all-minority", is_flag=True, default=True)
@click.pass_context
def cmd_train_gan(ctx, class_name, all_minority):
    sys.exit(run_stage("train-gan", _config_from_ctx(ctx), class_filter=class_name))


@main.command("train-clf")
@click.pass_context
def cmd_train_clf(ctx):
    sys.exit(run_stage("train-clf", _config_from_ctx(ctx)))


@main.command("explain")
@click.option("--image", "image_id", default=None)
@click.option("--method", type=click.Choice(["lime", "shap", "both"]), default="both")
@click.pass_context
def cmd_explain(ctx, image_id, method):
    sys.exit(run_stage("explain", _config_from_ctx(ctx), image_id=image_id, method=method))


@main.command("run-all")
@click.pass_context
def cmd_run_all(ctx):
    config = _config_from_ctx(ctx)
    for stage in STAGES:
        code = run_stage(stage, config)
        if code != 0:
            sys.exit(code)
    sys.exit(0)


if __name__ == "__main__":
    main()
