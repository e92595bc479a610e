"""Evaluation suite: confusion matrix, per-class and macro metrics,
one-vs-rest AUC, and report rendering.

Precision/recall/F1 aggregates are macro (unweighted class means). A 0/0
ratio is defined as 0 and flagged rather than raised, so tiny test sets
still produce a report.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabels, EmptyMatrix, IoFailure, UnknownLabel

METRICS_SCHEMA_VERSION = 1

# Benchmarks from earlier published studies plus this method's reported
# full-scale numbers; emitted as static reference rows, never recomputed.
REFERENCE_ROWS = [
    {"study": "Prior: ResNet-50 (SGD, 150 epochs)", "accuracy": 0.9171, "precision": "", "recall": "", "f1": "", "auc_ovr_macro": ""},
    {"study": "Prior: standard ResNet-50 (study 2)", "accuracy": 0.82, "precision": "", "recall": "", "f1": "", "auc_ovr_macro": ""},
    {"study": "Prior: NASNetLarge", "accuracy": 0.91, "precision": "", "recall": "", "f1": "", "auc_ovr_macro": ""},
    {"study": "Prior: InceptionV3", "accuracy": 0.91, "precision": "", "recall": "", "f1": "", "auc_ovr_macro": ""},
    {"study": "Prior: CNN-GAN", "accuracy": 0.89, "precision": "", "recall": "", "f1": "", "auc_ovr_macro": ""},
    {"study": "Prior: ESRGAN-augmented CNN", "accuracy": 0.8951, "precision": "", "recall": "", "f1": "", "auc_ovr_macro": ""},
    {"study": "Reference: DCGAN-balanced ResNet-50 (full scale)", "accuracy": 0.9250, "precision": 0.9283, "recall": 0.9259, "f1": 0.9259, "auc_ovr_macro": 0.9882},
]


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # K x K ints, rows = true, cols = predicted
    class_order: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    per_class: dict[str, ClassMetrics]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    auc_ovr_macro: float
    degenerate_flags: list[str] = field(default_factory=list)
    history: object = None  # optional TrainingHistory for curve rendering


def confusion_from_predictions(true_labels, predicted_labels, class_order) -> ConfusionMatrix:
    if len(true_labels) != len(predicted_labels):
        raise UnknownLabel("label sequences differ in length")
    index = {c: i for i, c in enumerate(class_order)}
    counts = np.zeros((len(class_order), len(class_order)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        if t not in index or p not in index:
            raise UnknownLabel(f"label outside class order: true={t!r} pred={p!r}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(counts=counts, class_order=tuple(class_order))


def per_class_metrics(cm: ConfusionMatrix) -> dict[str, ClassMetrics]:
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix has no samples")
    out = {}
    for i, name in enumerate(cm.class_order):
        tp = int(cm.counts[i, i])
        fp = int(cm.counts[:, i].sum()) - tp
        fn = int(cm.counts[i, :].sum()) - tp
        degenerate = False
        if tp + fp > 0:
            precision = tp / (tp + fp)
        else:
            precision, degenerate = 0.0, True
        if tp + fn > 0:
            recall = tp / (tp + fn)
        else:
            recall, degenerate = 0.0, True
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        out[name] = ClassMetrics(precision=precision, recall=recall, f1=f1, degenerate=degenerate)
    return out


def macro_metrics(per_class: dict[str, ClassMetrics], cm: ConfusionMatrix):
    """(accuracy, macro precision, macro recall, macro F1)."""
    if not per_class:
        raise EmptyMatrix("no per-class metrics")
    accuracy = float(np.trace(cm.counts)) / cm.total
    ps = [m.precision for m in per_class.values()]
    rs = [m.recall for m in per_class.values()]
    fs = [m.f1 for m in per_class.values()]
    return accuracy, float(np.mean(ps)), float(np.mean(rs)), float(np.mean(fs))


def binary_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mann-Whitney AUC with 0.5 credit for ties, via average ranks."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("need both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_ovr(probabilities: np.ndarray, true_labels, class_order) -> tuple[float, list[str]]:
    """Macro one-vs-rest AUC.

    Classes absent from true_labels are skipped and reported back as
    warnings; fewer than two present classes is an error.
    """
    probabilities = np.asarray(probabilities, dtype=float)
    true_labels = list(true_labels)
    present = {t for t in true_labels}
    if len(present) < 2:
        raise DegenerateLabels("need at least 2 classes among true labels")
    aucs = []
    skipped = []
    for j, name in enumerate(class_order):
        indicator = np.array([t == name for t in true_labels])
        if indicator.sum() == 0:
            skipped.append(f"class {name!r} absent from true labels; skipped in AUC")
            continue
        aucs.append(binary_auc(probabilities[:, j], indicator))
    return float(np.mean(aucs)), skipped


def build_report(true_labels, predicted_labels, probabilities, class_order,
                 history=None) -> MetricsReport:
    cm = confusion_from_predictions(true_labels, predicted_labels, class_order)
    per_class = per_class_metrics(cm)
    accuracy, mp, mr, mf = macro_metrics(per_class, cm)
    flags = [f"class {n!r} has a 0/0 metric" for n, m in per_class.items() if m.degenerate]
    auc, skipped = auc_ovr(probabilities, true_labels, class_order)
    flags.extend(skipped)
    return MetricsReport(
        confusion=cm,
        per_class=per_class,
        accuracy=accuracy,
        macro_precision=mp,
        macro_recall=mr,
        macro_f1=mf,
        auc_ovr_macro=auc,
        degenerate_flags=flags,
        history=history,
    )


def report_to_dict(report: MetricsReport) -> dict:
    return {
        "schema_version": METRICS_SCHEMA_VERSION,
        "class_order": list(report.confusion.class_order),
        "confusion": report.confusion.counts.tolist(),
        "per_class": {
            name: {"precision": m.precision, "recall": m.recall, "f1": m.f1}
            for name, m in report.per_class.items()
        },
        "accuracy": report.accuracy,
        "macro_precision": report.macro_precision,
        "macro_recall": report.macro_recall,
        "macro_f1": report.macro_f1,
        "auc_ovr_macro": report.auc_ovr_macro,
        "degenerate_flags": list(report.degenerate_flags),
    }


def report_from_dict(doc: dict) -> MetricsReport:
    cm = ConfusionMatrix(
        counts=np.array(doc["confusion"], dtype=np.int64),
        class_order=tuple(doc["class_order"]),
    )
    per_class = {
        name: ClassMetrics(precision=m["precision"], recall=m["recall"], f1=m["f1"])
        for name, m in doc["per_class"].items()
    }
    return MetricsReport(
        confusion=cm,
        per_class=per_class,
        accuracy=doc["accuracy"],
        macro_precision=doc["macro_precision"],
        macro_recall=doc["macro_recall"],
        macro_f1=doc["macro_f1"],
        auc_ovr_macro=doc["auc_ovr_macro"],
        degenerate_flags=list(doc.get("degenerate_flags", [])),
    )


def _figure(figsize=(12, 9)):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt, plt.figure(figsize=figsize, dpi=100)


def render_report(report: MetricsReport, out_dir) -> list[Path]:
    """Emit metrics.json, three figures, and the two CSV tables."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc
    written = []

    json_path = out_dir / "metrics.json"
    json_path.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True))
    written.append(json_path)

    # Confusion-matrix heatmap with count annotations.
    plt, fig = _figure()
    ax = fig.add_subplot(111)
    counts = report.confusion.counts
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(report.confusion.class_order)), report.confusion.class_order, rotation=45, ha="right")
    ax.set_yticks(range(len(report.confusion.class_order)), report.confusion.class_order)
    ax.set_xlabel("Predicted class")
    ax.set_ylabel("True class")
    threshold = counts.max() / 2 if counts.max() else 0.5
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if counts[i, j] > threshold else "black")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    cm_path = out_dir / "confusion_matrix.png"
    fig.savefig(cm_path)
    plt.close(fig)
    written.append(cm_path)

    # Accuracy / loss curves from training history (flat if absent).
    epochs_data = report.history.epochs if report.history is not None else []
    for fname, cols, ylabel in (
        ("accuracy_curve.png", (1, 3), "accuracy"),
        ("loss_curve.png", (0, 2), "loss"),
    ):
        plt, fig = _figure()
        ax = fig.add_subplot(111)
        xs = list(range(1, len(epochs_data) + 1))
        ax.plot(xs, [e[cols[0]] for e in epochs_data], label=f"train {ylabel}")
        ax.plot(xs, [e[cols[1]] for e in epochs_data], label=f"validation {ylabel}")
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    table_path = out_dir / "per_class_table.csv"
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "precision", "recall", "f1"])
        for name in report.confusion.class_order:
            m = report.per_class[name]
            writer.writerow([name, f"{m.precision:.4f}", f"{m.recall:.4f}", f"{m.f1:.4f}"])
    written.append(table_path)

    comparison_path = out_dir / "comparison_table.csv"
    with open(comparison_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["study", "accuracy", "precision", "recall", "f1", "auc_ovr_macro"])
        writer.writeheader()
        for row in REFERENCE_ROWS:
            writer.writerow(row)
        writer.writerow({
            "study": "This run",
            "accuracy": f"{report.accuracy:.4f}",
            "precision": f"{report.macro_precision:.4f}",
            "recall": f"{report.macro_recall:.4f}",
            "f1": f"{report.macro_f1:.4f}",
            "auc_ovr_macro": f"{report.auc_ovr_macro:.4f}",
        })
    written.append(comparison_path)
    return written
