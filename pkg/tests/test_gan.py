import math

import numpy as np
import pytest
import torch

from lesionlab.errors import ShapeMismatch
from lesionlab.gan import (
    AugmentParams,
    DiscriminatorSpec,
    GanCheckpoint,
    GanTrainConfig,
    GeneratorSpec,
    apply_augment,
    bce_with_smoothing,
    build_discriminator,
    build_generator,
    gan_augment,
    generate,
    sample_latent,
    train_dcgan,
)
from lesionlab.pixels import PixelArray, RangeTag

SMALL_G = GeneratorSpec(base_channels=32)
SMALL_D = DiscriminatorSpec(base_channels=8)


def random_images(n, seed=0):
    rng = np.random.default_rng(seed)
    return [
        PixelArray(rng.uniform(-1, 1, (128, 128, 3)).astype(np.float32), RangeTag.SIGNED_M1_1)
        for _ in range(n)
    ]


def small_config(**kw):
    defaults = dict(epochs=2, batch_size=16, g_base_channels=32, d_base_channels=8, seed=1)
    defaults.update(kw)
    return GanTrainConfig(**defaults)


def test_generator_output_shape_and_range():
    gen = build_generator(SMALL_G, seed=0)
    z = sample_latent(8, SMALL_G.nz, seed=0)
    with torch.no_grad():
        out = gen(z)
    assert out.shape == (8, 3, 128, 128)
    assert float(out.abs().max()) <= 1.0


def test_generator_deterministic():
    gen = build_generator(SMALL_G, seed=0)
    z = sample_latent(4, SMALL_G.nz, seed=3)
    with torch.no_grad():
        a = gen(z).numpy()
        b = gen(z).numpy()
    assert np.array_equal(a, b)


def test_generator_latent_shape_check():
    gen = build_generator(SMALL_G, seed=0)
    with pytest.raises(ShapeMismatch):
        gen(torch.zeros(2, 7))


def test_discriminator_range():
    disc = build_discriminator(SMALL_D, seed=0)
    x = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, (6, 3, 128, 128)).astype(np.float32))
    with torch.no_grad():
        out = disc(x)
    assert out.shape == (6,)
    assert bool(((out > 0) & (out < 1)).all())


def test_discriminator_channel_doubling():
    conv_channels = lambda d: [m.out_channels for m in d.net if isinstance(m, torch.nn.Conv2d)][:-1]
    base = conv_channels(build_discriminator(DiscriminatorSpec(base_channels=8)))
    doubled = conv_channels(build_discriminator(DiscriminatorSpec(base_channels=16)))
    assert doubled == [2 * c for c in base]


def test_discriminator_rejects_wrong_size():
    disc = build_discriminator(SMALL_D, seed=0)
    with pytest.raises(ShapeMismatch):
        disc(torch.zeros(1, 3, 64, 64))


def test_bce_closed_forms():
    assert math.isclose(bce_with_smoothing(0.5, 0.9), math.log(2), rel_tol=1e-9)
    expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    assert abs(bce_with_smoothing(0.9, 0.9) - expected) < 1e-12
    assert abs(bce_with_smoothing(0.9, 0.9) - 0.3251) < 1e-4
    assert bce_with_smoothing(1 - 1e-9, 1 - 1e-9) < 1e-5


def test_augment_flip_is_exact_mirror():
    img = random_images(1, seed=4)[0]
    out = apply_augment(img, AugmentParams(flip_h=True))
    assert np.array_equal(out.values, img.values[:, ::-1, :])


def test_augment_identity_params():
    img = random_images(1, seed=5)[0]
    out = apply_augment(img, AugmentParams())
    assert np.array_equal(out.values, img.values)


def test_augment_stays_in_range():
    img = random_images(1, seed=6)[0]
    for seed in range(5):
        out = gan_augment(img, seed)
        assert out.range_tag is RangeTag.SIGNED_M1_1
        assert out.values.min() >= -1.0 and out.values.max() <= 1.0
        assert out.values.shape == img.values.shape


def test_train_smoke_and_losses(tmp_path):
    ckpt = train_dcgan(random_images(16, seed=7), small_config(), class_name="a", out_dir=tmp_path)
    assert len(ckpt.loss_history) == 2
    assert all(math.isfinite(lg) and math.isfinite(ld) for lg, ld in ckpt.loss_history)
    assert (tmp_path / "gan_a_2.ckpt").exists()
    csv_text = (tmp_path / "gan_a_losses.csv").read_text()
    assert csv_text.startswith("epoch,loss_G,loss_D")
    assert len(csv_text.strip().splitlines()) == 3


def test_train_deterministic():
    imgs = random_images(16, seed=8)
    a = train_dcgan(imgs, small_config(), class_name="a")
    b = train_dcgan(imgs, small_config(), class_name="a")
    assert a.loss_history == b.loss_history
    for k in a.generator_weights:
        assert np.array_equal(a.generator_weights[k], b.generator_weights[k])


def test_checkpoint_round_trip_bitwise(tmp_path):
    ckpt = train_dcgan(random_images(16, seed=9), small_config(epochs=1), class_name="m")
    path = tmp_path / "m.ckpt"
    ckpt.save(path)
    back = GanCheckpoint.load(path)
    assert back.class_name == "m"
    assert back.config == ckpt.config
    assert back.loss_history == ckpt.loss_history
    probe = sample_latent(4, ckpt.config.nz, seed=99)
    with torch.no_grad():
        a = ckpt.build_generator()(probe).numpy()
        b = back.build_generator()(probe).numpy()
    assert np.array_equal(a, b)


def test_label_smoothing_targets_recorded():
    calls = []
    train_dcgan(
        random_images(16, seed=10), small_config(epochs=1),
        class_name="a", loss_hook=lambda kind, target: calls.append((kind, target)),
    )
    assert ("d_real", 0.9) in calls
    assert ("d_fake", 0.4) in calls
    assert ("g", 1.0) in calls
    assert {t for k, t in calls if k == "d_real"} == {0.9}
    assert {t for k, t in calls if k == "d_fake"} == {0.4}


def test_frozen_generator_discriminator_separation():
    imgs = random_images(32, seed=11)
    config = small_config()

    def separation(ckpt):
        gen = ckpt.build_generator()
        disc = ckpt.build_discriminator()
        batch = torch.from_numpy(
            np.stack([i.values for i in imgs[:16]]).transpose(0, 3, 1, 2)
        ).contiguous()
        z = sample_latent(16, config.nz, seed=0)
        with torch.no_grad():
            return float(disc(batch).mean() - disc(gen(z)).mean())

    one = train_dcgan(imgs, small_config(epochs=1, lr_d=2e-4), class_name="a", freeze_generator=True)
    five = train_dcgan(imgs, small_config(epochs=5, lr_d=2e-4), class_name="a", freeze_generator=True)
    assert separation(five) > separation(one)


def test_generate_deterministic_and_in_range():
    ckpt = train_dcgan(random_images(16, seed=12), small_config(epochs=1), class_name="g")
    a = generate(ckpt, 5, seed=3)
    b = generate(ckpt, 5, seed=3)
    assert np.array_equal(a, b)
    assert a.shape == (5, 128, 128, 3)
    assert a.min() >= -1.0 and a.max() <= 1.0
