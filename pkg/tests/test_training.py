import math

import numpy as np
import pytest

from chroma.colorspace import RgbImage
from chroma.dataset import batches, examples_from_images
from chroma.training import (
    ConfigError,
    ColorizationModel,
    TrainConfig,
    checkpoint_name,
    read_metrics,
    train,
    train_step,
)


def corpus(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return examples_from_images([RgbImage(rng.uniform(size=(size, size, 3))) for _ in range(n)], size)


def tiny(**kw):
    base = dict(image_size=16, base_width=2, batch_size=4, epochs=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("field,value", [
    ("learning_rate", 0.0), ("learning_rate", -1.0), ("momentum", 1.0), ("batch_size", 0),
    ("w_adv", -0.1), ("image_size", 24), ("mode", "other"), ("epochs", -1),
])
def test_config_rejects(field, value):
    with pytest.raises(ConfigError) as info:
        TrainConfig(**{field: value}).validate()
    assert info.value.field == field


def test_config_round_trip():
    cfg = tiny(w_adv=0.5, mode="general")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.generator_spec().global_features == cfg.global_features
    assert tiny().generator_spec().global_features == 0


def test_steps_and_metrics_rows(tmp_path):
    ex = corpus(8)
    paths = train(tiny(), ex, tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    # 8 images, batch 4: 2 steps, one row per channel per step
    assert [(s, c) for s, c, _, _ in rows] == [(1, "A"), (1, "B"), (2, "A"), (2, "B")]
    assert all(math.isfinite(d) and math.isfinite(g) for _, _, d, g in rows)
    assert paths == [tmp_path / checkpoint_name(1)]
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == "step,channel,d_loss,g_loss"


def test_identical_seeds_identical_metrics(tmp_path):
    ex = corpus(6)
    train(tiny(epochs=2), ex, tmp_path / "a")
    train(tiny(epochs=2), ex, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "epoch_0002.ckpt").read_bytes() == (tmp_path / "b" / "epoch_0002.ckpt").read_bytes()


def test_different_seed_differs(tmp_path):
    ex = corpus(4)
    train(tiny(), ex, tmp_path / "a")
    train(tiny(seed=1), ex, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    ex = corpus(6)
    train(tiny(epochs=3), ex, tmp_path / "full")
    train(tiny(epochs=1), ex, tmp_path / "part")
    model = ColorizationModel.load(tmp_path / "part" / "epoch_0001.ckpt")
    model.config.epochs = 3
    train(model.config, ex, tmp_path / "part", model=model)
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()
    assert (tmp_path / "full" / "epoch_0003.ckpt").read_bytes() == (tmp_path / "part" / "epoch_0003.ckpt").read_bytes()


def test_tiny_learning_rate_barely_moves_weights():
    cfg = tiny(learning_rate=1e-12)
    model = ColorizationModel(cfg)
    before = {k: v.data.copy() for k, v in model.generator("A").params.items()}
    batch = next(batches(corpus(4), 4, 0, 0))
    train_step(model.trainers["A"], batch, cfg)
    for k, v in model.generator("A").params.items():
        assert np.abs(v.data - before[k]).max() < 1e-6


def test_step_updates_both_networks():
    cfg = tiny(w_adv=0.5)
    model = ColorizationModel(cfg)
    g0 = model.generator("A").params["out.conv3.weight"].data.copy()
    d0 = model.discriminator("A").params["fc.weight"].data.copy()
    b0 = model.generator("B").params["out.conv3.weight"].data.copy()
    d, g = train_step(model.trainers["A"], next(batches(corpus(4), 4, 0, 0)), cfg)
    assert math.isfinite(d) and math.isfinite(g)
    assert not np.array_equal(g0, model.generator("A").params["out.conv3.weight"].data)
    assert not np.array_equal(d0, model.discriminator("A").params["fc.weight"].data)
    # channel B untouched
    assert np.array_equal(b0, model.generator("B").params["out.conv3.weight"].data)


def test_zero_w_adv_ignores_discriminator_for_generator():
    cfg = tiny(w_adv=0.0)
    m1, m2 = ColorizationModel(cfg), ColorizationModel(cfg)
    # scramble the second discriminator; the generator update must not care
    for p in m2.discriminator("A").params.values():
        p.data[...] = np.random.default_rng(5).normal(size=p.shape)
    batch = next(batches(corpus(4), 4, 0, 0))
    train_step(m1.trainers["A"], batch, cfg)
    train_step(m2.trainers["A"], batch, cfg)
    for k in m1.generator("A").params:
        assert np.array_equal(m1.generator("A").params[k].data, m2.generator("A").params[k].data)


def test_channels_have_independent_parameters():
    model = ColorizationModel(tiny())
    a, b = model.generator("A").params, model.generator("B").params
    assert not np.array_equal(a["enc1.conv1.weight"].data, b["enc1.conv1.weight"].data)
    assert a["enc1.conv1.weight"] is not b["enc1.conv1.weight"]


def test_makeup_mode_has_no_hook_parameters():
    assert not any(k.startswith("hook") for k in ColorizationModel(tiny()).generator("A").params)
    assert any(k.startswith("hook") for k in ColorizationModel(tiny(mode="general", global_features=3)).generator("A").params)


def test_size_mismatch_rejected(tmp_path):
    with pytest.raises(ValueError):
        train(tiny(image_size=32), corpus(2, size=16), tmp_path)


def test_on_step_callback(tmp_path):
    seen = []
    train(tiny(), corpus(4), tmp_path, on_step=lambda *a: seen.append(a[:2]))
    assert seen == [(1, "A"), (1, "B")]
