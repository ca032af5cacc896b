import numpy as np
import pytest

from chroma import tensor as T
from chroma.network import (
    DiscriminatorSpec,
    GeneratorSpec,
    ShapeError,
    build_discriminator,
    build_generator,
    generator_layers,
)
from chroma.tensor import DimensionError, Tensor


def generator_param_count(w):
    # 3x3 convs: encoder 2->w->w, w->2w->2w, 2w->4w->4w, 4w->8w->8w;
    # decoder 8w->8w->8w, 16w->4w->4w, 8w->2w->2w, 4w->w->w; head 2w->w->w->1
    pairs = [(2, w), (w, w), (w, 2 * w), (2 * w, 2 * w), (2 * w, 4 * w), (4 * w, 4 * w), (4 * w, 8 * w), (8 * w, 8 * w),
             (8 * w, 8 * w), (8 * w, 8 * w), (16 * w, 4 * w), (4 * w, 4 * w), (8 * w, 2 * w), (2 * w, 2 * w),
             (4 * w, w), (w, w), (2 * w, w), (w, w), (w, 1)]
    return sum(9 * a * b + b for a, b in pairs)


def discriminator_param_count(w, s):
    convs = [(2, w), (w, 2 * w), (2 * w, 4 * w), (4 * w, 8 * w), (8 * w, 8 * w)]
    return sum(9 * a * b + b for a, b in convs) + 8 * w * (s // 16) ** 2 + 1


@pytest.mark.parametrize("w", [1, 4, 32])
def test_generator_param_count(w):
    g = build_generator(GeneratorSpec(base_width=w), 0)
    assert g.num_parameters() == generator_param_count(w)
    # closed form of the same sum
    assert g.num_parameters() == 3267 * w * w + 89 * w + 1


def test_reference_sizes_at_width_32():
    assert build_generator(GeneratorSpec(), 0).num_parameters() == 3_348_257
    assert build_discriminator(DiscriminatorSpec(32), 0).num_parameters() == 979_233


@pytest.mark.parametrize("w,s", [(4, 16), (4, 64), (32, 32)])
def test_discriminator_param_count(w, s):
    assert build_discriminator(DiscriminatorSpec(s, base_width=w), 0).num_parameters() == discriminator_param_count(w, s)


def test_seeded_construction():
    a = build_generator(GeneratorSpec(base_width=4), 7)
    b = build_generator(GeneratorSpec(base_width=4), 7)
    c = build_generator(GeneratorSpec(base_width=4), 8)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    assert not np.array_equal(a.params["enc1.conv1.weight"].data, c.params["enc1.conv1.weight"].data)


def test_init_statistics():
    g = build_generator(GeneratorSpec(base_width=32), 0)
    w = g.params["dec2.conv1.weight"].data
    fan_in = w.shape[1] * 9
    assert w.std() == pytest.approx(np.sqrt(2.0 / fan_in), rel=0.02)
    assert abs(w.mean()) < 0.05 * w.std()
    assert not g.params["dec2.conv1.bias"].data.any()


def _inputs(b, s, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(size=(b, 1, s, s))), Tensor(rng.uniform(-1, 1, size=(b, 1, s, s)))


@pytest.mark.parametrize("s", [16, 32, 64])
def test_generator_preserves_spatial_size(s):
    g = build_generator(GeneratorSpec(base_width=2), 0)
    L, z = _inputs(2, s)
    with T.no_grad():
        assert g(L, z).shape == (2, 1, s, s)


@pytest.mark.parametrize("s", [8, 24, 40])
def test_generator_rejects_bad_size(s):
    g = build_generator(GeneratorSpec(base_width=2), 0)
    L, z = _inputs(1, s)
    with pytest.raises(ShapeError):
        g(L, z)


def test_generator_noise_shape_mismatch():
    g = build_generator(GeneratorSpec(base_width=2), 0)
    L, _ = _inputs(1, 16)
    _, z = _inputs(1, 32)
    with pytest.raises(DimensionError):
        g(L, z)


def test_fresh_generator_finite_on_zero_input():
    g = build_generator(GeneratorSpec(base_width=4), 0)
    zero = Tensor(np.zeros((1, 1, 16, 16)))
    with T.no_grad():
        assert np.isfinite(g(zero, zero).data).all()


def test_discriminator_output_range_and_batch():
    s = 32
    d = build_discriminator(DiscriminatorSpec(s, base_width=4), 0)
    L, chroma = _inputs(5, s, 1)
    with T.no_grad():
        p = d(L, chroma).data
    assert p.shape == (5, 1)
    assert np.all(p > 0) and np.all(p < 1)
    # extreme inputs still stay strictly inside
    with T.no_grad():
        p = d(Tensor(np.full((2, 1, s, s), 1e4)), Tensor(np.full((2, 1, s, s), -1e4))).data
    assert np.all(p > 0) and np.all(p < 1)


def test_discriminator_wrong_size():
    d = build_discriminator(DiscriminatorSpec(32, base_width=2), 0)
    L, c = _inputs(1, 16)
    with pytest.raises(ShapeError):
        d(L, c)


def test_skip_connections_pair_encoder_and_decoder():
    """Zeroing the kernel slices that read skip channels equals dropping the skips."""
    spec = GeneratorSpec(base_width=3)
    g = build_generator(spec, 0)
    L, z = _inputs(2, 32)
    with T.no_grad():
        with_skips = g(L, z).data.copy()
        without = g(L, z, use_skips=False).data.copy()
    assert not np.allclose(with_skips, without)

    layers = dict((name, (cin, cout)) for name, cin, cout in generator_layers(spec))
    readers = ["dec2.conv1", "dec3.conv1", "dec4.conv1", "out.conv1"]
    for prev, reader in zip(["dec1.conv2", "dec2.conv2", "dec3.conv2", "dec4.conv2"], readers):
        up = layers[prev][1]
        g.params[f"{reader}.weight"].data[:, up:] = 0.0
    with T.no_grad():
        cut = g(L, z).data
        cut_without = g(L, z, use_skips=False).data
    np.testing.assert_array_equal(cut, cut_without)


def test_skip_widths_match_encoder():
    layers = {name: (cin, cout) for name, cin, cout in generator_layers(GeneratorSpec(base_width=8))}
    # after merge the conv input is decoder width plus the paired encoder width
    assert layers["dec2.conv1"][0] == layers["dec1.conv2"][1] + layers["enc4.conv2"][1]
    assert layers["dec3.conv1"][0] == layers["dec2.conv2"][1] + layers["enc3.conv2"][1]
    assert layers["dec4.conv1"][0] == layers["dec3.conv2"][1] + layers["enc2.conv2"][1]
    assert layers["out.conv1"][0] == layers["dec4.conv2"][1] + layers["enc1.conv2"][1]


def test_makeup_mode_has_no_hook():
    g = build_generator(GeneratorSpec(base_width=2, global_features=0), 0)
    assert not any(k.startswith("hook") for k in g.params)
    assert g.hook is None


def test_global_feature_fusion():
    g = build_generator(GeneratorSpec(base_width=2, global_features=5), 0)
    assert any(k.startswith("hook") for k in g.params)
    L, z = _inputs(2, 16)
    with T.no_grad():
        out = g(L, z)
        ext = g(L, z, global_features=Tensor(np.ones((2, 5))))
        assert out.shape == ext.shape == (2, 1, 16, 16)
        with pytest.raises(DimensionError):
            g(L, z, global_features=Tensor(np.ones((2, 4))))


def test_batchnorm_train_and_eval_modes():
    g = build_generator(GeneratorSpec(base_width=2, batchnorm=True), 0)
    assert "enc1.conv1.bn.gamma" in g.params and "out.conv3.bn.gamma" not in g.params
    L, z = _inputs(3, 16)
    before = g.buffers["enc1.conv1.bn.running_mean"].copy()
    with T.no_grad():
        g(L, z, training=True)
        assert not np.array_equal(before, g.buffers["enc1.conv1.bn.running_mean"])
        snap = g.buffers["enc1.conv1.bn.running_mean"].copy()
        g(L, z)
        assert np.array_equal(snap, g.buffers["enc1.conv1.bn.running_mean"])


def test_forward_is_bitwise_repeatable():
    g = build_generator(GeneratorSpec(base_width=4), 3)
    L, z = _inputs(2, 16)
    with T.no_grad():
        assert g(L, z).data.tobytes() == g(L, z).data.tobytes()
