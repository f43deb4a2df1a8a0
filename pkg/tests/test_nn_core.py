import numpy as np
import pytest

from errors import DegenerateBatch, InvalidSpec, NonFiniteGradient, ShapeMismatch, ZeroVector
from nn_core import (
    INFER,
    BatchNorm2d,
    BatchNormState,
    ConvSpec,
    GradCase,
    PReLUState,
    batchnorm,
    conv2d,
    gradient_check,
    init_conv_weight,
    l2_normalize,
    prelu,
)


def _naive_conv(x, w, spec):
    n, c, h, wd = x.shape
    ho, wo = spec.output_hw(h, wd)
    p = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cin_g = c // spec.groups
    cout_g = spec.out_channels // spec.groups
    kh, kw = spec.kernel
    out = np.zeros((n, spec.out_channels, ho, wo))
    for b in range(n):
        for o in range(spec.out_channels):
            g = o // cout_g
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, g * cin_g:(g + 1) * cin_g,
                               i * spec.stride:i * spec.stride + kh, j * spec.stride:j * spec.stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


def test_conv_1x1_scales_input():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
    w = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
    out = conv2d(x, w, ConvSpec(1, 1, (1, 1)))
    assert out.tolist() == [[[[2.0, 4.0], [6.0, 8.0]]]]


def test_conv_sum_of_ones():
    out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), ConvSpec(1, 1, (3, 3)))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_conv_stem_output_shape():
    spec = ConvSpec(3, 64, (3, 3), stride=2, padding=1)
    w = init_conv_weight(spec, np.random.default_rng(0))
    out = conv2d(np.zeros((1, 3, 112, 112), dtype=np.float32), w, spec)
    assert out.shape == (1, 64, 56, 56)
    assert out.dtype == np.float32


@pytest.mark.parametrize(
    "spec",
    [
        ConvSpec(3, 4, (3, 3), stride=1, padding=1),
        ConvSpec(4, 6, (3, 3), stride=2, padding=1, groups=2),
        ConvSpec(4, 4, (3, 3), stride=2, padding=1, groups=4),
        ConvSpec(4, 4, (5, 5), stride=1, padding=0, groups=4),
        ConvSpec(2, 3, (1, 1)),
    ],
)
def test_conv_matches_naive_loops(spec):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, spec.in_channels, 5, 5))
    w = rng.standard_normal(spec.weight_shape)
    np.testing.assert_allclose(conv2d(x, w, spec), _naive_conv(x, w, spec), rtol=1e-10, atol=1e-12)


def test_grouped_conv_equals_sliced_convs():
    rng = np.random.default_rng(11)
    spec = ConvSpec(6, 9, (3, 3), stride=1, padding=1, groups=3)
    x = rng.standard_normal((2, 6, 6, 6)).astype(np.float32)
    w = init_conv_weight(spec, rng)
    whole = conv2d(x, w, spec)
    parts = [
        conv2d(x[:, 2 * g:2 * g + 2], w[3 * g:3 * g + 3], ConvSpec(2, 3, (3, 3), stride=1, padding=1))
        for g in range(3)
    ]
    assert np.array_equal(whole, np.concatenate(parts, axis=1))


def test_conv_is_linear():
    rng = np.random.default_rng(5)
    spec = ConvSpec(3, 4, (3, 3), padding=1)
    w = rng.standard_normal(spec.weight_shape)
    x, y = rng.standard_normal((2, 2, 3, 6, 6))
    lhs = conv2d(2.5 * x - 0.5 * y, w, spec)
    rhs = 2.5 * conv2d(x, w, spec) - 0.5 * conv2d(y, w, spec)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-9)


def test_conv_is_deterministic():
    rng = np.random.default_rng(2)
    spec = ConvSpec(4, 8, (3, 3), stride=2, padding=1)
    x = rng.standard_normal((3, 4, 9, 9)).astype(np.float32)
    w = init_conv_weight(spec, rng)
    assert np.array_equal(conv2d(x, w, spec), conv2d(x.copy(), w.copy(), spec))


def test_conv_rejects_bad_specs():
    with pytest.raises(InvalidSpec):
        ConvSpec(6, 4, groups=4).validate()
    with pytest.raises(InvalidSpec):
        ConvSpec(3, 3, has_bias=True).validate()
    with pytest.raises(ShapeMismatch):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((4, 3, 3, 3)), ConvSpec(3, 4))
    with pytest.raises(ShapeMismatch):
        conv2d(np.zeros((1, 3, 4, 4)), np.zeros((4, 3, 1, 1)), ConvSpec(3, 4))


def test_he_init_std():
    spec = ConvSpec(64, 128, (1, 1))
    w = init_conv_weight(spec, np.random.default_rng(0), np.float64)
    assert w.std() == pytest.approx(np.sqrt(2.0 / 64), rel=0.05)


def test_batchnorm_two_values():
    state = BatchNormState.create(1, np.float64)
    out = batchnorm(np.array([1.0, 3.0]).reshape(2, 1, 1, 1), state)
    assert out.ravel() == pytest.approx([-0.9999950, 0.9999950], abs=1e-7)


def test_batchnorm_train_normalizes_and_updates_running_stats():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(8, 3, 4, 4))
    state = BatchNormState.create(3, np.float64)
    out = batchnorm(x, state)
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-5)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1.0) < 1e-4)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_update_stats_off_leaves_running_stats():
    state = BatchNormState.create(2, np.float64)
    batchnorm(np.random.default_rng(1).standard_normal((4, 2, 3, 3)), state, update_stats=False)
    assert state.running_mean.tolist() == [0.0, 0.0]
    assert state.running_var.tolist() == [1.0, 1.0]


def test_batchnorm_infer_uses_running_stats():
    state = BatchNormState.create(1, np.float64)
    state.bn_scale[:] = 2.0
    state.bn_shift[:] = 1.0
    state.mode = INFER
    out = batchnorm(np.full((1, 1, 1, 1), 3.0), state)
    assert out.item() == pytest.approx(6.99997, abs=1e-5)


def test_batchnorm_layer_infer_mode_is_batch_independent():
    rng = np.random.default_rng(4)
    state = BatchNormState.create(2, np.float64)
    state.running_mean[:] = [0.5, -1.0]
    state.running_var[:] = [2.0, 0.5]
    layer = BatchNorm2d(state)
    x = rng.standard_normal((4, 2, 3, 3))
    full = layer.forward(x, INFER)
    single = layer.forward(x[:1], INFER)
    assert np.array_equal(full[:1], single)


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        batchnorm(np.ones((1, 2, 1, 1)), BatchNormState.create(2))


def test_batchnorm_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        batchnorm(np.ones((2, 3, 2, 2)), BatchNormState.create(2))


def test_prelu_values():
    state = PReLUState.create(1)
    assert state.slope[0] == pytest.approx(0.25)
    x = np.array([-2.0, 3.0], dtype=np.float32).reshape(2, 1, 1, 1)
    assert prelu(x, state).ravel().tolist() == [-0.5, 3.0]
    state.slope[:] = 0.0
    assert prelu(np.full((1, 1, 1, 1), -5.0), state).item() == 0.0


def test_prelu_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        prelu(np.ones((1, 3, 2, 2)), PReLUState.create(2))


def test_l2_normalize():
    out = l2_normalize(np.array([[3.0, 4.0], [0.0, 1.0]]))
    assert out[0].tolist() == pytest.approx([0.6, 0.8])
    assert out[1].tolist() == [0.0, 1.0]
    rows = l2_normalize(np.random.default_rng(0).standard_normal((5, 16)))
    np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, rtol=1e-12)


def test_l2_normalize_zero_row():
    with pytest.raises(ZeroVector):
        l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))


@pytest.mark.parametrize(
    "op,shapes",
    [
        ("conv2d", [(2, 3, 8, 8), (4, 3, 3, 3)]),
        ("depthwise_conv2d", [(2, 4, 6, 6)]),
        ("gdconv", [(2, 4, 7, 7)]),
        ("batchnorm", [(4, 2, 5, 5)]),
        ("prelu", [(2, 3, 4, 4)]),
        ("l2_normalize", [(3, 16)]),
    ],
)
def test_gradient_check_builtin_ops(op, shapes):
    assert gradient_check(op, shapes, seed=0) < 1e-4


def test_gradient_check_unknown_op():
    with pytest.raises(ValueError):
        gradient_check("softmax", [(2, 2)], seed=0)


def test_gradient_check_reports_non_finite_gradient():
    def factory(shapes, rng):
        x = rng.standard_normal(shapes[0])
        return GradCase(
            "broken",
            [x],
            {},
            forward=lambda: x * 2.0,
            backward=lambda dout: ([np.full_like(x, np.nan)], {}),
        )

    with pytest.raises(NonFiniteGradient):
        gradient_check(factory, [(2, 3)], seed=0)
