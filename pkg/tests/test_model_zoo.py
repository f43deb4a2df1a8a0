import json

import numpy as np
import pytest

import model_zoo
from errors import InvalidConfig, ShapeMismatch
from model_zoo import (
    ArchConfig,
    Block,
    ConvUnit,
    Model,
    StageSpec,
    arch_from_preset,
    build_model,
    count_flops,
    count_params,
    embed,
    layer_table,
    model_grad_case,
    model_size_mb,
    param_category,
)
from nn_core import INFER, BatchNorm2d, BatchNormState, Conv2d, ConvSpec, gradient_check, init_conv_weight


def _oracle_params(arch):
    """Hand sum over the stage table: conv weights + 2 BN terms per channel + PReLU slopes."""

    def ch(c):
        r = arch.channel_round
        return max(r, int(c * arch.width_mult / r + 0.5) * r)

    h = arch.input_size[0]
    cin, total = 3, 0
    for st in arch.stage_table:
        n = st.n if arch.stage_repeats is None else min(st.n, arch.stage_repeats)
        if st.kind == "conv":
            k, c = st.kernel or 3, ch(st.c)
            for r in range(n):
                total += k * k * cin * c + 3 * c
                h = (h + 2 * (k // 2) - k) // (st.s if r == 0 else 1) + 1
                cin = c
        elif st.kind == "dwconv":
            for r in range(n):
                total += 9 * cin + 3 * cin
                h = (h + 2 - 3) // (st.s if r == 0 else 1) + 1
        elif st.kind == "bottleneck":
            c = ch(st.c)
            for r in range(n):
                hid = cin * st.t
                total += cin * hid + 3 * hid + 9 * hid + 3 * hid + hid * c + 2 * c
                h = (h + 2 - 3) // (st.s if r == 0 else 1) + 1
                cin = c
        elif st.kind == "gdconv":
            total += h * h * cin + 2 * cin
            h = 1
        else:
            total += cin * arch.embedding_dim + 2 * arch.embedding_dim
            cin = arch.embedding_dim
    return total


def _tiny_arch(**kw):
    base = dict(input_size=(28, 28), width_mult=0.25, stage_repeats=1, embedding_dim=512)
    base.update(kw)
    return ArchConfig(**base)


def test_baseline_param_count():
    model = build_model(ArchConfig(), seed=0)
    params = count_params(model)
    assert params == 1_200_512
    assert params == _oracle_params(ArchConfig())
    assert abs(params - 1_100_000) / 1_100_000 <= 0.10


def test_wide_preset_is_larger_and_2m_preset_lands_near_published_total():
    wide = build_model(arch_from_preset("mmobilefacenet"), seed=0)
    tuned = build_model(arch_from_preset("mmobilefacenet-2m"), seed=0)
    assert count_params(wide) > 1_200_512
    assert count_params(tuned) == 2_077_952
    assert abs(count_params(tuned) - model_zoo.PUBLISHED_WIDE_PARAMS) / model_zoo.PUBLISHED_WIDE_PARAMS < 0.02


def test_width_two_scales_pointwise_by_four_and_depthwise_by_two():
    narrow = layer_table(ArchConfig(width_mult=1.0))
    wide = layer_table(ArchConfig(width_mult=2.0))
    assert [r.name for r in narrow] == [r.name for r in wide]

    def weights(r):
        return r.kernel[0] * r.kernel[1] * (r.in_channels // r.groups) * r.out_channels

    for a, b in zip(narrow, wide):
        if a.kind == "depthwise":
            assert weights(b) == 2 * weights(a), a.name
        elif a.kind == "pointwise" and "linear_conv" not in a.name:
            assert weights(b) == 4 * weights(a), a.name


@pytest.mark.parametrize("seed", range(5))
def test_param_count_matches_oracle_for_random_archs(seed):
    rng = np.random.default_rng(seed)
    arch = ArchConfig(
        input_size=(int(rng.choice([56, 112])),) * 2,
        width_mult=float(rng.choice([0.5, 0.75, 1.0, 1.5])),
        embedding_dim=int(rng.choice([128, 256, 512])),
        stage_repeats=int(rng.integers(1, 4)),
    )
    assert count_params(build_model(arch, seed=seed)) == _oracle_params(arch)
    assert sum(r.params for r in layer_table(arch)) == _oracle_params(arch)


def test_single_conv_param_and_flop_counts():
    spec = ConvSpec(3, 64, (3, 3), stride=2, padding=1)
    conv = Conv2d(spec, init_conv_weight(spec, np.random.default_rng(0)))
    assert conv.flops(3, 112, 112) == (10_838_016, (64, 56, 56))
    assert sum(p.size for p in conv.params().values()) == 1728
    unit = ConvUnit(conv, BatchNorm2d(BatchNormState.create(64)), None)
    model = Model([Block("b0", [("conv", unit)])], ArchConfig(stage_table=[]))
    assert count_params(model) == 1856
    pw = ConvSpec(64, 64, (1, 1))
    assert Conv2d(pw, init_conv_weight(pw, np.random.default_rng(0))).flops(64, 1, 1)[0] == 8192


def test_flops_match_layer_table():
    arch = ArchConfig()
    model = build_model(arch, seed=0)
    table = layer_table(arch)
    assert count_flops(model) == sum(r.flops for r in table)
    stem = table[0]
    assert stem.flops == 10_838_016 + 2 * 64 * 56 * 56 + 64 * 56 * 56


def test_model_size():
    spec = ConvSpec(1022, 1024, (1, 1))
    unit = ConvUnit(Conv2d(spec, np.zeros(spec.weight_shape, dtype=np.float32)),
                    BatchNorm2d(BatchNormState.create(1024)), None)
    model = Model([Block("b0", [("conv", unit)])], ArchConfig(stage_table=[]))
    assert count_params(model) == 1_048_576
    assert model_size_mb(model) == 4.0
    empty = Model.empty()
    assert (count_params(empty), count_flops(empty), model_size_mb(empty)) == (0, 0, 0.0)


def test_build_is_deterministic():
    a = build_model(_tiny_arch(), seed=3).named_params()
    b = build_model(_tiny_arch(), seed=3).named_params()
    c = build_model(_tiny_arch(), seed=4).named_params()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize("width", [0.25, 0.5, 1.0, 2.0])
def test_embedding_width_does_not_depend_on_multiplier(width):
    model = build_model(_tiny_arch(width_mult=width), seed=0)
    x = np.random.default_rng(0).standard_normal((2, 3, 28, 28)).astype(np.float32)
    assert embed(model, x).shape == (2, 512)


def test_embed_infer_rows_are_unit_and_train_rows_are_raw():
    model = build_model(arch_from_preset("mobilefacenet-desk"), seed=0)
    x = np.random.default_rng(1).standard_normal((3, 3, 56, 56)).astype(np.float32)
    out = embed(model, x, INFER)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-5)
    raw = embed(model, x, "train")
    assert raw.shape == (3, 512)
    assert not np.allclose(np.linalg.norm(raw, axis=1), 1.0)


def test_embed_identical_rows_give_identical_embeddings():
    model = build_model(arch_from_preset("mobilefacenet-desk"), seed=0)
    row = np.random.default_rng(2).standard_normal((1, 3, 56, 56)).astype(np.float32)
    out = embed(model, np.concatenate([row, row]))
    assert np.array_equal(out[0], out[1])


def test_embed_rejects_wrong_input_size():
    model = build_model(_tiny_arch(), seed=0)
    with pytest.raises(ShapeMismatch):
        embed(model, np.zeros((1, 3, 32, 32), dtype=np.float32))


@pytest.mark.slow
def test_baseline_forward_at_full_resolution():
    model = build_model(ArchConfig(), seed=0)
    x = np.random.default_rng(0).standard_normal((2, 3, 112, 112)).astype(np.float32)
    out = embed(model, x)
    assert out.shape == (2, 512)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-5)


def test_residual_bottleneck_passes_input_through():
    model = build_model(ArchConfig(), seed=0)
    block = next(b for b in model.blocks if b.residual)
    project = dict(block.units)["project"]
    project.conv.weight[...] = 0.0
    cin = block.units[0][1].conv.spec.in_channels
    x = np.random.default_rng(0).standard_normal((2, cin, 7, 7)).astype(np.float32)
    assert np.array_equal(block.forward(x, INFER), x)


def test_residual_flags_follow_stride_and_channels():
    model = build_model(ArchConfig(), seed=0)
    for block in model.blocks:
        units = dict(block.units)
        if "dw" not in units:
            assert not block.residual
            continue
        stride = units["dw"].conv.spec.stride
        same = units["expand"].conv.spec.in_channels == units["project"].conv.spec.out_channels
        assert block.residual == (stride == 1 and same)


@pytest.mark.slow
def test_whole_model_gradient_check():
    arch = _tiny_arch(embedding_dim=16)
    assert gradient_check(model_grad_case(arch, batch=4), [], seed=0, samples_per_array=4) < 1e-4


def test_invalid_architectures():
    with pytest.raises(InvalidConfig):
        build_model(ArchConfig(stage_table=[]))
    with pytest.raises(InvalidConfig):
        build_model(ArchConfig(width_mult=0.0))
    table = list(ArchConfig().stage_table)
    table[-2] = StageSpec("gdconv", kernel=5)
    with pytest.raises(InvalidConfig):
        build_model(ArchConfig(stage_table=table))
    with pytest.raises(InvalidConfig):
        build_model(ArchConfig(per_stage_channel_override=[64]))
    with pytest.raises(InvalidConfig):
        build_model(ArchConfig(stage_table=table[:-2] + table[-1:]))


def test_arch_round_trip_and_presets():
    arch = arch_from_preset("mmobilefacenet-2m")
    assert ArchConfig.from_dict(arch.to_dict()) == arch
    assert arch_from_preset("mobilefacenet", width_mult=2.0).width_mult == 2.0
    with pytest.raises(InvalidConfig):
        arch_from_preset("resnet100")


def test_presets_from_env_file(tmp_path, monkeypatch):
    path = tmp_path / "archs.json"
    path.write_text(json.dumps({"__doc__": "x", "tiny": {"width_mult": 0.25}}), encoding="utf-8")
    monkeypatch.setenv("LWFR_ARCH_PRESETS", str(path))
    assert model_zoo._load_arch_presets_from_json() == {"tiny": {"width_mult": 0.25}}


def test_presets_fall_back_on_bad_json(tmp_path, monkeypatch):
    path = tmp_path / "archs.json"
    path.write_text("{not json", encoding="utf-8")
    monkeypatch.setenv("LWFR_ARCH_PRESETS", str(path))
    assert model_zoo._load_arch_presets_from_json() == model_zoo.DEFAULT_ARCH_PRESETS


def test_param_category():
    assert param_category(1_200_512) == "<2M"
    assert param_category(2_077_952) == "2-5M"
    assert param_category(5_000_001) == ">5M"
