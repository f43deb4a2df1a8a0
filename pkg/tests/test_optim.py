import numpy as np
import pytest

from errors import EpochOutOfRange, InvalidConfig, NonFiniteGradient, ShapeMismatch
from margin_loss import ClassifierHead
from model_zoo import ArchConfig, build_model
from optim import (
    LrSchedule,
    SamConfig,
    SgdConfig,
    global_norm,
    init_velocity,
    lr_at,
    sam_perturbation,
    sam_step,
    sgd_step,
)


def _quadratic(params):
    """L(w) = 0.5 * sum(w^2), gradient w."""

    def loss_fn(update_stats):
        w = params["w"]
        return 0.5 * float(np.sum(w * w)), {"w": w.copy()}

    return loss_fn


def test_sgd_vanilla_step():
    params = {"w": np.array([1.0])}
    sgd_step(params, {"w": np.array([1.0])}, init_velocity(params), 0.1, SgdConfig(momentum=0.0, weight_decay=0.0))
    assert params["w"][0] == pytest.approx(0.9)


def test_sgd_momentum_recurrence():
    params = {"w": np.array([1.0])}
    velocity = init_velocity(params)
    cfg = SgdConfig(momentum=0.9, weight_decay=0.0)
    sgd_step(params, {"w": np.array([1.0])}, velocity, 0.1, cfg)
    assert velocity["w"][0] == pytest.approx(1.0)
    assert params["w"][0] == pytest.approx(0.9)
    sgd_step(params, {"w": np.array([1.0])}, velocity, 0.1, cfg)
    assert velocity["w"][0] == pytest.approx(1.9)
    assert params["w"][0] == pytest.approx(0.71)


def test_sgd_coupled_weight_decay():
    params = {"w": np.array([2.0])}
    sgd_step(params, {"w": np.array([0.0])}, init_velocity(params), 0.5, SgdConfig(momentum=0.0, weight_decay=0.1))
    assert params["w"][0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_sgd_zero_lr_is_a_no_op():
    rng = np.random.default_rng(0)
    params = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": rng.standard_normal(5).astype(np.float32)}
    before = {k: v.copy() for k, v in params.items()}
    grads = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in params.items()}
    sgd_step(params, grads, init_velocity(params), 0.0)
    for k in params:
        assert np.array_equal(params[k], before[k])


def test_sgd_updates_in_place():
    w = np.ones(3)
    params = {"w": w}
    out = sgd_step(params, {"w": np.ones(3)}, init_velocity(params), 0.1)
    assert out is params
    assert params["w"] is w
    assert w[0] < 1.0


def test_sgd_errors():
    params = {"w": np.ones(3)}
    with pytest.raises(ShapeMismatch):
        sgd_step(params, {"v": np.ones(3)}, init_velocity(params), 0.1)
    with pytest.raises(ShapeMismatch):
        sgd_step(params, {"w": np.ones(2)}, init_velocity(params), 0.1)
    with pytest.raises(NonFiniteGradient):
        sgd_step(params, {"w": np.array([1.0, np.inf, 0.0])}, init_velocity(params), 0.1)


def test_sam_quadratic_oracle():
    params = {"w": np.array([1.0])}
    base = SgdConfig(momentum=0.0, weight_decay=0.0)
    loss, _ = sam_step(params, _quadratic(params), init_velocity(params), 0.1, SamConfig(rho=0.02), base)
    assert loss == pytest.approx(0.5, abs=1e-12)
    assert params["w"][0] == pytest.approx(0.898, abs=1e-12)


def test_sam_zero_rho_equals_sgd():
    rng = np.random.default_rng(3)
    start = {"w": rng.standard_normal(6), "u": rng.standard_normal((2, 2))}
    a = {k: v.copy() for k, v in start.items()}
    b = {k: v.copy() for k, v in start.items()}
    va, vb = init_velocity(a), init_velocity(b)
    for _ in range(3):
        sam_step(a, _quadratic_all(a), va, 0.05, SamConfig(rho=0.0))
        _, g = _quadratic_all(b)(True)
        sgd_step(b, g, vb, 0.05)
    for k in start:
        assert np.array_equal(a[k], b[k])


def _quadratic_all(params):
    def loss_fn(update_stats):
        return 0.5 * sum(float(np.sum(w * w)) for w in params.values()), {k: w.copy() for k, w in params.items()}

    return loss_fn


def test_sam_zero_gradient_reduces_to_sgd():
    params = {"w": np.array([1.0, -2.0])}

    def loss_fn(update_stats):
        return 0.0, {"w": np.zeros(2)}

    eps = sam_perturbation(params, {"w": np.zeros(2)}, SamConfig(), SgdConfig(weight_decay=0.0))
    assert eps["w"].tolist() == [0.0, 0.0]
    sam_step(params, loss_fn, init_velocity(params), 0.1, SamConfig(), SgdConfig(weight_decay=0.0))
    assert params["w"].tolist() == [1.0, -2.0]


def test_sam_zero_lr_restores_weights_bitwise():
    rng = np.random.default_rng(8)
    params = {"w": rng.standard_normal(10).astype(np.float32)}
    before = params["w"].copy()
    sam_step(params, _quadratic(params), init_velocity(params), 0.0, SamConfig(rho=0.5))
    assert np.array_equal(params["w"], before)


def test_sam_perturbation_has_norm_rho():
    rng = np.random.default_rng(1)
    params = {"a": rng.standard_normal((4, 4)), "b": rng.standard_normal(3)}
    grads = {k: rng.standard_normal(v.shape) for k, v in params.items()}
    eps = sam_perturbation(params, grads, SamConfig(rho=0.05), SgdConfig())
    assert global_norm(eps) == pytest.approx(0.05, rel=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_sam_perturbation_has_norm_rho_on_models(seed):
    rng = np.random.default_rng(seed)
    arch = ArchConfig(input_size=(28, 28), width_mult=float(rng.choice([0.25, 0.5])), stage_repeats=1, embedding_dim=32)
    head = ClassifierHead.create(int(rng.integers(2, 20)), 32, rng)
    params = dict(build_model(arch, seed=seed).named_params(), head=head.class_weights)
    grads = {k: rng.standard_normal(v.shape).astype(v.dtype) for k, v in params.items()}
    eps = sam_perturbation(params, grads, SamConfig(rho=0.02), SgdConfig())
    assert eps.keys() == params.keys()
    assert global_norm(eps) == pytest.approx(0.02, rel=1e-6)


def test_sam_calls_loss_fn_with_stats_flag_once_each():
    params = {"w": np.array([1.0])}
    calls = []

    def loss_fn(update_stats):
        calls.append(update_stats)
        return 0.0, {"w": params["w"].copy()}

    sam_step(params, loss_fn, init_velocity(params), 0.1)
    assert calls == [False, True]


def test_sam_restores_weights_when_second_pass_fails():
    params = {"w": np.array([1.0, 2.0])}
    calls = []

    def loss_fn(update_stats):
        calls.append(update_stats)
        if update_stats:
            raise RuntimeError("boom")
        return 0.0, {"w": np.ones(2)}

    with pytest.raises(RuntimeError):
        sam_step(params, loss_fn, init_velocity(params), 0.1)
    assert params["w"].tolist() == [1.0, 2.0]


def test_lr_default_schedule_values():
    sched = LrSchedule()
    assert lr_at(sched, 0) == pytest.approx(0.1, rel=1e-9)
    assert lr_at(sched, 20) == pytest.approx(0.01 * 0.998 ** 20, rel=1e-9)
    assert lr_at(sched, 20) == pytest.approx(9.60751e-3, rel=1e-6)
    assert lr_at(sched, 50) == pytest.approx(0.001 * 0.998 ** 50, rel=1e-9)
    assert lr_at(sched, 50) == pytest.approx(9.04747e-4, rel=1e-6)


def test_lr_non_increasing_over_run():
    sched = LrSchedule()
    lrs = [lr_at(sched, e) for e in range(sched.total_epochs)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_lr_ratio_within_stage_is_gamma():
    sched = LrSchedule()
    for e in range(sched.total_epochs - 1):
        if e + 1 in sched.stage_boundaries:
            continue
        assert lr_at(sched, e + 1) / lr_at(sched, e) == pytest.approx(sched.decay_gamma, rel=1e-12)


def test_lr_epoch_out_of_range():
    with pytest.raises(EpochOutOfRange):
        lr_at(LrSchedule(), 100)
    with pytest.raises(EpochOutOfRange):
        lr_at(LrSchedule(), -1)


@pytest.mark.parametrize(
    "sched",
    [
        LrSchedule(stage_lrs=[0.1, 0.01]),
        LrSchedule(stage_lrs=[0.1, 0.2, 0.001]),
        LrSchedule(stage_boundaries=[50, 20]),
        LrSchedule(stage_boundaries=[20, 100]),
        LrSchedule(decay_gamma=1.5),
        LrSchedule(total_epochs=0, stage_lrs=[0.1], stage_boundaries=[]),
    ],
)
def test_invalid_schedules(sched):
    with pytest.raises(InvalidConfig):
        sched.validate()


def test_invalid_optimizer_configs():
    with pytest.raises(InvalidConfig):
        SgdConfig(momentum=1.0).validate()
    with pytest.raises(InvalidConfig):
        SgdConfig(weight_decay=-1.0).validate()
    with pytest.raises(InvalidConfig):
        SamConfig(rho=-0.1).validate()
