import numpy as np
import pytest

from conftest import channel_grid, slab_grid
from fluid_twin.config import MAX_ROLLOUT_STEPS
from fluid_twin.diff_opt import (
    LossWeights,
    OptimizerConfig,
    ParamNormalization,
    backward,
    compute_loss,
    denormalize_params,
    normalize_params,
    optimize,
    rollout,
    rollout_length_for,
)
from fluid_twin.errors import CFLViolation, ConfigError, GridError, PreconditionError, TapeError
from fluid_twin.fluid_step import PARAM_NAMES, VECTOR_PARAMS, SimParams, StepConfig
from fluid_twin.grid_core import CellType, SimGrid
from fluid_twin.optim import adam_step, decayed_adam


def _components(params):
    for name in PARAM_NAMES:
        if name in VECTOR_PARAMS:
            for i in range(3):
                yield name, i
        else:
            yield name, None


def _perturbed(params, name, index, delta):
    if index is None:
        return params.replace(**{name: getattr(params, name) + delta})
    value = getattr(params, name).copy()
    value[index] += delta
    return params.replace(**{name: value})


def _component(grads, name, index):
    value = np.asarray(grads[name])
    return float(value if index is None else value[index])


# ----------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------
def test_loss_of_orthogonal_unit_vectors():
    cells = np.full((1, 1, 1), CellType.FLUID, dtype=np.int8)
    loss, grad = compute_loss(np.array([[[[1.0, 0.0, 0.0]]]]), np.array([[[[0.0, 1.0, 0.0]]]]), LossWeights(), cells)
    # beta * w * |diff|^2 + alpha * w * (1 - cos) with w = 0.5.
    assert loss == pytest.approx(0.5 * 0.5 * 2.0 + 0.5 * 0.5 * 1.0)
    assert grad.shape == (1, 1, 1, 3)


def test_loss_vanishes_on_identical_fields(channel):
    v = np.random.default_rng(0).standard_normal(channel.velocity.shape)
    loss, grad = compute_loss(v, v, LossWeights(), channel.cells)
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_loss_gradient_matches_finite_differences(channel):
    rng = np.random.default_rng(1)
    sim = rng.standard_normal(channel.velocity.shape)
    gt = rng.standard_normal(channel.velocity.shape)
    weights = LossWeights(alpha=0.7, beta=0.3)
    _, grad = compute_loss(sim, gt, weights, channel.cells)
    for index in [(1, 1, 1, 0), (2, 3, 4, 1), (0, 2, 2, 2), (3, 1, 5, 0)]:
        up, down = sim.copy(), sim.copy()
        up[index] += 1e-6
        down[index] -= 1e-6
        numeric = (compute_loss(up, gt, weights, channel.cells)[0] - compute_loss(down, gt, weights, channel.cells)[0]) / 2e-6
        assert grad[index] == pytest.approx(numeric, rel=1e-5, abs=1e-7)


def test_loss_ignores_masked_cells(channel):
    sim = np.zeros(channel.velocity.shape)
    gt = np.zeros(channel.velocity.shape)
    gt[channel.cells == CellType.EMPTY] = [5.0, 0.0, 0.0]
    gt[channel.cells == CellType.SOLID] = [0.0, 5.0, 0.0]
    loss, grad = compute_loss(sim, gt, LossWeights(), channel.cells)
    assert loss == 0.0 and not grad.any()


def test_loss_validation():
    with pytest.raises(ConfigError) as info:
        LossWeights(mask_weights={"LIQUID": 1.0})
    assert info.value.path == "loss.mask_weights.LIQUID"
    with pytest.raises(ConfigError):
        LossWeights(alpha=0.0, beta=0.0)
    with pytest.raises(GridError):
        compute_loss(np.zeros((2, 2, 2, 3)), np.zeros((2, 2, 3, 3)), LossWeights(), np.zeros((2, 2, 2), dtype=np.int8))


# ----------------------------------------------------------------------
# Normalisation
# ----------------------------------------------------------------------
def test_normalisation_round_trip(fd_params):
    spec = ParamNormalization()
    restored = denormalize_params(normalize_params(fd_params, spec), spec, SimParams())
    for name in PARAM_NAMES:
        np.testing.assert_allclose(getattr(restored, name), getattr(fd_params, name), rtol=1e-12)


def test_frozen_parameters_leave_the_vector(fd_params):
    assert ParamNormalization().size == 15
    spec = ParamNormalization(frozen=("dt", "g"))
    assert spec.size == 11
    template = fd_params.replace(dt=0.05)
    assert spec.denormalize(spec.normalize(fd_params), template).dt == 0.05
    with pytest.raises(ConfigError):
        ParamNormalization(frozen=("viscosity",))


def test_activation_jacobian_matches_finite_differences(fd_params):
    spec = ParamNormalization()

    def physical(u):
        params = spec.denormalize(u, fd_params)
        return np.concatenate([np.atleast_1d(getattr(params, name)) for name in spec.free])

    u = spec.normalize(fd_params)
    jac = spec.activation_jacobian(u)
    for i in range(spec.size):
        up, down = u.copy(), u.copy()
        up[i] += 1e-6
        down[i] -= 1e-6
        assert jac[i] == pytest.approx((physical(up)[i] - physical(down)[i]) / 2e-6, rel=1e-6)


def test_sigmoid_parameters_must_be_strictly_inside_their_range(fd_params):
    with pytest.raises(ConfigError) as info:
        ParamNormalization().normalize(fd_params.replace(b=1.0))
    assert info.value.path == "sim.b"


def test_unknown_activation_is_rejected():
    with pytest.raises(ConfigError):
        ParamNormalization({"rho": {"activation": "softplus"}})


# ----------------------------------------------------------------------
# Rollout and reverse pass
# ----------------------------------------------------------------------
def test_rollout_bounds(channel, fd_params, upwind_cfg):
    v0 = np.zeros(channel.velocity.shape)
    for n in (-1, MAX_ROLLOUT_STEPS + 1):
        with pytest.raises(ValueError):
            rollout(v0, fd_params, n, upwind_cfg, channel)
    velocities, tape = rollout(v0, fd_params, 0, upwind_cfg, channel)
    assert len(velocities) == 1 and tape.n_steps == 0
    assert all(not np.any(v) for v in backward(tape, []).values())


def test_tape_replay_is_deterministic(channel, fd_params, upwind_cfg):
    v0 = np.random.default_rng(2).standard_normal(channel.velocity.shape) * 0.3
    velocities, tape = rollout(v0, fd_params, 3, upwind_cfg, channel)
    assert len(velocities) == 4
    for first, again in zip(velocities, tape.replay()):
        np.testing.assert_array_equal(first, again)


def test_backward_rejects_bad_tapes(channel, fd_params, upwind_cfg):
    _, tape = rollout(np.zeros(channel.velocity.shape), fd_params, 2, upwind_cfg, channel)
    with pytest.raises(TapeError):
        backward(tape, [None])
    with pytest.raises(ValueError):
        backward(tape, [None, None], grad_mode="adjoint")
    tape.records[1].complete = False
    with pytest.raises(TapeError):
        backward(tape, [None, None])


def _rollout_loss(params, v0, p0, targets, cfg, grid):
    velocities, tape = rollout(v0, params, len(targets), cfg, grid, p0=p0)
    weights = LossWeights()
    total = 0.0
    loss_grads = []
    for k, target in enumerate(targets, start=1):
        loss, grad = compute_loss(velocities[k], target, weights, grid.cells)
        total += loss
        loss_grads.append(grad)
    return total, tape, loss_grads


def test_parameter_gradients_match_finite_differences(fd_params, upwind_cfg):
    rng = np.random.default_rng(42)
    grid = channel_grid()
    v0 = 0.5 * rng.standard_normal(grid.velocity.shape)
    p0 = rng.standard_normal(grid.dims) * grid.active
    targets = [0.5 * rng.standard_normal(grid.velocity.shape) for _ in range(2)]

    _, tape, loss_grads = _rollout_loss(fd_params, v0, p0, targets, upwind_cfg, grid)
    grads = backward(tape, loss_grads)

    for name, index in _components(fd_params):
        current = getattr(fd_params, name) if index is None else getattr(fd_params, name)[index]
        h = 1e-6 * max(1.0, abs(float(current)))
        up = _rollout_loss(_perturbed(fd_params, name, index, h), v0, p0, targets, upwind_cfg, grid)[0]
        down = _rollout_loss(_perturbed(fd_params, name, index, -h), v0, p0, targets, upwind_cfg, grid)[0]
        numeric = (up - down) / (2.0 * h)
        analytic = _component(grads, name, index)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-5, (name, index, analytic, numeric)


def test_recorded_and_auxiliary_gradients_agree_when_pressure_converges(fd_params):
    rng = np.random.default_rng(43)
    grid = channel_grid()
    cfg = StepConfig(pressure_iters=400, convection_scheme="upwind")
    v0 = 0.5 * rng.standard_normal(grid.velocity.shape)
    targets = [0.5 * rng.standard_normal(grid.velocity.shape) for _ in range(2)]

    _, tape, loss_grads = _rollout_loss(fd_params, v0, None, targets, cfg, grid)
    recorded = backward(tape, loss_grads, "recorded_jacobi")
    auxiliary = backward(tape, loss_grads, "auxiliary_poisson")
    for name in ("g", "v_in", "v_out", "b"):
        scale = float(np.abs(recorded[name]).max())
        np.testing.assert_allclose(auxiliary[name], recorded[name], rtol=1e-2, atol=1e-2 * scale)


def test_gravity_gradient_of_a_single_cell():
    cells = np.full((3, 3, 3), CellType.EMPTY, dtype=np.int8)
    cells[1, 1, 1] = CellType.SURFACE
    grid = SimGrid.create((3, 3, 3), 0.1, cells=cells)
    params = SimParams(g=[1.0, -9.81, 0.5], nu=0.0, dt=0.02)
    cfg = StepConfig(pressure_iters=5, convection_scheme="none")

    velocities, tape = rollout(np.zeros(grid.velocity.shape), params, 1, cfg, grid)
    v1 = velocities[1]
    np.testing.assert_allclose(v1[1, 1, 1], params.g * params.dt)
    # L = |v1|^2 / 2, so dL/dv1 = v1.
    grads = backward(tape, [v1])
    np.testing.assert_allclose(grads["g"], params.dt * v1[1, 1, 1], rtol=1e-12)
    assert float(grads["dt"]) == pytest.approx(params.dt * float(params.g @ params.g))


# ----------------------------------------------------------------------
# Optimisation
# ----------------------------------------------------------------------
def test_rollout_length_follows_guidance_motion():
    still = [np.ones((4, 4, 4, 3))] * 10
    assert rollout_length_for(still, OptimizerConfig(rollout_steps=None)) == 9
    assert rollout_length_for(still, OptimizerConfig(rollout_steps=3)) == 3
    assert rollout_length_for(still[:3], OptimizerConfig(rollout_steps=20)) == 2
    with pytest.raises(PreconditionError):
        rollout_length_for(still[:1], OptimizerConfig())


def test_optimizer_config_validation():
    with pytest.raises(ConfigError) as info:
        OptimizerConfig(rollout_steps=MAX_ROLLOUT_STEPS + 1)
    assert info.value.path == "optimizer.rollout_steps"
    with pytest.raises(ConfigError):
        OptimizerConfig(lr=0.0)
    with pytest.raises(ConfigError):
        OptimizerConfig(grad_mode="adjoint")


def _truth():
    return SimParams(
        v_in=[1.0, 0.0, 0.0], v_tilde_in=0.0, v_out=[1.0, 0.0, 0.0], rho=1000.0, nu=1e-6,
        b=0.2, d=0.1, g=[0.0, -9.81, 0.0], dt=0.01,
    )


_FROZEN = ("dt", "nu", "b", "d", "v_out", "v_tilde_in")


def test_decayed_adam_steps_shrink_geometrically():
    optimizer = decayed_adam(0.1, 5, 0.01)
    params = np.array([1.0, 1.0])
    state = optimizer.init(params)
    sizes = []
    for _ in range(5):
        updated, state = adam_step(optimizer, state, params, np.array([2.0, -3.0]))
        delta = updated - params
        assert delta[0] < 0.0 < delta[1]
        sizes.append(abs(delta[0]))
        params = updated

    np.testing.assert_allclose(sizes, [0.1 * 0.01 ** (k / 4) for k in range(5)], rtol=1e-6)
    params[0] = 0.0
    assert params.dtype == np.float64


def test_decayed_adam_rejects_bad_schedules():
    with pytest.raises(ValueError):
        decayed_adam(0.0, 10)
    with pytest.raises(ValueError):
        decayed_adam(0.1, 10, final_ratio=0.0)


def test_optimize_recovers_gravity_and_inflow_of_a_synthetic_twin():
    grid = slab_grid()
    truth = _truth()
    step_cfg = StepConfig(pressure_iters=30, convection_scheme="upwind")
    guidance, _ = rollout(np.zeros(grid.velocity.shape), truth, 5, step_cfg, grid)
    init = truth.replace(g=truth.g * 3.0, v_in=truth.v_in * 3.0, rho=truth.rho * 3.0)
    opt_cfg = OptimizerConfig(iterations=300, lr=0.1, rollout_steps=5, windows_per_iteration=1, frozen=_FROZEN)

    result = optimize(guidance, init, LossWeights(), opt_cfg, step_cfg, grid)
    assert not result.failed and not result.timed_out
    assert result.rollout_steps == 5
    assert result.params.g[1] == pytest.approx(-9.81, rel=0.05)
    assert result.params.v_in[0] == pytest.approx(1.0, rel=0.05)
    assert result.best_loss < 0.05 * result.initial_loss
    assert result.best_history == sorted(result.best_history, reverse=True)


def test_optimize_keeps_exact_parameters():
    grid = slab_grid(8, low=2, high=6)
    truth = _truth()
    step_cfg = StepConfig(pressure_iters=10, convection_scheme="upwind")
    guidance, _ = rollout(np.zeros(grid.velocity.shape), truth, 3, step_cfg, grid)
    opt_cfg = OptimizerConfig(iterations=3, rollout_steps=3, frozen=_FROZEN)
    result = optimize(guidance, truth, LossWeights(), opt_cfg, step_cfg, grid)
    assert result.best_loss == pytest.approx(0.0, abs=1e-10)
    np.testing.assert_array_equal(result.params.g, truth.g)


def test_optimize_input_checks(channel, fd_params, upwind_cfg):
    frame = np.zeros(channel.velocity.shape)
    with pytest.raises(PreconditionError):
        optimize([frame], fd_params, LossWeights(), OptimizerConfig(), upwind_cfg, channel)
    with pytest.raises(GridError):
        optimize([frame, np.zeros((2, 2, 2, 3))], fd_params, LossWeights(), OptimizerConfig(), upwind_cfg, channel)
    fast = np.full(channel.velocity.shape, 100.0)
    with pytest.raises(CFLViolation):
        optimize([frame, fast], fd_params, LossWeights(), OptimizerConfig(), upwind_cfg, channel)


def test_optimize_reports_divergence_as_failure(channel, fd_params, upwind_cfg):
    frames = [np.zeros(channel.velocity.shape)] * 2
    init = fd_params.replace(g=[0.0, -1e200, 0.0])
    with np.errstate(all="ignore"):
        result = optimize(frames, init, LossWeights(), OptimizerConfig(iterations=5, rollout_steps=1), upwind_cfg, channel)
    assert result.failed
    assert result.message
    assert result.params is init


def test_optimize_stops_when_the_time_budget_runs_out(channel, fd_params, upwind_cfg):
    frames = [np.zeros(channel.velocity.shape)] * 2
    opt_cfg = OptimizerConfig(iterations=100000, rollout_steps=1, stall_timeout_s=0.2, time_budget_s=0.1)
    result = optimize(frames, fd_params, LossWeights(), opt_cfg, upwind_cfg, channel)
    assert result.timed_out and not result.failed
    assert result.iterations < 100000
    assert len(result.loss_history) >= 1
