"""Differentiable rollouts, the masked velocity loss and physical parameter fitting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fluid_twin.config import (
    DEFAULT_BATCH,
    DEFAULT_LOSS,
    DEFAULT_NORMALIZATION,
    DEFAULT_OPTIMIZER,
    MAX_ROLLOUT_STEPS,
    SPEED_FLOOR,
)
from fluid_twin.errors import CFLViolation, ConfigError, GridError, PreconditionError, SimulationDiverged, TapeError
from fluid_twin.fluid_step import (
    GRAD_MODES,
    PARAM_NAMES,
    VECTOR_PARAMS,
    SimParams,
    StepConfig,
    StepRecord,
    step,
    step_vjp,
    zero_param_grads,
)
from fluid_twin.grid_core import CellType, SimGrid
from fluid_twin.optim import adam_step, decayed_adam
from fluid_twin.pointcloud_prep import batch_size_from_score, motion_score
from fluid_twin.watchdog import Watchdog

logger = logging.getLogger(__name__)

ACTIVATIONS = ("exp", "sigmoid_scaled", "identity")


# ----------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------
@dataclass
class LossWeights:
    alpha: float = DEFAULT_LOSS["alpha"]
    beta: float = DEFAULT_LOSS["beta"]
    mask_weights: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LOSS["mask_weights"]))

    def __post_init__(self) -> None:
        if self.alpha < 0.0:
            raise ConfigError("loss.alpha", "must be >= 0")
        if self.beta < 0.0:
            raise ConfigError("loss.beta", "must be >= 0")
        if self.alpha == 0.0 and self.beta == 0.0:
            raise ConfigError("loss.alpha", "alpha and beta cannot both be zero")
        merged = dict(DEFAULT_LOSS["mask_weights"])
        for name, value in self.mask_weights.items():
            if name not in CellType.__members__:
                raise ConfigError(f"loss.mask_weights.{name}", "unknown cell type")
            if float(value) < 0.0:
                raise ConfigError(f"loss.mask_weights.{name}", "must be >= 0")
            merged[name] = float(value)
        self.mask_weights = merged

    def mask_field(self, cells: np.ndarray) -> np.ndarray:
        table = np.zeros(len(CellType))
        for name, value in self.mask_weights.items():
            table[int(CellType[name])] = value
        return table[np.asarray(cells, dtype=np.int64)]


def compute_loss(
    v_sim: np.ndarray, v_gt: np.ndarray, weights: LossWeights, cells: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Masked direction + L2 velocity loss and its gradient w.r.t. ``v_sim``."""

    shape = np.shape(v_sim)
    sim = np.asarray(v_sim, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(v_gt, dtype=np.float64).reshape(-1, 3)
    if sim.shape != gt.shape:
        raise GridError(f"velocity fields differ in shape: {np.shape(v_sim)} vs {np.shape(v_gt)}")
    mask = weights.mask_field(cells).ravel()

    diff = sim - gt
    loss = weights.beta * float(np.sum(mask * np.sum(diff * diff, axis=1)))
    grad = 2.0 * weights.beta * mask[:, None] * diff

    if weights.alpha > 0.0:
        sim_speed = np.linalg.norm(sim, axis=1)
        gt_speed = np.linalg.norm(gt, axis=1)
        ok = (sim_speed >= SPEED_FLOOR) & (gt_speed >= SPEED_FLOOR) & (mask != 0.0)
        if ok.any():
            s, g, w = sim[ok], gt[ok], mask[ok]
            ns, ng = sim_speed[ok][:, None], gt_speed[ok][:, None]
            cosine = np.sum(s * g, axis=1, keepdims=True) / (ns * ng)
            loss += weights.alpha * float(np.sum(w * (1.0 - cosine[:, 0])))
            grad[ok] -= weights.alpha * w[:, None] * (g / (ng * ns) - cosine * s / ns**2)
    return loss, grad.reshape(shape)


# ----------------------------------------------------------------------
# Parameter normalisation
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class ParamActivation:
    activation: str
    scale: float

    def forward(self, u: np.ndarray) -> np.ndarray:
        if self.activation == "exp":
            return self.scale * np.exp(u)
        if self.activation == "sigmoid_scaled":
            return self.scale / (1.0 + np.exp(-u))
        return self.scale * u

    def inverse(self, value: np.ndarray, name: str) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        ratio = value / self.scale
        if self.activation == "exp":
            if np.any(ratio <= 0.0):
                raise ConfigError(f"sim.{name}", "must be > 0 for the exp activation")
            return np.log(ratio)
        if self.activation == "sigmoid_scaled":
            if np.any((ratio <= 0.0) | (ratio >= 1.0)):
                raise ConfigError(f"sim.{name}", "must lie strictly inside (0, scale) for the sigmoid activation")
            return np.log(ratio / (1.0 - ratio))
        return ratio

    def derivative(self, u: np.ndarray) -> np.ndarray:
        if self.activation == "exp":
            return self.scale * np.exp(u)
        if self.activation == "sigmoid_scaled":
            s = 1.0 / (1.0 + np.exp(-u))
            return self.scale * s * (1.0 - s)
        return np.full_like(np.asarray(u, dtype=np.float64), self.scale)


class ParamNormalization:
    """Maps SimParams to one unconstrained vector over the non-frozen parameters."""

    def __init__(self, activations: Optional[Mapping[str, Mapping[str, Any]]] = None, frozen: Sequence[str] = ()):
        spec = {name: dict(value) for name, value in DEFAULT_NORMALIZATION.items()}
        for name, value in (activations or {}).items():
            if name not in PARAM_NAMES:
                raise ConfigError(f"normalization.{name}", "unknown parameter")
            spec[name] = {**spec[name], **value}
        self.activations: Dict[str, ParamActivation] = {}
        for name, value in spec.items():
            if value["activation"] not in ACTIVATIONS:
                raise ConfigError(f"normalization.{name}.activation", f"must be one of {ACTIVATIONS}")
            if not float(value["scale"]) > 0.0:
                raise ConfigError(f"normalization.{name}.scale", "must be > 0")
            self.activations[name] = ParamActivation(value["activation"], float(value["scale"]))
        for name in frozen:
            if name not in PARAM_NAMES:
                raise ConfigError("optimizer.frozen", f"unknown parameter {name!r}")
        self.frozen = tuple(frozen)
        self.free = tuple(name for name in PARAM_NAMES if name not in self.frozen)
        self.slices: Dict[str, slice] = {}
        offset = 0
        for name in self.free:
            size = 3 if name in VECTOR_PARAMS else 1
            self.slices[name] = slice(offset, offset + size)
            offset += size
        self.size = offset

    def normalize(self, params: SimParams) -> np.ndarray:
        u = np.zeros(self.size)
        for name in self.free:
            u[self.slices[name]] = np.atleast_1d(self.activations[name].inverse(getattr(params, name), name))
        return u

    def denormalize(self, u: np.ndarray, template: SimParams) -> SimParams:
        changes: Dict[str, Any] = {}
        for name in self.free:
            value = self.activations[name].forward(np.asarray(u[self.slices[name]], dtype=np.float64))
            changes[name] = value if name in VECTOR_PARAMS else float(value[0])
        return template.replace(**changes)

    def activation_jacobian(self, u: np.ndarray) -> np.ndarray:
        """Elementwise d(physical)/d(normalised) along the flat vector."""

        jac = np.zeros(self.size)
        for name in self.free:
            jac[self.slices[name]] = self.activations[name].derivative(u[self.slices[name]])
        return jac

    def flatten_grads(self, grads: Mapping[str, np.ndarray]) -> np.ndarray:
        flat = np.zeros(self.size)
        for name in self.free:
            flat[self.slices[name]] = np.atleast_1d(grads[name])
        return flat

    def describe(self, name: str) -> Tuple[str, float]:
        act = self.activations[name]
        return act.activation, act.scale


def normalize_params(params: SimParams, spec: ParamNormalization) -> np.ndarray:
    return spec.normalize(params)


def denormalize_params(u: np.ndarray, spec: ParamNormalization, template: SimParams) -> SimParams:
    return spec.denormalize(u, template)


# ----------------------------------------------------------------------
# Rollout and reverse pass
# ----------------------------------------------------------------------
@dataclass
class GradientTape:
    """Everything needed to replay a rollout and pull gradients back through it."""

    grid_template: SimGrid
    params: SimParams
    cfg: StepConfig
    initial_velocity: np.ndarray
    initial_pressure: np.ndarray
    step_offset: int = 0
    records: List[StepRecord] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.records)

    @property
    def complete(self) -> bool:
        return all(record.complete for record in self.records)

    def replay(self) -> List[np.ndarray]:
        velocities, _ = rollout(
            self.initial_velocity,
            self.params,
            self.n_steps,
            self.cfg,
            self.grid_template,
            p0=self.initial_pressure,
            step_offset=self.step_offset,
        )
        return velocities


def rollout(
    v0: np.ndarray,
    params: SimParams,
    n_steps: int,
    cfg: StepConfig,
    grid_template: SimGrid,
    p0: Optional[np.ndarray] = None,
    step_offset: int = 0,
) -> Tuple[List[np.ndarray], GradientTape]:
    """Run ``n_steps`` recorded steps from ``v0``; returns [v0, v1, ..., vn] and the tape."""

    if not 0 <= int(n_steps) <= MAX_ROLLOUT_STEPS:
        raise ValueError(f"n_steps must lie in [0, {MAX_ROLLOUT_STEPS}], got {n_steps}")
    velocity = np.asarray(v0, dtype=np.float64).reshape(grid_template.dims + (3,))
    pressure = np.zeros(grid_template.dims) if p0 is None else np.asarray(p0, dtype=np.float64).reshape(grid_template.dims)
    tape = GradientTape(grid_template, params, cfg, velocity.copy(), pressure.copy(), step_offset)

    state = grid_template.with_velocity(velocity)
    state.pressure = pressure.copy()
    velocities = [velocity.copy()]
    for k in range(int(n_steps)):
        record = StepRecord()
        try:
            state = step(state, params, cfg, step_index=step_offset + k, record=record)
        except SimulationDiverged as exc:
            raise SimulationDiverged(k, f"rollout diverged ({exc})") from exc
        tape.records.append(record)
        velocities.append(state.velocity.copy())
    return velocities, tape


def backward(
    tape: GradientTape,
    loss_grads: Sequence[Optional[np.ndarray]],
    grad_mode: str = "recorded_jacobi",
) -> Dict[str, np.ndarray]:
    """Parameter gradients of a loss whose gradient w.r.t. v_{k+1} is ``loss_grads[k]``."""

    if grad_mode not in GRAD_MODES:
        raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
    if not tape.complete:
        raise TapeError("tape contains unrecorded steps")
    if len(loss_grads) != tape.n_steps:
        raise TapeError(f"expected {tape.n_steps} loss gradients, got {len(loss_grads)}")

    n = tape.grid_template.n_cells
    total = zero_param_grads()
    g_velocity = np.zeros((n, 3))
    g_pressure = np.zeros(n)
    for k in reversed(range(tape.n_steps)):
        incoming = g_velocity
        if loss_grads[k] is not None:
            incoming = incoming + np.asarray(loss_grads[k], dtype=np.float64).reshape(n, 3)
        g_velocity, g_pressure, grads = step_vjp(
            tape.records[k], tape.grid_template, tape.params, tape.cfg, incoming, g_pressure, grad_mode
        )
        for name, value in grads.items():
            total[name] = total[name] + value
    return total


# ----------------------------------------------------------------------
# Optimisation
# ----------------------------------------------------------------------
@dataclass
class OptimizerConfig:
    iterations: int = DEFAULT_OPTIMIZER["iterations"]
    lr: float = DEFAULT_OPTIMIZER["lr"]
    lr_final_ratio: float = DEFAULT_OPTIMIZER["lr_final_ratio"]
    beta1: float = DEFAULT_OPTIMIZER["beta1"]
    beta2: float = DEFAULT_OPTIMIZER["beta2"]
    rollout_steps: Optional[int] = DEFAULT_OPTIMIZER["rollout_steps"]
    rollout_constant: float = DEFAULT_OPTIMIZER["rollout_constant"]
    windows_per_iteration: int = DEFAULT_OPTIMIZER["windows_per_iteration"]
    frozen: Tuple[str, ...] = tuple(DEFAULT_OPTIMIZER["frozen"])
    cfl: float = DEFAULT_OPTIMIZER["cfl"]
    grad_mode: str = DEFAULT_OPTIMIZER["grad_mode"]
    stall_timeout_s: float = DEFAULT_OPTIMIZER["stall_timeout_s"]
    time_budget_s: float = DEFAULT_OPTIMIZER["time_budget_s"]

    def __post_init__(self) -> None:
        if int(self.iterations) < 0:
            raise ConfigError("optimizer.iterations", "must be >= 0")
        if not self.lr > 0.0:
            raise ConfigError("optimizer.lr", "must be > 0")
        if not 0.0 < self.lr_final_ratio <= 1.0:
            raise ConfigError("optimizer.lr_final_ratio", "must lie in (0, 1]")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"optimizer.{name}", "must lie in [0, 1)")
        if self.rollout_steps is not None and not 1 <= int(self.rollout_steps) <= MAX_ROLLOUT_STEPS:
            raise ConfigError("optimizer.rollout_steps", f"must lie in [1, {MAX_ROLLOUT_STEPS}]")
        if not self.rollout_constant > 0.0:
            raise ConfigError("optimizer.rollout_constant", "must be > 0")
        if int(self.windows_per_iteration) < 1:
            raise ConfigError("optimizer.windows_per_iteration", "must be >= 1")
        if not self.cfl > 0.0:
            raise ConfigError("optimizer.cfl", "must be > 0")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError("optimizer.grad_mode", f"must be one of {GRAD_MODES}")
        self.iterations = int(self.iterations)
        self.windows_per_iteration = int(self.windows_per_iteration)
        self.frozen = tuple(self.frozen)


@dataclass
class OptimizationResult:
    params: SimParams
    loss_history: List[float]
    best_loss: float
    initial_loss: float
    iterations: int
    rollout_steps: int
    failed: bool = False
    timed_out: bool = False
    message: str = ""
    best_history: List[float] = field(default_factory=list)


def rollout_length_for(guidance: Sequence[np.ndarray], cfg: OptimizerConfig) -> int:
    """Longer rollouts for steady guidance, shorter ones for dynamic guidance."""

    available = len(guidance) - 1
    if available < 1:
        raise PreconditionError("at least two guidance frames are required")
    upper = min(MAX_ROLLOUT_STEPS, available)
    if cfg.rollout_steps is not None:
        return int(min(cfg.rollout_steps, upper))
    speeds = [np.linalg.norm(np.asarray(frame), axis=-1) for frame in guidance]
    score = motion_score(speeds, DEFAULT_BATCH["psnr_cap_db"])
    return batch_size_from_score(score, 1, upper, cfg.rollout_constant)


def _window_starts(frames: int, length: int, count: int) -> List[int]:
    last = frames - 1 - length
    if last <= 0:
        return [0]
    return sorted({int(round(x)) for x in np.linspace(0, last, count)})


def windowed_loss(
    params: SimParams,
    guidance: Sequence[np.ndarray],
    weights: LossWeights,
    step_cfg: StepConfig,
    grid_template: SimGrid,
    length: int,
    starts: Sequence[int],
    grad_mode: str = "recorded_jacobi",
    with_grad: bool = True,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean loss (and parameter gradient) over rollout windows started from guidance frames."""

    total_loss = 0.0
    total_grads = zero_param_grads()
    for start in starts:
        velocities, tape = rollout(guidance[start], params, length, step_cfg, grid_template, step_offset=start)
        loss_grads = []
        for k in range(1, length + 1):
            loss, grad = compute_loss(velocities[k], guidance[start + k], weights, grid_template.cells)
            total_loss += loss
            loss_grads.append(grad)
        if with_grad:
            grads = backward(tape, loss_grads, grad_mode)
            for name, value in grads.items():
                total_grads[name] = total_grads[name] + value
    scale = 1.0 / len(starts)
    return total_loss * scale, {name: value * scale for name, value in total_grads.items()}


def _clamp_dt(u: np.ndarray, norm: ParamNormalization, template: SimParams, v_max: float, dx: float, cfl: float) -> np.ndarray:
    if "dt" not in norm.slices or v_max <= 0.0:
        return u
    params = norm.denormalize(u, template)
    limit = cfl * dx / v_max
    if params.dt <= limit:
        return u
    clamped = u.copy()
    clamped[norm.slices["dt"]] = norm.activations["dt"].inverse(np.array([limit]), "dt")
    return clamped


def optimize(
    guidance: Sequence[np.ndarray],
    init: SimParams,
    weights: LossWeights,
    opt_cfg: OptimizerConfig,
    step_cfg: StepConfig,
    grid_template: SimGrid,
    normalization: Optional[ParamNormalization] = None,
) -> OptimizationResult:
    """Adam on normalised parameters; returns the best parameters seen."""

    if len(guidance) < 2:
        raise PreconditionError("optimize needs at least two guidance frames")
    frames = [np.asarray(frame, dtype=np.float64) for frame in guidance]
    for index, frame in enumerate(frames):
        if frame.shape != grid_template.dims + (3,):
            raise GridError(f"guidance frame {index} has shape {frame.shape}, expected {grid_template.dims + (3,)}")
    v_max = max(float(np.linalg.norm(frame, axis=-1).max(initial=0.0)) for frame in frames)
    courant = v_max * init.dt / grid_template.dx
    if courant > opt_cfg.cfl:
        raise CFLViolation(courant, opt_cfg.cfl)

    norm = normalization or ParamNormalization(frozen=opt_cfg.frozen)
    length = rollout_length_for(frames, opt_cfg)
    starts = _window_starts(len(frames), length, opt_cfg.windows_per_iteration)
    logger.info("[Optimize] rollout length %d over windows %s", length, starts)

    u = norm.normalize(init)
    optimizer = decayed_adam(opt_cfg.lr, opt_cfg.iterations, opt_cfg.lr_final_ratio, opt_cfg.beta1, opt_cfg.beta2)
    adam_state = optimizer.init(u)
    history: List[float] = []
    best_history: List[float] = []
    best_loss = math.inf
    best_params = init
    failed = False
    message = ""
    timed_out = False
    iterations = 0

    watchdog = Watchdog(
        "optimize",
        interval_s=min(1.0, max(0.05, opt_cfg.stall_timeout_s / 4.0)),
        timeout_s=opt_cfg.stall_timeout_s,
        budget_s=opt_cfg.time_budget_s,
    )
    with watchdog:
        for iteration in range(opt_cfg.iterations + 1):
            if watchdog.tripped.is_set():
                timed_out = True
                message = watchdog.reason
                break
            try:
                params = norm.denormalize(u, init)
                loss, grads = windowed_loss(
                    params, frames, weights, step_cfg, grid_template, length, starts, opt_cfg.grad_mode,
                    with_grad=iteration < opt_cfg.iterations,
                )
            except (SimulationDiverged, ConfigError) as exc:
                failed, message = True, str(exc)
                break
            if not math.isfinite(loss):
                failed, message = True, "loss became non-finite"
                break
            history.append(loss)
            if loss < best_loss:
                best_loss, best_params = loss, params
            best_history.append(best_loss)
            watchdog.beat()
            if iteration == opt_cfg.iterations:
                break

            flat = norm.flatten_grads(grads) * norm.activation_jacobian(u)
            if not np.all(np.isfinite(flat)):
                failed, message = True, "gradient became non-finite"
                break
            u, adam_state = adam_step(optimizer, adam_state, u, flat)
            u = _clamp_dt(u, norm, init, v_max, grid_template.dx, opt_cfg.cfl)
            iterations = iteration + 1
            if iteration % 25 == 0:
                logger.info("[Optimize] iter %d loss %.4e best %.4e", iteration, loss, best_loss,
                            extra={"stage": "optimize", "iteration": iteration, "loss": loss})

    if failed:
        logger.error("[Optimize] stopped: %s", message)
    elif timed_out:
        logger.warning("[Optimize] stopped by watchdog: %s", message)
    initial = history[0] if history else math.nan
    return OptimizationResult(
        params=best_params,
        loss_history=history,
        best_loss=best_loss,
        initial_loss=initial,
        iterations=iterations,
        rollout_steps=length,
        failed=failed,
        timed_out=timed_out,
        message=message,
        best_history=best_history,
    )


__all__ = [
    "GradientTape",
    "LossWeights",
    "OptimizationResult",
    "OptimizerConfig",
    "ParamActivation",
    "ParamNormalization",
    "SimParams",
    "backward",
    "compute_loss",
    "denormalize_params",
    "normalize_params",
    "optimize",
    "rollout",
    "rollout_length_for",
    "windowed_loss",
]
