"""One split Navier-Stokes grid step and the per-operation reverse passes."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Mapping, Optional, Set, Tuple

import numpy as np
from scipy import ndimage

from fluid_twin.config import DEFAULT_SIM, DEFAULT_STEP
from fluid_twin.errors import ConfigError, SimulationDiverged
from fluid_twin.grid_core import (
    BoundaryCoefficients,
    BoundaryRecord,
    GridOperators,
    SimGrid,
    STORED_VELOCITY_TYPES,
    boundary_forward,
    boundary_vjp,
    divergence_flat,
    divergence_vjp,
    operators_for,
)
from fluid_twin.pressure import (
    PressureKernel,
    adjoint_pressure_solve,
    jacobi_source_coeff,
    run_recurrence,
    solve_pressure_jacobi,
    stencil_matrix,
    stencil_recurrent_pressure_solve,
)

logger = logging.getLogger(__name__)

CONVECTION_SCHEMES = ("semi_lagrangian", "upwind", "none")
VISCOSITY_SCHEMES = ("explicit",)
SOLVERS = ("jacobi", "stencil_recurrent")
GRAD_MODES = ("recorded_jacobi", "auxiliary_poisson")
PARAM_NAMES = ("v_in", "v_tilde_in", "v_out", "rho", "nu", "b", "d", "g", "dt")
VECTOR_PARAMS = ("v_in", "v_out", "g")

_warned_viscosity: Set[Tuple[float, float, float]] = set()
_warn_lock = threading.Lock()


# ----------------------------------------------------------------------
# Parameters and configuration
# ----------------------------------------------------------------------
@dataclass
class SimParams:
    """Physical parameters of the grid simulation."""

    v_in: np.ndarray = field(default_factory=lambda: np.asarray(DEFAULT_SIM["v_in"], dtype=np.float64))
    v_tilde_in: float = DEFAULT_SIM["v_tilde_in"]
    v_out: np.ndarray = field(default_factory=lambda: np.asarray(DEFAULT_SIM["v_out"], dtype=np.float64))
    rho: float = DEFAULT_SIM["rho"]
    nu: float = DEFAULT_SIM["nu"]
    b: float = DEFAULT_SIM["b"]
    d: float = DEFAULT_SIM["d"]
    g: np.ndarray = field(default_factory=lambda: np.asarray(DEFAULT_SIM["g"], dtype=np.float64))
    dt: float = DEFAULT_SIM["dt"]

    def __post_init__(self) -> None:
        for name in VECTOR_PARAMS:
            value = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if value.shape != (3,):
                raise ConfigError(f"sim.{name}", f"expected 3 components, got {value.size}")
            setattr(self, name, value)
        for name in ("v_tilde_in", "rho", "nu", "b", "d", "dt"):
            setattr(self, name, float(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if not self.rho > 0.0:
            raise ConfigError("sim.rho", "must be > 0")
        if not self.nu >= 0.0:
            raise ConfigError("sim.nu", "must be >= 0")
        if not self.dt > 0.0:
            raise ConfigError("sim.dt", "must be > 0")
        for name in ("b", "d"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"sim.{name}", "must lie in [0, 1]")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigError(f"sim.{name}", "must be finite")

    @property
    def coefficients(self) -> BoundaryCoefficients:
        return BoundaryCoefficients(self.b, self.d)

    def replace(self, **changes: Any) -> "SimParams":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {}
        for name in PARAM_NAMES:
            value = getattr(self, name)
            data[name] = value.tolist() if isinstance(value, np.ndarray) else value
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SimParams":
        unknown = set(data) - set(PARAM_NAMES)
        if unknown:
            raise ConfigError(f"sim.{sorted(unknown)[0]}", "unknown parameter")
        merged = {**DEFAULT_SIM, **data}
        return cls(**{name: merged[name] for name in PARAM_NAMES})


def zero_param_grads() -> Dict[str, np.ndarray]:
    return {name: (np.zeros(3) if name in VECTOR_PARAMS else np.zeros(())) for name in PARAM_NAMES}


def _accumulate(total: Dict[str, np.ndarray], part: Mapping[str, np.ndarray]) -> None:
    for name, value in part.items():
        total[name] = total[name] + value


@dataclass
class StepConfig:
    pressure_iters: int = DEFAULT_STEP["pressure_iters"]
    viscosity_scheme: str = DEFAULT_STEP["viscosity_scheme"]
    convection_scheme: str = DEFAULT_STEP["convection_scheme"]
    solver: str = DEFAULT_STEP["solver"]
    inlet_omega: float = DEFAULT_STEP["inlet_omega"]
    kernel: Optional[PressureKernel] = None

    def __post_init__(self) -> None:
        if int(self.pressure_iters) < 1:
            raise ConfigError("step.pressure_iters", "must be >= 1")
        self.pressure_iters = int(self.pressure_iters)
        if self.viscosity_scheme not in VISCOSITY_SCHEMES:
            raise ConfigError("step.viscosity_scheme", f"must be one of {VISCOSITY_SCHEMES}")
        if self.convection_scheme not in CONVECTION_SCHEMES:
            raise ConfigError("step.convection_scheme", f"must be one of {CONVECTION_SCHEMES}")
        if self.solver not in SOLVERS:
            raise ConfigError("step.solver", f"must be one of {SOLVERS}")
        self.inlet_omega = float(self.inlet_omega)

    def kernel_for(self, dx: float, rho: float, dt: float) -> PressureKernel:
        return self.kernel if self.kernel is not None else PressureKernel.analytic(dx, rho, dt)


# ----------------------------------------------------------------------
# Forward operations on flattened (N, 3) velocity
# ----------------------------------------------------------------------
def _body_force(v: np.ndarray, ops: GridOperators, g: np.ndarray, dt: float) -> np.ndarray:
    out = v.copy()
    out[ops.active] += np.asarray(g, dtype=np.float64) * dt
    return out


def _gradient(p: np.ndarray, ops: GridOperators) -> np.ndarray:
    return np.stack([ops.grad[a] @ p for a in range(3)], axis=1)


def _viscous_term(v: np.ndarray, ops: GridOperators) -> np.ndarray:
    return (ops.viscous @ v.T.ravel()).reshape(3, -1).T


def _upwind_advection(v: np.ndarray, ops: GridOperators) -> np.ndarray:
    """(v . grad) v with differences taken against the local flow direction."""

    adv = np.zeros_like(v)
    positive = v > 0.0
    for component in range(3):
        for axis in range(3):
            back = ops.backward[axis][component] @ v[:, component]
            fwd = ops.forward[axis][component] @ v[:, component]
            adv[:, component] += v[:, axis] * np.where(positive[:, axis], back, fwd)
    return adv


def _semi_lagrangian(v: np.ndarray, ops: GridOperators, dt: float) -> np.ndarray:
    out = v.copy()
    index = np.flatnonzero(ops.active)
    if index.size == 0:
        return out
    coords = np.stack(np.unravel_index(index, ops.shape), axis=0).astype(np.float64)
    coords -= v[index].T * (dt / ops.dx)
    field_3d = v.reshape(ops.shape + (3,))
    for component in range(3):
        out[index, component] = ndimage.map_coordinates(
            field_3d[..., component], coords, order=1, mode="nearest"
        )
    return out


def _convect(v: np.ndarray, ops: GridOperators, dt: float, scheme: str) -> Tuple[np.ndarray, np.ndarray]:
    if scheme == "none":
        return v.copy(), np.zeros_like(v)
    adv = _upwind_advection(v, ops)
    if scheme == "upwind":
        return v - dt * adv, adv
    return _semi_lagrangian(v, ops, dt), adv


def _warn_viscosity_stability(nu: float, dt: float, dx: float) -> None:
    if nu <= 0.0 or dt <= dx * dx / (6.0 * nu):
        return
    key = (nu, dt, dx)
    with _warn_lock:
        if key in _warned_viscosity:
            return
        _warned_viscosity.add(key)
    logger.warning(
        "[Viscosity] dt=%.3g exceeds the explicit bound dx^2/(6 nu)=%.3g", dt, dx * dx / (6.0 * nu)
    )


# ----------------------------------------------------------------------
# Public grid-level operations
# ----------------------------------------------------------------------
def add_body_force(grid: SimGrid, g: np.ndarray, dt: float) -> SimGrid:
    """v += g dt on FLUID/SURFACE cells; boundary-condition cells are left alone."""

    ops = operators_for(grid.cells, grid.dx)
    return grid.with_velocity(_body_force(grid.velocity.reshape(-1, 3), ops, g, dt))


def subtract_pressure_gradient(grid: SimGrid, p: np.ndarray, rho: float, dt: float) -> SimGrid:
    if not rho > 0.0:
        raise ValueError(f"rho must be positive, got {rho}")
    ops = operators_for(grid.cells, grid.dx)
    flat = np.asarray(p, dtype=np.float64).ravel()
    velocity = grid.velocity.reshape(-1, 3) - (dt / rho) * _gradient(flat, ops)
    out = grid.with_velocity(velocity)
    out.pressure = flat.reshape(grid.dims).copy()
    return out


def apply_viscosity(grid: SimGrid, nu: float, dt: float) -> SimGrid:
    """Explicit v += dt nu (lap v + grad div v), the constant-viscosity strain-rate form."""

    _warn_viscosity_stability(nu, dt, grid.dx)
    if nu == 0.0:
        return grid.copy()
    ops = operators_for(grid.cells, grid.dx)
    v = grid.velocity.reshape(-1, 3)
    return grid.with_velocity(v + dt * nu * _viscous_term(v, ops))


def advect_velocity(grid: SimGrid, dt: float, scheme: str = "semi_lagrangian") -> SimGrid:
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if scheme not in CONVECTION_SCHEMES:
        raise ValueError(f"unknown convection scheme {scheme!r}")
    ops = operators_for(grid.cells, grid.dx)
    velocity, _ = _convect(grid.velocity.reshape(-1, 3), ops, dt, scheme)
    return grid.with_velocity(velocity)


def advect_scalar(values: np.ndarray, grid: SimGrid, dt: float) -> np.ndarray:
    """Semi-Lagrangian transport of a cell-centred scalar by the grid velocity."""

    ops = operators_for(grid.cells, grid.dx)
    out = np.array(values, dtype=np.float64)
    index = np.flatnonzero(ops.active)
    if index.size == 0:
        return out
    coords = np.stack(np.unravel_index(index, ops.shape), axis=0).astype(np.float64)
    coords -= grid.velocity.reshape(-1, 3)[index].T * (dt / grid.dx)
    out.reshape(-1)[index] = ndimage.map_coordinates(values, coords, order=1, mode="nearest")
    return out


def cfl_number(grid: SimGrid, dt: float) -> float:
    """max |v| dt / dx over cells that carry a velocity."""

    stored = np.isin(grid.cells, STORED_VELOCITY_TYPES)
    if not stored.any():
        return 0.0
    speed = np.linalg.norm(grid.velocity[stored], axis=1)
    return float(speed.max()) * float(dt) / grid.dx


def _solve_pressure_flat(
    div: np.ndarray, ops: GridOperators, params: SimParams, cfg: StepConfig, p0: np.ndarray
) -> Tuple[np.ndarray, float, Any]:
    if cfg.solver == "jacobi":
        matrix = ops.jacobi
        coeff = jacobi_source_coeff(params.rho, params.dt, ops.dx)
    else:
        kernel = cfg.kernel_for(ops.dx, params.rho, params.dt)
        matrix = stencil_matrix(kernel, ops)
        coeff = kernel.effective_source(params.rho, params.dt)
    return run_recurrence(matrix, coeff, div, cfg.pressure_iters, p0), coeff, matrix


def pressure_projection(grid: SimGrid, rho: float, dt: float, cfg: Optional[StepConfig] = None) -> SimGrid:
    """Divergence, pressure solve (warm-started from ``grid.pressure``) and gradient subtraction."""

    cfg = cfg or StepConfig()
    ops = operators_for(grid.cells, grid.dx)
    div = divergence_flat(grid.velocity, ops)
    if cfg.solver == "jacobi":
        p = solve_pressure_jacobi(div, grid.cells, rho, dt, grid.dx, cfg.pressure_iters, grid.pressure)
    else:
        kernel = cfg.kernel_for(grid.dx, rho, dt)
        p = stencil_recurrent_pressure_solve(
            div, grid.cells, kernel, cfg.pressure_iters, grid.pressure, rho=rho, dt=dt, dx=grid.dx
        )
    out = subtract_pressure_gradient(grid, p, rho, dt)
    out.divergence = div.reshape(grid.dims)
    return out


# ----------------------------------------------------------------------
# Full step with optional recording
# ----------------------------------------------------------------------
@dataclass
class StepRecord:
    """Intermediates of one step, in flattened (N, 3) / (N,) layout."""

    step_index: int = 0
    bc_in: Optional[BoundaryRecord] = None
    after_force: Optional[np.ndarray] = None
    div: Optional[np.ndarray] = None
    p0: Optional[np.ndarray] = None
    pressure: Optional[np.ndarray] = None
    pressure_grad: Optional[np.ndarray] = None
    viscous: Optional[np.ndarray] = None
    before_convection: Optional[np.ndarray] = None
    advection: Optional[np.ndarray] = None
    bc_out: Optional[BoundaryRecord] = None
    output: Optional[np.ndarray] = None
    source_coeff: float = 0.0
    matrix: Any = None
    complete: bool = False


def step(
    grid: SimGrid,
    params: SimParams,
    cfg: StepConfig,
    step_index: int = 0,
    record: Optional[StepRecord] = None,
) -> SimGrid:
    """BC, body force, divergence, pressure, gradient subtraction, viscosity, convection, BC."""

    ops = operators_for(grid.cells, grid.dx)
    coeffs = params.coefficients
    dt = params.dt
    _warn_viscosity_stability(params.nu, dt, grid.dx)

    v0 = grid.velocity.reshape(-1, 3)
    v1, bc_in = boundary_forward(
        v0, ops, coeffs, params.v_in, params.v_tilde_in, params.v_out, step_index, cfg.inlet_omega, grid.inlet
    )
    v2 = _body_force(v1, ops, params.g, dt)
    div = divergence_flat(v2, ops)
    p0 = grid.pressure.ravel().copy()
    p, coeff, matrix = _solve_pressure_flat(div, ops, params, cfg, p0)
    gp = _gradient(p, ops)
    v3 = v2 - (dt / params.rho) * gp
    visc = _viscous_term(v3, ops)
    v4 = v3 + dt * params.nu * visc
    v5, adv = _convect(v4, ops, dt, cfg.convection_scheme)
    v6, bc_out = boundary_forward(
        v5, ops, coeffs, params.v_in, params.v_tilde_in, params.v_out, step_index, cfg.inlet_omega, grid.inlet
    )

    if not (np.all(np.isfinite(v6)) and np.all(np.isfinite(p))):
        raise SimulationDiverged(step_index)

    if record is not None:
        record.step_index = step_index
        record.bc_in = bc_in
        record.after_force = v2
        record.div = div
        record.p0 = p0
        record.pressure = p
        record.pressure_grad = gp
        record.viscous = visc
        record.before_convection = v4
        record.advection = adv
        record.bc_out = bc_out
        record.output = v6
        record.source_coeff = coeff
        record.matrix = matrix
        record.complete = True

    out = grid.copy()
    out.velocity = v6.reshape(grid.dims + (3,))
    out.pressure = p.reshape(grid.dims)
    out.divergence = div.reshape(grid.dims)
    return out


# ----------------------------------------------------------------------
# Reverse passes
# ----------------------------------------------------------------------
def upwind_advection_vjp(
    grad_out: np.ndarray, v: np.ndarray, adv: np.ndarray, ops: GridOperators, dt: float
) -> Tuple[np.ndarray, float]:
    """Reverse of v - dt (v . grad) v with frozen upwind directions."""

    g_v = grad_out.copy()
    h = -dt * grad_out
    positive = v > 0.0
    for component in range(3):
        for axis in range(3):
            back_op = ops.backward[axis][component]
            fwd_op = ops.forward[axis][component]
            pos = positive[:, axis]
            upwind = np.where(pos, back_op @ v[:, component], fwd_op @ v[:, component])
            g_v[:, axis] += h[:, component] * upwind
            weighted = v[:, axis] * h[:, component]
            g_v[:, component] += back_op.T @ (weighted * pos) + fwd_op.T @ (weighted * ~pos)
    return g_v, -float(np.sum(grad_out * adv))


def pressure_vjp(
    grad_p: np.ndarray,
    record: StepRecord,
    ops: GridOperators,
    iters: int,
    grad_mode: str,
    symmetric: bool,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Reverse of p <- M p + c div; returns (grad_div, grad_p0, grad_coeff)."""

    matrix = record.matrix
    if grad_mode == "recorded_jacobi":
        lam = grad_p.copy()
        acc = np.zeros_like(lam)
        for _ in range(iters):
            acc += lam
            lam = matrix.T @ lam
        grad_p0 = lam
    elif grad_mode == "auxiliary_poisson":
        acc = adjoint_pressure_solve(matrix, grad_p, ops.active, symmetric=symmetric)
        grad_p0 = np.zeros_like(grad_p)
    else:
        raise ValueError(f"unknown grad_mode {grad_mode!r}")
    return record.source_coeff * acc, grad_p0, float(acc @ record.div)


def step_vjp(
    record: StepRecord,
    grid: SimGrid,
    params: SimParams,
    cfg: StepConfig,
    grad_velocity: np.ndarray,
    grad_pressure: Optional[np.ndarray] = None,
    grad_mode: str = "recorded_jacobi",
) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """Pull output gradients back through one recorded step.

    Returns the gradient w.r.t. the input velocity (N, 3), the input (warm-start)
    pressure (N,) and every SimParams component.
    """

    ops = operators_for(grid.cells, grid.dx)
    coeffs = params.coefficients
    dt, rho, nu = params.dt, params.rho, params.nu
    grads = zero_param_grads()

    g, part = boundary_vjp(grad_velocity.reshape(-1, 3), record.bc_out, ops, coeffs)
    _accumulate(grads, part)

    if cfg.convection_scheme != "none":
        g, g_dt = upwind_advection_vjp(g, record.before_convection, record.advection, ops, dt)
        grads["dt"] = grads["dt"] + g_dt

    if record.viscous is not None:
        visc_dot = float(np.sum(g * record.viscous))
        grads["nu"] = grads["nu"] + dt * visc_dot
        grads["dt"] = grads["dt"] + nu * visc_dot
        g = g + dt * nu * (ops.viscous.T @ g.T.ravel()).reshape(3, -1).T

    grad_dot = float(np.sum(g * record.pressure_grad))
    grads["rho"] = grads["rho"] + dt / rho**2 * grad_dot
    grads["dt"] = grads["dt"] - grad_dot / rho
    g_p = -(dt / rho) * sum(ops.grad[a].T @ g[:, a] for a in range(3))
    if grad_pressure is not None:
        g_p = g_p + grad_pressure.ravel()

    g_div, g_p0, g_coeff = pressure_vjp(
        g_p, record, ops, cfg.pressure_iters, grad_mode, symmetric=cfg.solver == "jacobi"
    )
    grads["rho"] = grads["rho"] + g_coeff * record.source_coeff / rho
    grads["dt"] = grads["dt"] - g_coeff * record.source_coeff / dt
    g = g + divergence_vjp(g_div, ops)

    active_grad = g[ops.active]
    grads["g"] = grads["g"] + dt * active_grad.sum(axis=0)
    grads["dt"] = grads["dt"] + float(np.sum(active_grad @ params.g))

    g, part = boundary_vjp(g, record.bc_in, ops, coeffs)
    _accumulate(grads, part)
    return g, g_p0, grads


__all__ = [
    "CONVECTION_SCHEMES",
    "GRAD_MODES",
    "PARAM_NAMES",
    "PressureKernel",
    "SimParams",
    "StepConfig",
    "StepRecord",
    "add_body_force",
    "advect_scalar",
    "advect_velocity",
    "apply_viscosity",
    "cfl_number",
    "pressure_projection",
    "pressure_vjp",
    "solve_pressure_jacobi",
    "stencil_recurrent_pressure_solve",
    "step",
    "step_vjp",
    "subtract_pressure_gradient",
    "upwind_advection_vjp",
    "zero_param_grads",
]
