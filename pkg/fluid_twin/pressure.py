"""Pressure Poisson solvers: reference Jacobi, stencil-recurrent, and kernel fitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import product
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from fluid_twin.errors import GridError
from fluid_twin.grid_core import GridOperators, active_mask, operators_for
from fluid_twin.optim import adam_step, decayed_adam

logger = logging.getLogger(__name__)

STENCIL_OFFSETS: Tuple[Tuple[int, int, int], ...] = tuple(product((-1, 0, 1), repeat=3))  # type: ignore[assignment]
FACE_INDICES = tuple(
    i for i, offset in enumerate(STENCIL_OFFSETS) if sum(abs(o) for o in offset) == 1
)


def _check_positive(rho: float, dt: float) -> None:
    if not rho > 0.0:
        raise ValueError(f"rho must be positive, got {rho}")
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")


def jacobi_source_coeff(rho: float, dt: float, dx: float) -> float:
    return -(dx * dx) * rho / (6.0 * dt)


@dataclass
class PressureKernel:
    """A 3x3x3 recurrent stencil plus the coupling of divergence into pressure.

    ``source_coeff`` was fitted for the density/time-step ratio
    ``reference_ratio``; at solve time it scales with ``(rho / dt) / reference_ratio``.
    """

    stencil: np.ndarray
    source_coeff: float
    reference_ratio: float = 1.0
    final_loss: Optional[float] = None

    def __post_init__(self) -> None:
        self.stencil = np.asarray(self.stencil, dtype=np.float64)
        if self.stencil.shape != (3, 3, 3):
            raise GridError(f"pressure kernel must be 3x3x3, got {self.stencil.shape}")
        if not np.all(np.isfinite(self.stencil)) or not np.isfinite(self.source_coeff):
            raise GridError("pressure kernel weights must be finite")
        if not self.reference_ratio > 0.0:
            raise GridError(f"reference_ratio must be positive, got {self.reference_ratio}")
        self.source_coeff = float(self.source_coeff)

    @classmethod
    def analytic(cls, dx: float, rho: float, dt: float) -> "PressureKernel":
        """The kernel that reproduces one Jacobi sweep exactly."""

        stencil = np.zeros((3, 3, 3))
        for index in FACE_INDICES:
            stencil[tuple(o + 1 for o in STENCIL_OFFSETS[index])] = 1.0 / 6.0
        return cls(stencil=stencil, source_coeff=jacobi_source_coeff(rho, dt, dx), reference_ratio=rho / dt)

    @classmethod
    def zeros(cls) -> "PressureKernel":
        return cls(stencil=np.zeros((3, 3, 3)), source_coeff=0.0)

    def effective_source(self, rho: Optional[float] = None, dt: Optional[float] = None) -> float:
        if rho is None or dt is None:
            return self.source_coeff
        return self.source_coeff * (rho / dt) / self.reference_ratio

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stencil": self.stencil.tolist(),
            "source_coeff": self.source_coeff,
            "reference_ratio": self.reference_ratio,
            "final_loss": self.final_loss,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PressureKernel":
        return cls(
            stencil=np.asarray(data["stencil"], dtype=np.float64),
            source_coeff=float(data["source_coeff"]),
            reference_ratio=float(data.get("reference_ratio", 1.0)),
            final_loss=data.get("final_loss"),
        )


def stencil_matrix(kernel: PressureKernel, ops: GridOperators) -> sparse.csr_matrix:
    matrix = sparse.csr_matrix((ops.n, ops.n))
    for weight, gather in zip(kernel.stencil.ravel(), ops.stencil_gathers):
        if weight != 0.0:
            matrix = matrix + weight * gather
    return sparse.csr_matrix(matrix)


def run_recurrence(
    matrix: sparse.spmatrix,
    coeff: float,
    div: np.ndarray,
    iters: int,
    p0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """p <- M p + coeff * div, ``iters`` times, on flattened fields."""

    source = coeff * div
    p = np.zeros_like(source) if p0 is None else np.array(p0, dtype=np.float64).ravel()
    for _ in range(int(iters)):
        p = matrix @ p + source
    return p


def solve_pressure_jacobi(
    div: np.ndarray,
    cells: np.ndarray,
    rho: float,
    dt: float,
    dx: float,
    iters: int,
    p0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Jacobi sweeps of the 6-neighbour pressure Poisson update.

    Neighbours that are SOLID, INLET, OUTLET or outside the domain mirror the
    centre value (zero gradient); EMPTY neighbours hold p = 0.
    """

    _check_positive(rho, dt)
    ops = operators_for(cells, dx)
    source = np.asarray(div, dtype=np.float64).ravel() * ops.active
    p = run_recurrence(ops.jacobi, jacobi_source_coeff(rho, dt, dx), source, iters, p0)
    return p.reshape(cells.shape)


def stencil_recurrent_pressure_solve(
    div: np.ndarray,
    cells: np.ndarray,
    kernel: PressureKernel,
    iters: int,
    p0: Optional[np.ndarray] = None,
    rho: Optional[float] = None,
    dt: Optional[float] = None,
    dx: float = 1.0,
) -> np.ndarray:
    """Apply the 3x3x3 kernel recurrently with the Jacobi boundary masking."""

    if not isinstance(kernel, PressureKernel):
        raise GridError("kernel must be a PressureKernel")
    ops = operators_for(cells, dx)
    source = np.asarray(div, dtype=np.float64).ravel() * ops.active
    matrix = stencil_matrix(kernel, ops)
    p = run_recurrence(matrix, kernel.effective_source(rho, dt), source, iters, p0)
    return p.reshape(cells.shape)


def poisson_residual(p: np.ndarray, div: np.ndarray, cells: np.ndarray, rho: float, dt: float, dx: float) -> float:
    """Max-norm of the fixed-point residual of the Jacobi update."""

    ops = operators_for(cells, dx)
    flat = np.asarray(p, dtype=np.float64).ravel()
    source = jacobi_source_coeff(rho, dt, dx) * np.asarray(div, dtype=np.float64).ravel() * ops.active
    residual = (ops.jacobi @ flat + source - flat) * ops.active
    return float(np.abs(residual).max()) if residual.size else 0.0


def adjoint_pressure_solve(
    matrix: sparse.spmatrix,
    rhs: np.ndarray,
    active: np.ndarray,
    symmetric: bool,
    rtol: float = 1e-10,
    maxiter: Optional[int] = None,
) -> np.ndarray:
    """Solve (I - M^T) x = rhs on active cells: the converged-pressure adjoint."""

    index = np.flatnonzero(active)
    solution = np.array(rhs, dtype=np.float64)
    if index.size == 0:
        return solution
    sub = sparse.csr_matrix(matrix)[index][:, index]
    system = sparse.identity(index.size, format="csr") - sub.T
    local_rhs = solution[index]
    if not np.any(local_rhs):
        solution[index] = 0.0
        return solution
    if symmetric:
        x, info = splinalg.cg(system, local_rhs, rtol=rtol, atol=0.0, maxiter=maxiter)
    else:
        x, info = splinalg.gmres(system, local_rhs, rtol=rtol, atol=0.0, maxiter=maxiter)
    if info != 0:
        logger.warning("[Pressure] Adjoint solve stopped early (info=%s)", info)
    solution[index] = x
    return solution


# ----------------------------------------------------------------------
# Kernel fitting
# ----------------------------------------------------------------------
@dataclass
class PressureSample:
    divergence: np.ndarray
    pressure: np.ndarray
    cells: np.ndarray
    iters: int
    dx: float = 1.0
    rho_over_dt: float = 1.0


def generate_pressure_samples(
    cells: np.ndarray,
    count: int,
    iters: int,
    rho: float,
    dt: float,
    dx: float,
    seed: int = 0,
) -> List[PressureSample]:
    """Random-divergence inputs paired with their Jacobi pressure."""

    rng = np.random.default_rng(seed)
    active = active_mask(cells)
    samples = []
    for _ in range(count):
        div = rng.standard_normal(cells.shape) * active
        pressure = solve_pressure_jacobi(div, cells, rho, dt, dx, iters)
        samples.append(PressureSample(div, pressure, cells, iters, dx, rho / dt))
    return samples


@dataclass
class _FitData:
    gathers: sparse.csr_matrix
    div: np.ndarray
    target: np.ndarray
    iters: int
    count: int
    history: List[np.ndarray] = field(default_factory=list)


def _fit_forward(weights: np.ndarray, coeff: float, data: _FitData) -> np.ndarray:
    n = data.div.shape[0]
    p = np.zeros_like(data.div)
    data.history = []
    for _ in range(data.iters):
        data.history.append(p)
        gathered = (data.gathers @ p).reshape(27, n, -1)
        p = np.tensordot(weights, gathered, axes=1) + coeff * data.div
    return p


def _fit_backward(weights: np.ndarray, residual: np.ndarray, data: _FitData) -> Tuple[np.ndarray, float]:
    n = data.div.shape[0]
    lam = 2.0 * residual / data.count
    grad_w = np.zeros(27)
    grad_c = 0.0
    for p in reversed(data.history):
        grad_c += float(np.sum(lam * data.div))
        gathered = (data.gathers @ p).reshape(27, n, -1)
        grad_w += np.einsum("ons,ns->o", gathered, lam)
        lam = data.gathers.T @ (weights[:, None, None] * lam[None]).reshape(27 * n, -1)
    return grad_w, grad_c


def fit_pressure_kernel(
    samples: Sequence[PressureSample],
    epochs: int,
    lr: float,
    init: Optional[PressureKernel] = None,
    lr_final_ratio: float = 1e-2,
) -> PressureKernel:
    """Fit stencil weights and source coupling to Jacobi pressure pairs.

    The recurrent solver runs the same number of iterations as the samples and
    the mean squared error is minimised with adaptive-moment gradient descent.
    Fields are rescaled to unit RMS before fitting.
    """

    if not samples:
        raise ValueError("fit_pressure_kernel needs at least one sample")
    first = samples[0]
    for sample in samples[1:]:
        if sample.cells.shape != first.cells.shape or not np.array_equal(sample.cells, first.cells):
            raise GridError("all pressure samples must share one grid geometry")
        if sample.iters != first.iters:
            raise GridError("all pressure samples must use the same iteration count")

    ops = operators_for(first.cells, first.dx)
    div = np.stack([np.asarray(s.divergence, dtype=np.float64).ravel() * ops.active for s in samples], axis=1)
    target = np.stack([np.asarray(s.pressure, dtype=np.float64).ravel() for s in samples], axis=1)
    active_count = max(1, int(ops.active.sum()) * len(samples))

    div_rms = float(np.sqrt(np.sum(div**2) / active_count)) or 1.0
    target_rms = float(np.sqrt(np.sum(target**2) / active_count)) or 1.0
    data = _FitData(
        gathers=sparse.vstack(ops.stencil_gathers, format="csr"),
        div=div / div_rms,
        target=target / target_rms,
        iters=int(first.iters),
        count=active_count,
    )

    if init is not None:
        weights = init.stencil.ravel().copy()
        coeff = init.effective_source() * div_rms / target_rms
    else:
        weights = np.zeros(27)
        denom = float(np.sum(data.div * data.div))
        coeff = float(np.sum(data.target * data.div)) / denom if denom > 0.0 else 0.0

    epochs = max(0, int(epochs))
    optimizer = decayed_adam(lr, epochs, lr_final_ratio)
    theta = np.concatenate([weights, [coeff]])
    state = optimizer.init(theta)
    loss = 0.0
    for epoch in range(epochs):
        output = _fit_forward(weights, coeff, data)
        residual = output - data.target
        loss = float(np.sum(residual**2)) / data.count
        grad_w, grad_c = _fit_backward(weights, residual, data)
        theta, state = adam_step(optimizer, state, theta, np.concatenate([grad_w, [grad_c]]))
        weights, coeff = theta[:27], float(theta[27])
        if epoch % 50 == 0:
            logger.debug("[KernelFit] epoch %d loss %.3e", epoch, loss)

    output = _fit_forward(weights, coeff, data)
    loss = float(np.sum((output - data.target) ** 2)) / data.count
    logger.info("[KernelFit] %d epochs, final loss %.3e", epochs, loss)
    return PressureKernel(
        stencil=weights.reshape(3, 3, 3),
        source_coeff=coeff * target_rms / div_rms,
        reference_ratio=first.rho_over_dt,
        final_loss=loss,
    )


__all__ = [
    "FACE_INDICES",
    "PressureKernel",
    "PressureSample",
    "STENCIL_OFFSETS",
    "adjoint_pressure_solve",
    "fit_pressure_kernel",
    "generate_pressure_samples",
    "jacobi_source_coeff",
    "poisson_residual",
    "run_recurrence",
    "solve_pressure_jacobi",
    "stencil_matrix",
    "stencil_recurrent_pressure_solve",
]
