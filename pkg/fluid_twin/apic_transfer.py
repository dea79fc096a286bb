"""Affine particle-in-cell transfers, particle advection and covariance deformation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from itertools import product
from typing import TYPE_CHECKING, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from fluid_twin.config import PARTICLES_PER_CELL
from fluid_twin.errors import ParticleBoundsError, SimulationDiverged
from fluid_twin.grid_core import CellType, SimGrid

if TYPE_CHECKING:
    from fluid_twin.pointcloud_prep import GaussianCloud

logger = logging.getLogger(__name__)

KERNEL_PADDING_CELLS = 1.5
_NODE_OFFSETS = tuple(product(range(3), repeat=3))


@dataclass
class ParticleSet:
    """Lagrangian fluid particles; every array shares the leading length N."""

    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    affine: np.ndarray
    deformation: np.ndarray
    covariance: np.ndarray
    rest_covariance: np.ndarray
    opacity: np.ndarray
    features: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.positions)
        for item in fields(self):
            value = np.asarray(getattr(self, item.name), dtype=np.float64)
            if len(value) != n:
                raise ValueError(f"particle array {item.name} has length {len(value)}, expected {n}")
            setattr(self, item.name, value)
        if n and not np.all(self.masses > 0.0):
            raise ValueError("particle masses must be positive")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def create(
        cls,
        positions: np.ndarray,
        velocities: Optional[np.ndarray] = None,
        masses: Optional[np.ndarray] = None,
        covariance: Optional[np.ndarray] = None,
        opacity: Optional[np.ndarray] = None,
        features: Optional[np.ndarray] = None,
    ) -> "ParticleSet":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        eye = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        cov = eye * 1e-4 if covariance is None else np.asarray(covariance, dtype=np.float64)
        return cls(
            positions=positions,
            velocities=np.zeros((n, 3)) if velocities is None else velocities,
            masses=np.ones(n) if masses is None else masses,
            affine=np.zeros((n, 3, 3)),
            deformation=eye,
            covariance=cov.copy(),
            rest_covariance=cov.copy(),
            opacity=np.ones(n) if opacity is None else opacity,
            features=np.zeros((n, 3)) if features is None else features,
        )

    def copy(self) -> "ParticleSet":
        return ParticleSet(**{item.name: getattr(self, item.name).copy() for item in fields(self)})

    def subset(self, keep: np.ndarray) -> "ParticleSet":
        return ParticleSet(**{item.name: getattr(self, item.name)[keep] for item in fields(self)})

    def concatenate(self, other: "ParticleSet") -> "ParticleSet":
        return ParticleSet(
            **{
                item.name: np.concatenate([getattr(self, item.name), getattr(other, item.name)])
                for item in fields(self)
            }
        )


# ----------------------------------------------------------------------
# Quadratic B-spline kernel
# ----------------------------------------------------------------------
def _check_bounds(positions: np.ndarray, grid: SimGrid) -> None:
    low, high = grid.bounds()
    pad = KERNEL_PADDING_CELLS * grid.dx
    outside = np.any((positions < low - pad) | (positions > high + pad), axis=1)
    if outside.any():
        first = int(np.flatnonzero(outside)[0])
        raise ParticleBoundsError(
            f"{int(outside.sum())} particle(s) outside the padded grid, first at {positions[first].tolist()}"
        )


def kernel_weights(positions: np.ndarray, grid: SimGrid) -> Tuple[np.ndarray, np.ndarray]:
    """Base node index (N, 3) and per-axis weights (N, 3 axes, 3 nodes)."""

    local = (positions - grid.origin) / grid.dx - 0.5
    base = np.floor(local - 0.5).astype(np.int64)
    fx = local - base
    weights = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], axis=-1)
    return base, weights


def _nodes(base: np.ndarray, weights: np.ndarray, grid: SimGrid):
    dims = np.asarray(grid.dims)
    for i, j, k in _NODE_OFFSETS:
        node = base + np.array([i, j, k])
        w = weights[:, 0, i] * weights[:, 1, j] * weights[:, 2, k]
        inside = np.all((node >= 0) & (node < dims), axis=1)
        centre = grid.origin + (node + 0.5) * grid.dx
        yield node, w, inside, centre


def scatter_to_grid(
    particles: ParticleSet, grid: SimGrid, include_affine: bool = True
) -> Tuple[np.ndarray, np.ndarray]:
    """Mass-weighted momentum (dims + (3,)) and mass (dims) accumulated on the grid."""

    momentum = np.zeros(grid.dims + (3,))
    mass = np.zeros(grid.dims)
    if len(particles) == 0:
        return momentum, mass
    _check_bounds(particles.positions, grid)
    base, weights = kernel_weights(particles.positions, grid)
    for node, w, inside, centre in _nodes(base, weights, grid):
        if not inside.any():
            continue
        mw = particles.masses * w
        contribution = particles.velocities.copy()
        if include_affine:
            contribution += np.einsum("nij,nj->ni", particles.affine, centre - particles.positions)
        index = tuple(node[inside].T)
        np.add.at(momentum, index, (mw[:, None] * contribution)[inside])
        np.add.at(mass, index, mw[inside])
    return momentum, mass


def p2g(particles: ParticleSet, grid: SimGrid, include_affine: bool = True) -> SimGrid:
    """Particle-to-grid transfer; cells that receive no mass get zero velocity."""

    momentum, mass = scatter_to_grid(particles, grid, include_affine)
    velocity = np.zeros_like(momentum)
    covered = mass > 0.0
    velocity[covered] = momentum[covered] / mass[covered][:, None]
    return grid.with_velocity(velocity)


def g2p(grid: SimGrid, particles: ParticleSet) -> ParticleSet:
    """Grid-to-particle transfer of velocity and the affine velocity moment."""

    out = particles.copy()
    n = len(particles)
    if n == 0:
        return out
    _check_bounds(particles.positions, grid)
    base, weights = kernel_weights(particles.positions, grid)
    velocity = np.zeros((n, 3))
    moment = np.zeros((n, 3, 3))
    total = np.zeros(n)
    for node, w, inside, centre in _nodes(base, weights, grid):
        w = np.where(inside, w, 0.0)
        clipped = np.clip(node, 0, np.asarray(grid.dims) - 1)
        v_node = grid.velocity[clipped[:, 0], clipped[:, 1], clipped[:, 2]]
        velocity += w[:, None] * v_node
        moment += w[:, None, None] * np.einsum("ni,nj->nij", v_node, centre - particles.positions)
        total += w
    total = np.where(total > 0.0, total, 1.0)
    out.velocities = velocity / total[:, None]
    out.affine = (4.0 / grid.dx**2) * moment / total[:, None, None]
    return out


# ----------------------------------------------------------------------
# Advection and inlet seeding
# ----------------------------------------------------------------------
class InletSeeder:
    """Keep INLET cells populated with a target particle count."""

    def __init__(
        self,
        reference: ParticleSet,
        mass: float,
        per_cell: int = PARTICLES_PER_CELL,
        seed: int = 0,
    ):
        self.per_cell = int(per_cell)
        self.mass = float(mass)
        self.rng = np.random.default_rng(seed)
        self._tree = cKDTree(reference.positions) if len(reference) else None
        self._features = reference.features.copy()
        self._opacity = reference.opacity.copy()
        self.feature_width = reference.features.shape[1] if reference.features.ndim == 2 else 0

    def seed(self, particles: ParticleSet, grid: SimGrid, v_in: Sequence[float]) -> ParticleSet:
        inlet = np.argwhere(grid.cells == CellType.INLET)
        if inlet.size == 0:
            return particles
        counts = np.zeros(grid.dims, dtype=np.int64)
        if len(particles):
            index = np.floor((particles.positions - grid.origin) / grid.dx).astype(np.int64)
            inside = np.all((index >= 0) & (index < np.asarray(grid.dims)), axis=1)
            np.add.at(counts, tuple(index[inside].T), 1)
        missing = np.maximum(self.per_cell - counts[tuple(inlet.T)], 0)
        total = int(missing.sum())
        if total == 0:
            return particles

        corners = grid.origin + np.repeat(inlet, missing, axis=0) * grid.dx
        positions = corners + self.rng.random((total, 3)) * grid.dx
        radius = grid.dx / 4.0
        covariance = np.broadcast_to(np.eye(3) * radius**2, (total, 3, 3)).copy()
        if self._tree is not None:
            _, nearest = self._tree.query(positions)
            features = self._features[nearest]
            opacity = self._opacity[nearest]
        else:
            features = np.zeros((total, max(self.feature_width, 3)))
            opacity = np.ones(total)
        seeded = ParticleSet.create(
            positions,
            velocities=np.broadcast_to(np.asarray(v_in, dtype=np.float64), (total, 3)).copy(),
            masses=np.full(total, self.mass),
            covariance=covariance,
            opacity=opacity,
            features=features,
        )
        logger.debug("[Seeder] added %d particles at %d inlet cells", total, int((missing > 0).sum()))
        return particles.concatenate(seeded)


def advect_particles(
    particles: ParticleSet,
    dt: float,
    grid: Optional[SimGrid] = None,
    seeder: Optional[InletSeeder] = None,
    v_in: Optional[Sequence[float]] = None,
) -> ParticleSet:
    """Forward-Euler move, then outlet removal, clamping and inlet seeding."""

    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    out = particles.copy()
    out.positions = out.positions + out.velocities * dt
    if grid is None:
        return out

    low, high = grid.bounds()
    if grid.outlet is not None:
        axis, side = grid.outlet.axis, grid.outlet.side
        coord = out.positions[:, axis]
        gone = coord > high[axis] if side > 0 else coord < low[axis]
        if gone.any():
            logger.debug("[Advect] removed %d particles past the outlet", int(gone.sum()))
            out = out.subset(~gone)

    margin = 1e-6 * grid.dx
    out.positions = np.clip(out.positions, low + margin, high - margin)
    if seeder is not None:
        out = seeder.seed(out, grid, v_in if v_in is not None else np.zeros(3))
    return out


def update_deformation(particles: ParticleSet, dt: float, step_index: int = 0) -> ParticleSet:
    """F <- (I + dt C) F and A = F A0 F^T, re-symmetrised."""

    if not np.all(np.isfinite(particles.affine)):
        raise SimulationDiverged(step_index, "non-finite affine matrix")
    out = particles.copy()
    update = np.eye(3) + dt * particles.affine
    out.deformation = np.einsum("nij,njk->nik", update, particles.deformation)
    cov = np.einsum("nij,njk,nlk->nil", out.deformation, particles.rest_covariance, out.deformation)
    out.covariance = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
    return out


# ----------------------------------------------------------------------
# Helpers
# ----------------------------------------------------------------------
def particles_from_cloud(
    cloud: "GaussianCloud", rho: float, dx: float, particles_per_cell: int = PARTICLES_PER_CELL
) -> ParticleSet:
    mass = rho * dx**3 / particles_per_cell
    return ParticleSet.create(
        cloud.positions,
        masses=np.full(len(cloud), mass),
        covariance=cloud.covariance,
        opacity=cloud.opacity,
        features=cloud.features,
    )


def momentum_of(particles: ParticleSet) -> np.ndarray:
    return (particles.masses[:, None] * particles.velocities).sum(axis=0)


__all__ = [
    "InletSeeder",
    "KERNEL_PADDING_CELLS",
    "ParticleSet",
    "advect_particles",
    "g2p",
    "kernel_weights",
    "momentum_of",
    "p2g",
    "particles_from_cloud",
    "scatter_to_grid",
    "update_deformation",
]
