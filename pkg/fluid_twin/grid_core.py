"""Collocated 3D simulation grid, cell typing and finite-difference operators."""

from __future__ import annotations

import hashlib
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import IntEnum
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, sparse

from fluid_twin.errors import GridError

logger = logging.getLogger(__name__)

_OUTSIDE = -1
_OPERATOR_CACHE_SIZE = 8


class CellType(IntEnum):
    EMPTY = 0
    FLUID = 1
    SURFACE = 2
    SOLID = 3
    INLET = 4
    OUTLET = 5


ACTIVE_TYPES = (int(CellType.FLUID), int(CellType.SURFACE))
STORED_VELOCITY_TYPES = tuple(int(t) for t in (CellType.FLUID, CellType.SURFACE, CellType.INLET, CellType.OUTLET))


@dataclass(frozen=True)
class PlaneSpec:
    """An axis-aligned boundary plane: ``axis`` 0..2, ``side`` -1 (low) or +1 (high)."""

    axis: int
    side: int

    def __post_init__(self) -> None:
        if self.axis not in (0, 1, 2):
            raise GridError(f"plane axis must be 0, 1 or 2, got {self.axis}")
        if self.side not in (-1, 1):
            raise GridError(f"plane side must be -1 or +1, got {self.side}")

    @classmethod
    def parse(cls, text: str) -> "PlaneSpec":
        """Parse ``"-x"``, ``"+y"`` style plane names."""

        cleaned = str(text).strip().lower()
        if len(cleaned) != 2 or cleaned[0] not in "+-" or cleaned[1] not in "xyz":
            raise GridError(f"cannot parse plane spec {text!r}; expected e.g. '-x' or '+z'")
        return cls(axis="xyz".index(cleaned[1]), side=1 if cleaned[0] == "+" else -1)

    @property
    def inward_normal(self) -> np.ndarray:
        normal = np.zeros(3)
        normal[self.axis] = -float(self.side)
        return normal

    def label(self) -> str:
        return ("+" if self.side > 0 else "-") + "xyz"[self.axis]

    def mask(self, dims: Sequence[int]) -> np.ndarray:
        """Boolean field selecting the boundary layer of cells on this plane."""

        plane = np.zeros(tuple(dims), dtype=bool)
        index = [slice(None)] * 3
        index[self.axis] = 0 if self.side < 0 else dims[self.axis] - 1
        plane[tuple(index)] = True
        return plane


@dataclass(frozen=True)
class BoundaryCoefficients:
    bounce: float = 0.0
    damp: float = 0.0

    def __post_init__(self) -> None:
        for name, value in (("bounce", self.bounce), ("damp", self.damp)):
            if not 0.0 <= float(value) <= 1.0:
                raise GridError(f"boundary coefficient {name} must lie in [0, 1], got {value}")


@dataclass
class SimGrid:
    """Cell-centred velocity, pressure and divergence fields on a uniform grid."""

    dims: Tuple[int, int, int]
    dx: float
    origin: np.ndarray
    cells: np.ndarray
    velocity: np.ndarray
    pressure: np.ndarray
    divergence: np.ndarray
    inlet: Optional[PlaneSpec] = None
    outlet: Optional[PlaneSpec] = None

    def __post_init__(self) -> None:
        self.dims = tuple(int(n) for n in self.dims)  # type: ignore[assignment]
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise GridError(f"dims must be three positive integers, got {self.dims}")
        if not float(self.dx) > 0.0:
            raise GridError(f"dx must be positive, got {self.dx}")
        self.dx = float(self.dx)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.cells = np.asarray(self.cells, dtype=np.int8)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.pressure = np.asarray(self.pressure, dtype=np.float64)
        self.divergence = np.asarray(self.divergence, dtype=np.float64)
        expected = {
            "cells": self.dims,
            "velocity": self.dims + (3,),
            "pressure": self.dims,
            "divergence": self.dims,
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise GridError(f"{name} has shape {actual}, expected {shape}")

    @classmethod
    def create(
        cls,
        dims: Sequence[int],
        dx: float,
        origin: Sequence[float] = (0.0, 0.0, 0.0),
        cells: Optional[np.ndarray] = None,
        inlet: Optional[PlaneSpec] = None,
        outlet: Optional[PlaneSpec] = None,
    ) -> "SimGrid":
        shape = tuple(int(n) for n in dims)
        if cells is None:
            cells = np.full(shape, CellType.EMPTY, dtype=np.int8)
        return cls(
            dims=shape,  # type: ignore[arg-type]
            dx=dx,
            origin=np.asarray(origin, dtype=np.float64),
            cells=cells,
            velocity=np.zeros(shape + (3,)),
            pressure=np.zeros(shape),
            divergence=np.zeros(shape),
            inlet=inlet,
            outlet=outlet,
        )

    def copy(self) -> "SimGrid":
        return SimGrid(
            dims=self.dims,
            dx=self.dx,
            origin=self.origin.copy(),
            cells=self.cells.copy(),
            velocity=self.velocity.copy(),
            pressure=self.pressure.copy(),
            divergence=self.divergence.copy(),
            inlet=self.inlet,
            outlet=self.outlet,
        )

    def with_velocity(self, velocity: np.ndarray) -> "SimGrid":
        clone = self.copy()
        clone.velocity = np.array(velocity, dtype=np.float64).reshape(self.dims + (3,))
        return clone

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    @property
    def active(self) -> np.ndarray:
        return active_mask(self.cells)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        low = self.origin.copy()
        return low, low + np.asarray(self.dims, dtype=np.float64) * self.dx


# ----------------------------------------------------------------------
# Cell helpers
# ----------------------------------------------------------------------
def active_mask(cells: np.ndarray) -> np.ndarray:
    """FLUID or SURFACE cells, the cells the solver updates."""

    return np.isin(cells, ACTIVE_TYPES)


def cell_centers(dims: Sequence[int], dx: float, origin: Sequence[float]) -> np.ndarray:
    axes = [np.asarray(origin)[a] + (np.arange(dims[a]) + 0.5) * dx for a in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack(grid, axis=-1)


def occupancy_from_points(
    points: np.ndarray, dims: Sequence[int], dx: float, origin: Sequence[float]
) -> np.ndarray:
    """Mark every cell containing at least one of ``points``."""

    occupied = np.zeros(tuple(dims), dtype=bool)
    if len(points) == 0:
        return occupied
    index = np.floor((np.asarray(points) - np.asarray(origin)) / dx).astype(np.int64)
    inside = np.all((index >= 0) & (index < np.asarray(dims)), axis=1)
    index = index[inside]
    occupied[index[:, 0], index[:, 1], index[:, 2]] = True
    return occupied


def classify_cells(
    fluid_occupancy: np.ndarray,
    solid_occupancy: np.ndarray,
    inlet_plane: Optional[PlaneSpec] = None,
    outlet_plane: Optional[PlaneSpec] = None,
) -> np.ndarray:
    """Build the CellType field from fluid/solid occupancy and boundary planes."""

    fluid = np.asarray(fluid_occupancy, dtype=bool)
    solid = np.asarray(solid_occupancy, dtype=bool)
    if fluid.ndim != 3:
        raise GridError(f"fluid occupancy must be 3D, got shape {fluid.shape}")
    if solid.shape != fluid.shape:
        raise GridError(f"solid occupancy shape {solid.shape} does not match fluid {fluid.shape}")
    dims = fluid.shape
    if inlet_plane is not None and outlet_plane is not None:
        shared = inlet_plane.mask(dims) & outlet_plane.mask(dims)
        if shared.any():
            raise GridError(
                f"inlet {inlet_plane.label()} and outlet {outlet_plane.label()} overlap in {int(shared.sum())} cells"
            )

    cells = np.full(dims, CellType.EMPTY, dtype=np.int8)
    liquid = fluid & ~solid
    cells[liquid] = CellType.FLUID
    cells[solid] = CellType.SOLID

    # Out-of-domain neighbours count as non-empty.
    empty = np.pad(cells == CellType.EMPTY, 1, mode="constant", constant_values=False)
    structure = ndimage.generate_binary_structure(3, 1)
    touches_empty = ndimage.binary_dilation(empty, structure=structure)[1:-1, 1:-1, 1:-1]
    cells[liquid & touches_empty] = CellType.SURFACE

    if inlet_plane is not None:
        cells[inlet_plane.mask(dims) & liquid] = CellType.INLET
    if outlet_plane is not None:
        cells[outlet_plane.mask(dims) & liquid] = CellType.OUTLET
    return cells


def build_grid(
    fluid_occupancy: np.ndarray,
    solid_occupancy: np.ndarray,
    dx: float,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
    inlet_plane: Optional[PlaneSpec] = None,
    outlet_plane: Optional[PlaneSpec] = None,
) -> SimGrid:
    cells = classify_cells(fluid_occupancy, solid_occupancy, inlet_plane, outlet_plane)
    return SimGrid.create(cells.shape, dx, origin, cells=cells, inlet=inlet_plane, outlet=outlet_plane)


# ----------------------------------------------------------------------
# Sparse operators
# ----------------------------------------------------------------------
def _offset_neighbour(shape: Tuple[int, int, int], offset: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    coords = np.indices(shape)
    inside = np.ones(shape, dtype=bool)
    shifted = []
    for axis in range(3):
        target = coords[axis] + int(offset[axis])
        inside &= (target >= 0) & (target < shape[axis])
        shifted.append(np.clip(target, 0, shape[axis] - 1))
    flat = np.ravel_multi_index(shifted, shape)
    return flat.ravel(), inside.ravel()


def _axis_offset(axis: int, step: int) -> Tuple[int, int, int]:
    offset = [0, 0, 0]
    offset[axis] = step
    return tuple(offset)  # type: ignore[return-value]


def _assemble(parts: List[Tuple[np.ndarray, np.ndarray, float]], n: int) -> sparse.csr_matrix:
    rows = [r for r, _, _ in parts]
    cols = [c for _, c, _ in parts]
    vals = [np.full(r.size, v) for r, _, v in parts]
    if not rows:
        return sparse.csr_matrix((n, n))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


class GridOperators:
    """Sparse stencils for one cell configuration.

    Rows belonging to non-active cells are zero in every derivative operator,
    so operators can be applied to full flattened fields.
    """

    def __init__(self, cells: np.ndarray, dx: float):
        self.shape: Tuple[int, int, int] = tuple(cells.shape)  # type: ignore[assignment]
        self.n = int(cells.size)
        self.dx = float(dx)
        flat = cells.ravel().astype(np.int64)
        self.kinds = flat
        self.active = np.isin(flat, ACTIVE_TYPES)
        self.solid = flat == CellType.SOLID
        self.empty = flat == CellType.EMPTY
        self.inlet = flat == CellType.INLET
        self.outlet = flat == CellType.OUTLET
        self._self = np.arange(self.n)
        self._mask = sparse.diags(self.active.astype(np.float64))

        self.solid_plus = np.zeros((3, self.n), dtype=bool)
        self.solid_minus = np.zeros((3, self.n), dtype=bool)
        self._neighbours: Dict[Tuple[int, int, int], Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        for axis in range(3):
            for step in (-1, 1):
                nb, inside = self._neighbour(_axis_offset(axis, step))
                kind = np.where(inside, flat[nb], _OUTSIDE)
                wall = kind == CellType.SOLID
                if step > 0:
                    self.solid_plus[axis] = wall
                else:
                    self.solid_minus[axis] = wall

        self._build_first_order()
        self._stencil_gathers: Optional[List[sparse.csr_matrix]] = None

    # ------------------------------------------------------------------
    # Neighbour gathers
    # ------------------------------------------------------------------
    def _neighbour(self, offset: Tuple[int, int, int]) -> Tuple[np.ndarray, np.ndarray]:
        if offset not in self._neighbours:
            nb, inside = _offset_neighbour(self.shape, offset)
            kind = np.where(inside, self.kinds[nb], _OUTSIDE)
            self._neighbours[offset] = (nb, inside, kind)
        nb, inside, _ = self._neighbours[offset]
        return nb, inside

    def _kind(self, offset: Tuple[int, int, int]) -> np.ndarray:
        self._neighbour(offset)
        return self._neighbours[offset][2]

    def velocity_ghost(self, axis: int, step: int, component: int) -> sparse.csr_matrix:
        """Neighbour value of one velocity component, with wall/free-surface ghosts."""

        offset = _axis_offset(axis, step)
        nb, inside = self._neighbour(offset)
        opposite, opposite_inside = self._neighbour(_axis_offset(axis, -step))
        kind = self._kind(offset)
        me = self._self

        stored = inside & np.isin(kind, STORED_VELOCITY_TYPES)
        wall = inside & (kind == CellType.SOLID)
        free = inside & (kind == CellType.EMPTY)
        extrapolate = ~inside & opposite_inside
        lone = ~inside & ~opposite_inside
        reflect = -1.0 if component == axis else 1.0
        return _assemble(
            [
                (me[stored], nb[stored], 1.0),
                (me[wall], me[wall], reflect),
                (me[free], me[free], 1.0),
                (me[extrapolate], me[extrapolate], 2.0),
                (me[extrapolate], opposite[extrapolate], -1.0),
                (me[lone], me[lone], 1.0),
            ],
            self.n,
        )

    def pressure_ghost(self, offset: Tuple[int, int, int]) -> sparse.csr_matrix:
        """Neighbour pressure: active → value, EMPTY → 0, anything else mirrors p(x)."""

        nb, inside = self._neighbour(offset)
        kind = self._kind(offset)
        me = self._self
        stored = inside & np.isin(kind, ACTIVE_TYPES)
        mirror = ~stored & ~(inside & (kind == CellType.EMPTY))
        return _assemble([(me[stored], nb[stored], 1.0), (me[mirror], me[mirror], 1.0)], self.n)

    def scalar_ghost(self, offset: Tuple[int, int, int]) -> sparse.csr_matrix:
        """Zero-gradient neighbour of a scalar living on active cells."""

        nb, inside = self._neighbour(offset)
        kind = self._kind(offset)
        me = self._self
        stored = inside & np.isin(kind, ACTIVE_TYPES)
        return _assemble([(me[stored], nb[stored], 1.0), (me[~stored], me[~stored], 1.0)], self.n)

    # ------------------------------------------------------------------
    # Assembled operators
    # ------------------------------------------------------------------
    def _masked(self, matrix: sparse.spmatrix) -> sparse.csr_matrix:
        return sparse.csr_matrix(self._mask @ matrix)

    def _build_first_order(self) -> None:
        n, dx = self.n, self.dx
        eye = sparse.identity(n, format="csr")
        half = 1.0 / (2.0 * dx)

        self.div: List[sparse.csr_matrix] = []
        self.grad: List[sparse.csr_matrix] = []
        self.scalar_grad: List[sparse.csr_matrix] = []
        self.backward: List[List[sparse.csr_matrix]] = [[], [], []]
        self.forward: List[List[sparse.csr_matrix]] = [[], [], []]
        laplacians = [sparse.csr_matrix((n, n)) for _ in range(3)]
        jacobi_sum = sparse.csr_matrix((n, n))

        for axis in range(3):
            plus = self.velocity_ghost(axis, 1, axis)
            minus = self.velocity_ghost(axis, -1, axis)
            self.div.append(self._masked((plus - minus) * half))

            p_plus = self.pressure_ghost(_axis_offset(axis, 1))
            p_minus = self.pressure_ghost(_axis_offset(axis, -1))
            self.grad.append(self._masked((p_plus - p_minus) * half))
            jacobi_sum = jacobi_sum + p_plus + p_minus

            s_plus = self.scalar_ghost(_axis_offset(axis, 1))
            s_minus = self.scalar_ghost(_axis_offset(axis, -1))
            self.scalar_grad.append(self._masked((s_plus - s_minus) * half))

            for component in range(3):
                c_plus = plus if component == axis else self.velocity_ghost(axis, 1, component)
                c_minus = minus if component == axis else self.velocity_ghost(axis, -1, component)
                self.backward[axis].append(self._masked((eye - c_minus) / dx))
                self.forward[axis].append(self._masked((c_plus - eye) / dx))
                laplacians[component] = laplacians[component] + (c_plus + c_minus - 2.0 * eye) / dx**2

        self.jacobi = self._masked(jacobi_sum / 6.0)
        self.laplacian = [self._masked(lap) for lap in laplacians]

        blocks = [[None] * 3 for _ in range(3)]
        for c in range(3):
            for c2 in range(3):
                block = self.scalar_grad[c] @ self.div[c2]
                if c == c2:
                    block = block + self.laplacian[c]
                blocks[c][c2] = block
        self.viscous = sparse.bmat(blocks, format="csr")

    @property
    def stencil_gathers(self) -> List[sparse.csr_matrix]:
        """27 gathers ordered like ``kernel[ox+1, oy+1, oz+1]``."""

        if self._stencil_gathers is None:
            gathers = []
            for offset in product((-1, 0, 1), repeat=3):
                gathers.append(self._masked(self.pressure_ghost(tuple(offset))))  # type: ignore[arg-type]
            self._stencil_gathers = gathers
        return self._stencil_gathers


_cache_lock = threading.Lock()
_operator_cache: "OrderedDict[Tuple[str, Tuple[int, ...], float], GridOperators]" = OrderedDict()


def operators_for(cells: np.ndarray, dx: float) -> GridOperators:
    """Return (and memoise) the sparse operators for a cell configuration."""

    cells = np.ascontiguousarray(cells, dtype=np.int8)
    key = (hashlib.sha1(cells.tobytes()).hexdigest(), cells.shape, float(dx))
    with _cache_lock:
        cached = _operator_cache.get(key)
        if cached is not None:
            _operator_cache.move_to_end(key)
            return cached
    built = GridOperators(cells, dx)
    with _cache_lock:
        _operator_cache[key] = built
        while len(_operator_cache) > _OPERATOR_CACHE_SIZE:
            _operator_cache.popitem(last=False)
    return built


# ----------------------------------------------------------------------
# Field operations
# ----------------------------------------------------------------------
def divergence_flat(velocity: np.ndarray, ops: GridOperators) -> np.ndarray:
    v = velocity.reshape(-1, 3)
    return ops.div[0] @ v[:, 0] + ops.div[1] @ v[:, 1] + ops.div[2] @ v[:, 2]


def divergence_vjp(grad_div: np.ndarray, ops: GridOperators) -> np.ndarray:
    g = np.empty((ops.n, 3))
    for axis in range(3):
        g[:, axis] = ops.div[axis].T @ grad_div
    return g


def divergence(grid: SimGrid) -> np.ndarray:
    """Central-difference divergence on active cells; zero elsewhere."""

    ops = operators_for(grid.cells, grid.dx)
    return divergence_flat(grid.velocity, ops).reshape(grid.dims)


def pressure_gradient(pressure: np.ndarray, cells: np.ndarray, dx: float) -> np.ndarray:
    ops = operators_for(cells, dx)
    p = np.asarray(pressure, dtype=np.float64).ravel()
    return np.stack([ops.grad[a] @ p for a in range(3)], axis=-1).reshape(cells.shape + (3,))


@dataclass
class BoundaryRecord:
    """Which velocity components met a wall during one boundary application."""

    velocity_in: np.ndarray
    hits: np.ndarray
    tangential: np.ndarray
    fluctuation: float
    inlet_normal: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _inlet_value(v_in: np.ndarray, v_tilde_in: float, normal: np.ndarray, step_index: int, omega: float) -> Tuple[np.ndarray, float]:
    wave = float(np.sin(omega * step_index))
    return np.asarray(v_in, dtype=np.float64) + float(v_tilde_in) * wave * normal, wave


def boundary_forward(
    velocity: np.ndarray,
    ops: GridOperators,
    coeffs: BoundaryCoefficients,
    v_in: Sequence[float],
    v_tilde_in: float,
    v_out: Sequence[float],
    step_index: int,
    omega: float,
    inlet: Optional[PlaneSpec],
) -> Tuple[np.ndarray, BoundaryRecord]:
    v = velocity.reshape(-1, 3)
    toward_plus = ops.solid_plus.T & (v > 0.0)
    toward_minus = ops.solid_minus.T & (v < 0.0)
    hits = ops.active[:, None] & (toward_plus | toward_minus)
    tangential = hits.any(axis=1)[:, None] & ~hits

    factor = np.where(hits, -coeffs.bounce, np.where(tangential, 1.0 - coeffs.damp, 1.0))
    out = v * factor
    out[ops.solid] = 0.0

    normal = inlet.inward_normal if inlet is not None else np.zeros(3)
    inlet_velocity, wave = _inlet_value(np.asarray(v_in), v_tilde_in, normal, step_index, omega)
    out[ops.inlet] = inlet_velocity
    out[ops.outlet] = np.asarray(v_out, dtype=np.float64)
    record = BoundaryRecord(
        velocity_in=v.copy(), hits=hits, tangential=tangential, fluctuation=wave, inlet_normal=normal
    )
    return out.reshape(velocity.shape), record


def boundary_vjp(
    grad_out: np.ndarray, record: BoundaryRecord, ops: GridOperators, coeffs: BoundaryCoefficients
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Reverse of :func:`boundary_forward`; returns (grad_velocity, parameter grads)."""

    g = grad_out.reshape(-1, 3)
    v = record.velocity_in
    factor = np.where(record.hits, -coeffs.bounce, np.where(record.tangential, 1.0 - coeffs.damp, 1.0))
    g_v = g * factor
    prescribed = ops.solid | ops.inlet | ops.outlet
    g_v[prescribed] = 0.0

    gv = g * v
    grads = {
        "b": np.array(-gv[record.hits].sum()),
        "d": np.array(-gv[record.tangential].sum()),
        "v_in": g[ops.inlet].sum(axis=0),
        "v_tilde_in": np.array((g[ops.inlet] @ record.inlet_normal).sum() * record.fluctuation),
        "v_out": g[ops.outlet].sum(axis=0),
    }
    return g_v.reshape(grad_out.shape), grads


def apply_boundary_conditions(
    grid: SimGrid,
    coeffs: BoundaryCoefficients,
    v_in: Sequence[float],
    v_tilde_in: float,
    v_out: Sequence[float],
    step_index: int,
    omega: float = 0.5,
) -> SimGrid:
    """Wall reflection/damping, prescribed inlet and outlet velocities."""

    ops = operators_for(grid.cells, grid.dx)
    velocity, _ = boundary_forward(
        grid.velocity, ops, coeffs, v_in, v_tilde_in, v_out, step_index, omega, grid.inlet
    )
    return grid.with_velocity(velocity)


def trilinear_sample(field_values: np.ndarray, grid: SimGrid, points: np.ndarray) -> np.ndarray:
    """Sample a cell-centred field at world points (clamped to the grid)."""

    index = (np.asarray(points, dtype=np.float64) - grid.origin) / grid.dx - 0.5
    coords = index.T
    if field_values.ndim == 3:
        return ndimage.map_coordinates(field_values, coords, order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(field_values[..., c], coords, order=1, mode="nearest") for c in range(field_values.shape[-1])],
        axis=-1,
    )


__all__ = [
    "ACTIVE_TYPES",
    "BoundaryCoefficients",
    "BoundaryRecord",
    "CellType",
    "GridOperators",
    "PlaneSpec",
    "SimGrid",
    "active_mask",
    "apply_boundary_conditions",
    "boundary_forward",
    "boundary_vjp",
    "build_grid",
    "cell_centers",
    "classify_cells",
    "divergence",
    "divergence_flat",
    "divergence_vjp",
    "occupancy_from_points",
    "operators_for",
    "pressure_gradient",
    "trilinear_sample",
]
