"""Surface and volumetric velocity reconstruction from screen flow and depth."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import linalg as splinalg

from fluid_twin.config import DEFAULT_BOUNDARY_LAYER, DEFAULT_FRAME_DT, DEFAULT_MAINSTREAM, DEFAULT_PROJECTION
from fluid_twin.errors import GridError
from fluid_twin.grid_core import CellType, SimGrid, active_mask, operators_for

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# Types
# ----------------------------------------------------------------------
@dataclass
class CameraModel:
    """Screen = S * ndc(P @ W @ X) + T."""

    projection: np.ndarray = field(default_factory=lambda: np.eye(4))
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    screen_scale: np.ndarray = field(default_factory=lambda: np.ones(2))
    screen_translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self) -> None:
        self.projection = np.asarray(self.projection, dtype=np.float64).reshape(4, 4)
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.screen_scale = np.asarray(self.screen_scale, dtype=np.float64).reshape(2)
        self.screen_translation = np.asarray(self.screen_translation, dtype=np.float64).reshape(2)


@dataclass
class ScreenObservation:
    flow: np.ndarray
    depth: np.ndarray
    fluid_mask: np.ndarray
    detected_mask: np.ndarray
    camera: CameraModel = field(default_factory=CameraModel)
    frame_dt: float = DEFAULT_FRAME_DT

    def __post_init__(self) -> None:
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.fluid_mask = np.asarray(self.fluid_mask, dtype=bool)
        self.detected_mask = np.asarray(self.detected_mask, dtype=bool)
        shape = self.depth.shape
        if self.flow.shape != shape + (2,):
            raise GridError(f"flow raster {self.flow.shape} does not match depth {shape}")
        for name in ("fluid_mask", "detected_mask"):
            if getattr(self, name).shape != shape:
                raise GridError(f"{name} raster {getattr(self, name).shape} does not match depth {shape}")
        if np.any(self.detected_mask & ~self.fluid_mask):
            raise GridError("detected_mask must lie inside fluid_mask")
        if np.any(self.depth[self.fluid_mask] <= 0.0):
            raise GridError("depth must be positive inside the fluid mask")
        if not self.frame_dt > 0.0:
            raise GridError(f"frame_dt must be positive, got {self.frame_dt}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape  # type: ignore[return-value]


@dataclass
class MainstreamSpec:
    """Dominant screen-space flow direction, global (2,) or per pixel (H, W, 2)."""

    direction: np.ndarray = field(default_factory=lambda: np.asarray(DEFAULT_MAINSTREAM["direction"], dtype=np.float64))
    radius: int = DEFAULT_MAINSTREAM["radius_px"]
    sigma: float = DEFAULT_MAINSTREAM["sigma_px"]
    auto: bool = DEFAULT_MAINSTREAM["auto"]

    def __post_init__(self) -> None:
        direction = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(direction, axis=-1, keepdims=True)
        if direction.shape[-1] != 2 or np.any(norm == 0.0):
            raise GridError("mainstream direction must be a non-zero 2-vector field")
        self.direction = direction / norm
        if int(self.radius) < 1 or not self.sigma > 0.0:
            raise GridError("mainstream radius must be >= 1 and sigma > 0")
        self.radius = int(self.radius)

    def direction_field(self, shape: Tuple[int, int]) -> np.ndarray:
        return np.broadcast_to(self.direction, tuple(shape) + (2,))


@dataclass
class BoundaryLayer:
    delta: float
    profile: str = "cubic"

    def __post_init__(self) -> None:
        if not self.delta > 0.0:
            raise GridError(f"boundary layer thickness must be positive, got {self.delta}")

    @classmethod
    def for_medium(
        cls,
        medium: str,
        dx: float,
        cells_liquid: float = DEFAULT_BOUNDARY_LAYER["delta_cells_liquid"],
        cells_gas: float = DEFAULT_BOUNDARY_LAYER["delta_cells_gas"],
    ) -> "BoundaryLayer":
        cells = cells_liquid if medium == "liquid" else cells_gas
        return cls(delta=cells * dx)


@dataclass
class InterpolationResult:
    velocity: np.ndarray
    fallback: np.ndarray


@dataclass
class ConstraintResult:
    vel2d: np.ndarray
    initial_residual: float
    final_residual: float
    iterations: int
    converged: bool


@dataclass
class ProjectionReport:
    grid: SimGrid
    initial_residual: float
    final_residual: float
    iterations: int
    converged: bool
    history: List[float] = field(default_factory=list)


# ----------------------------------------------------------------------
# Screen-space correction
# ----------------------------------------------------------------------
def _shift(values: np.ndarray, di: int, dj: int, fill: float = 0.0) -> np.ndarray:
    """out[i, j] = values[i + di, j + dj], ``fill`` outside the raster."""

    out = np.full_like(values, fill)
    h, w = values.shape[:2]
    src_i = slice(max(di, 0), h + min(di, 0))
    dst_i = slice(max(-di, 0), h + min(-di, 0))
    src_j = slice(max(dj, 0), w + min(dj, 0))
    dst_j = slice(max(-dj, 0), w + min(-dj, 0))
    out[dst_i, dst_j] = values[src_i, src_j]
    return out


def mainstream_interpolate(
    vel: np.ndarray,
    detected: np.ndarray,
    mainstream: MainstreamSpec,
    fluid_mask: Optional[np.ndarray] = None,
) -> InterpolationResult:
    """Fill undetected pixels from detected neighbours that move along the mainstream.

    Each neighbour i contributes w(i) * max(0, n_k . v_i / |v_i|) * v_i with a
    Gaussian distance weight w; contributions are normalised by their summed
    weight so the filled speed stays comparable to the neighbours'.
    """

    vel = np.asarray(vel, dtype=np.float64)
    detected = np.asarray(detected, dtype=bool)
    shape = detected.shape
    targets = ~detected if fluid_mask is None else (np.asarray(fluid_mask, dtype=bool) & ~detected)
    normal = mainstream.direction_field(shape)
    speed = np.linalg.norm(vel, axis=-1)
    usable = detected & (speed > 0.0)

    numerator = np.zeros(shape + (3,))
    denominator = np.zeros(shape)
    r = mainstream.radius
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            dist2 = di * di + dj * dj
            if dist2 == 0 or dist2 > r * r:
                continue
            src_vel = np.stack([_shift(vel[..., c], di, dj) for c in range(3)], axis=-1)
            src_ok = _shift(usable.astype(np.float64), di, dj) > 0.0
            src_speed = np.linalg.norm(src_vel, axis=-1)
            cosine = np.einsum("hwc,hwc->hw", normal, src_vel[..., :2]) / np.where(src_ok, src_speed, 1.0)
            weight = np.exp(-dist2 / (2.0 * mainstream.sigma**2)) * np.maximum(cosine, 0.0) * src_ok
            numerator += weight[..., None] * src_vel
            denominator += weight

    out = vel.copy()
    filled = targets & (denominator > 0.0)
    out[filled] = numerator[filled] / denominator[filled][:, None]
    fallback = targets & ~filled
    if fallback.any():
        typical = float(np.median(speed[usable])) if usable.any() else 0.0
        out[fallback, :2] = normal[fallback] * typical
        out[fallback, 2] = 0.0
        logger.warning("[Mainstream] %d pixel(s) without usable neighbours used the fallback", int(fallback.sum()))
    return InterpolationResult(velocity=out, fallback=fallback)


def estimate_mainstream_direction(fluid_mask: np.ndarray, flow: Optional[np.ndarray] = None) -> np.ndarray:
    """Principal axis of the fluid-mask boundary as a unit (u, v) direction."""

    mask = np.asarray(fluid_mask, dtype=bool)
    boundary = mask & ~ndimage.binary_erosion(mask)
    rows, cols = np.nonzero(boundary)
    if rows.size < 2:
        raise GridError("fluid mask boundary is too small to estimate a mainstream direction")
    points = np.stack([cols, -rows], axis=1).astype(np.float64)
    points -= points.mean(axis=0)
    _, vectors = np.linalg.eigh(points.T @ points)
    direction = vectors[:, -1]
    if flow is not None:
        mean_flow = np.asarray(flow, dtype=np.float64)[mask].mean(axis=0)
        if float(direction @ mean_flow) < 0.0:
            direction = -direction
    elif direction[0] < 0.0:
        direction = -direction
    return direction / np.linalg.norm(direction)


def ndc_grid(shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel-centre NDC coordinates: u grows to the right, v grows upward."""

    h, w = shape
    u = 2.0 * (np.arange(w) + 0.5) / w - 1.0
    v = 1.0 - 2.0 * (np.arange(h) + 0.5) / h
    return np.meshgrid(u, v, indexing="xy")


def depth_change(
    depth0: np.ndarray, depth1: np.ndarray, flow: np.ndarray, frame_dt: float = DEFAULT_FRAME_DT
) -> np.ndarray:
    """v_z from depth sampled at flow-advected pixels in the next frame, per second."""

    h, w = depth0.shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    target_rows = rows - flow[..., 1] * h / 2.0
    target_cols = cols + flow[..., 0] * w / 2.0
    advected = ndimage.map_coordinates(depth1, [target_rows, target_cols], order=1, mode="nearest")
    return (advected - depth0) / frame_dt


def _central_difference(n: int) -> sparse.csr_matrix:
    if n < 3:
        return sparse.csr_matrix((n, n))
    ones = np.ones(n - 1)
    diff = sparse.diags([-ones, ones], [-1, 1], format="lil")
    diff[0, :] = 0.0
    diff[n - 1, :] = 0.0
    return sparse.csr_matrix(diff)


def screen_divergence_operators(shape: Tuple[int, int]) -> Tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """d/du and d/dv in NDC units on a flattened H*W raster."""

    h, w = shape
    d_u = sparse.kron(sparse.identity(h), _central_difference(w)) * (w / 4.0)
    d_v = sparse.kron(_central_difference(h), sparse.identity(w)) * (-h / 4.0)
    return sparse.csr_matrix(d_u), sparse.csr_matrix(d_v)


def constraint_target(vz: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Required screen divergence -(1/z)(u d/du + v d/dv + 2) v_z."""

    shape = depth.shape
    d_u, d_v = screen_divergence_operators(shape)
    u, v = ndc_grid(shape)
    flat = vz.ravel()
    total = u.ravel() * (d_u @ flat) + v.ravel() * (d_v @ flat) + 2.0 * flat
    return (-total / depth.ravel()).reshape(shape)


def project_2d_constraint(
    vel2d: np.ndarray,
    vz: np.ndarray,
    depth: np.ndarray,
    iters: int = DEFAULT_PROJECTION["constraint_2d_iters"],
    modifiable: Optional[np.ndarray] = None,
    tol: float = DEFAULT_PROJECTION["constraint_2d_tol"],
    fluid_mask: Optional[np.ndarray] = None,
    frame_dt: float = 1.0,
) -> ConstraintResult:
    """Least-squares correction of the modifiable pixels towards the screen divergence constraint.

    ``vel2d`` is NDC displacement per frame; ``vz`` is in depth units per second.
    Residuals are reported on constraint rows that touch a modifiable pixel.
    """

    vel2d = np.asarray(vel2d, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    shape = depth.shape
    fluid = np.ones(shape, dtype=bool) if fluid_mask is None else np.asarray(fluid_mask, dtype=bool)
    if np.any(depth[fluid] <= 0.0):
        raise GridError("depth must be positive inside the fluid mask")
    free = fluid if modifiable is None else (np.asarray(modifiable, dtype=bool) & fluid)

    interior = fluid.copy()
    interior[[0, -1], :] = False
    interior[:, [0, -1]] = False
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        interior &= _shift(fluid.astype(np.float64), di, dj) > 0.0

    d_u, d_v = screen_divergence_operators(shape)
    rate = vel2d / frame_dt
    target = constraint_target(np.asarray(vz, dtype=np.float64), depth).ravel()
    residual = d_u @ rate[..., 0].ravel() + d_v @ rate[..., 1].ravel() - target

    free_index = np.flatnonzero(free)
    system = sparse.hstack([d_u[:, free_index], d_v[:, free_index]], format="csr")
    touches = np.asarray(abs(system).sum(axis=1)).ravel() > 0.0
    rows = np.flatnonzero(interior.ravel() & touches)
    initial = float(np.abs(residual[rows]).max()) if rows.size else 0.0
    if rows.size == 0 or initial <= tol:
        return ConstraintResult(vel2d.copy(), initial, initial, 0, True)

    solution = splinalg.lsqr(system[rows], -residual[rows], atol=tol, btol=tol, iter_lim=int(iters))
    delta, istop, iterations = solution[0], solution[1], solution[2]
    count = free_index.size
    rate_u = rate[..., 0].ravel()
    rate_v = rate[..., 1].ravel()
    rate_u[free_index] += delta[:count]
    rate_v[free_index] += delta[count:]
    out_u = vel2d[..., 0].ravel().copy()
    out_v = vel2d[..., 1].ravel().copy()
    out_u[free_index] += delta[:count] * frame_dt
    out_v[free_index] += delta[count:] * frame_dt
    corrected = np.stack([out_u.reshape(shape), out_v.reshape(shape)], axis=-1)
    new_residual = d_u @ rate_u + d_v @ rate_v - target
    final = float(np.abs(new_residual[rows]).max())
    converged = istop in (1, 2) or final <= tol * max(1.0, initial)
    logger.info(
        "[Constraint2D] %d LSQR iterations, residual %.3e -> %.3e",
        iterations,
        initial,
        final,
        extra={"stage": "constraint_2d", "residual": final},
    )
    if not converged:
        logger.warning("[Constraint2D] stopped before reaching tolerance %.1e", tol)
    return ConstraintResult(corrected, initial, final, int(iterations), bool(converged))


# ----------------------------------------------------------------------
# Unprojection
# ----------------------------------------------------------------------
def _unproject(ndc: np.ndarray, z: np.ndarray, camera: CameraModel, inverse_view: np.ndarray) -> np.ndarray:
    p = camera.projection
    x, y = ndc[:, 0], ndc[:, 1]
    rows = []
    rhs = []
    for coord, row in ((x, 0), (y, 1)):
        a = p[row, 0] - coord * p[3, 0]
        b = p[row, 1] - coord * p[3, 1]
        c = (p[row, 2] - coord * p[3, 2]) * z + (p[row, 3] - coord * p[3, 3])
        rows.append(np.stack([a, b], axis=-1))
        rhs.append(-c)
    matrix = np.stack(rows, axis=1)
    try:
        xy = np.linalg.solve(matrix, np.stack(rhs, axis=1)[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise GridError("camera projection cannot be inverted at these pixels") from exc
    camera_points = np.column_stack([xy, z, np.ones_like(z)])
    world = camera_points @ inverse_view.T
    return world[:, :3] / world[:, 3:4]


def unproject_to_3d(
    vel2d: np.ndarray,
    depth: np.ndarray,
    observation: ScreenObservation,
    dz: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World positions, velocities (m/s) and pixel indices of the masked pixels.

    Each pixel and its flow-displaced partner are mapped back through the
    inverse of the screen transform and the division by frame_dt turns the
    world-space displacement into a velocity.
    """

    camera = observation.camera
    if np.any(camera.screen_scale == 0.0):
        raise GridError("screen scale must be non-zero")
    try:
        inverse_view = np.linalg.inv(camera.world_to_camera)
    except np.linalg.LinAlgError as exc:
        raise GridError("world-to-camera matrix is singular") from exc

    shape = depth.shape
    pixels = np.argwhere(observation.fluid_mask if mask is None else np.asarray(mask, dtype=bool))
    u, v = ndc_grid(shape)
    screen = np.stack([u[tuple(pixels.T)], v[tuple(pixels.T)]], axis=1)
    flow = np.asarray(vel2d, dtype=np.float64)[tuple(pixels.T)]
    z0 = np.asarray(depth, dtype=np.float64)[tuple(pixels.T)]
    z1 = z0 + (0.0 if dz is None else np.asarray(dz, dtype=np.float64)[tuple(pixels.T)])

    ndc_start = (screen - camera.screen_translation) / camera.screen_scale
    ndc_end = (screen + flow - camera.screen_translation) / camera.screen_scale
    start = _unproject(ndc_start, z0, camera, inverse_view)
    end = _unproject(ndc_end, z1, camera, inverse_view)
    return start, (end - start) / observation.frame_dt, pixels


# ----------------------------------------------------------------------
# Volumetric reconstruction
# ----------------------------------------------------------------------
def wall_profile(y, delta: float, v_surface_mag):
    """Cubic boundary-layer speed: V (1.5 eta - 0.5 eta^3) for eta = y / delta <= 1."""

    if not delta > 0.0:
        raise ValueError(f"delta must be positive, got {delta}")
    y_arr = np.asarray(y, dtype=np.float64)
    if np.any(y_arr < 0.0):
        raise ValueError("wall distance must be non-negative")
    eta = np.minimum(y_arr / delta, 1.0)
    speed = np.asarray(v_surface_mag, dtype=np.float64) * (1.5 * eta - 0.5 * eta**3)
    speed = np.where(y_arr >= delta, np.asarray(v_surface_mag, dtype=np.float64), speed)
    return float(speed) if np.ndim(speed) == 0 else speed


def splat_surface_velocities(grid: SimGrid, points: np.ndarray, velocities: np.ndarray) -> SimGrid:
    """Average point velocities into SURFACE cells; empty SURFACE cells copy the nearest filled one."""

    out = grid.copy()
    surface = grid.cells == CellType.SURFACE
    if not surface.any() or len(points) == 0:
        return out
    index = np.floor((np.asarray(points) - grid.origin) / grid.dx).astype(np.int64)
    inside = np.all((index >= 0) & (index < np.asarray(grid.dims)), axis=1)
    index, velocities = index[inside], np.asarray(velocities, dtype=np.float64)[inside]
    total = np.zeros(grid.dims + (3,))
    count = np.zeros(grid.dims)
    np.add.at(total, tuple(index.T), velocities)
    np.add.at(count, tuple(index.T), 1.0)
    filled = surface & (count > 0.0)
    if not filled.any():
        return out
    out.velocity[filled] = total[filled] / count[filled][:, None]
    _, nearest = ndimage.distance_transform_edt(~filled, return_indices=True)
    missing = surface & ~filled
    out.velocity[missing] = out.velocity[tuple(n[missing] for n in nearest)]
    return out


def wall_corrected_initialization(grid: SimGrid, mainstream_dir: Sequence[float], delta: float) -> SimGrid:
    """Interior speed from the nearest SURFACE cell, shaped by the wall profile along the mainstream."""

    out = grid.copy()
    direction = np.asarray(mainstream_dir, dtype=np.float64)
    direction = direction / max(np.linalg.norm(direction), 1e-12)
    surface = grid.cells == CellType.SURFACE
    interior = grid.cells == CellType.FLUID
    if not surface.any() or not interior.any():
        return out
    _, nearest = ndimage.distance_transform_edt(~surface, return_indices=True)
    v_inf = np.linalg.norm(grid.velocity[tuple(n[interior] for n in nearest)], axis=1)
    solid = grid.cells == CellType.SOLID
    if solid.any():
        wall_distance = (ndimage.distance_transform_edt(~solid)[interior] - 0.5) * grid.dx
        speed = wall_profile(np.maximum(wall_distance, 0.0), delta, v_inf)
    else:
        speed = v_inf
    out.velocity[interior] = np.asarray(speed)[:, None] * direction
    return out


def default_fixed_cells(cells: np.ndarray) -> np.ndarray:
    """SURFACE, wall-adjacent and inlet/outlet cells, plus every non-active cell."""

    active = active_mask(cells)
    solid = np.pad(cells == CellType.SOLID, 1, constant_values=False)
    structure = ndimage.generate_binary_structure(3, 1)
    wall_adjacent = ndimage.binary_dilation(solid, structure=structure)[1:-1, 1:-1, 1:-1]
    return (
        ~active
        | (cells == CellType.SURFACE)
        | (active & wall_adjacent)
    )


def _colour_classes(shape: Tuple[int, int, int]) -> np.ndarray:
    coords = np.indices(shape)
    return ((coords[0] % 3) * 9 + (coords[1] % 3) * 3 + (coords[2] % 3)).ravel()


def volumetric_projection(
    grid: SimGrid,
    iters: int = DEFAULT_PROJECTION["volumetric_iters"],
    epsilon: Optional[float] = None,
    tol: float = DEFAULT_PROJECTION["volumetric_tol"],
    fixed: Optional[np.ndarray] = None,
) -> ProjectionReport:
    """Constrained projection of free cells onto zero divergence, enclosure held fixed.

    Each constraint C_i (the divergence at cell i) is relaxed in turn with
    dv = lambda_i grad C_i, lambda_i = -C_i / (|grad C_i|^2 + eps). Cells of one
    colour class (coordinates mod 3) share no unknowns, so a whole class is
    updated at once.
    """

    ops = operators_for(grid.cells, grid.dx)
    n = ops.n
    fixed_cells = default_fixed_cells(grid.cells) if fixed is None else (np.asarray(fixed, dtype=bool) | ~grid.active)
    free_cells = np.flatnonzero(~fixed_cells.ravel())
    velocity = grid.velocity.reshape(-1, 3).T.ravel().copy()

    full = sparse.hstack(ops.div, format="csr")
    columns = np.concatenate([free_cells + c * n for c in range(3)])
    free_op = full[:, columns]
    norms = np.asarray(free_op.multiply(free_op).sum(axis=1)).ravel()
    rows = np.flatnonzero(ops.active & (norms > 0.0))

    def residual() -> float:
        values = full[rows] @ velocity
        return float(np.abs(values).max()) if values.size else 0.0

    initial = residual()
    if epsilon is None:
        epsilon = 1e-6 * float(np.median(norms[rows])) if rows.size else 1e-12
    colours = _colour_classes(ops.shape)
    classes = [rows[colours[rows] == c] for c in range(27)]
    by_colour = [(r, full[r], free_op[r].T.tocsr()) for r in classes if r.size]

    history = [initial]
    sweeps = 0
    current = initial
    while sweeps < int(iters) and current > tol:
        for colour_rows, row_op, free_t in by_colour:
            lam = -(row_op @ velocity) / (norms[colour_rows] + epsilon)
            velocity[columns] += free_t @ lam
        sweeps += 1
        current = residual()
        history.append(current)

    out = grid.copy()
    updated = velocity.reshape(3, n).T
    flat = out.velocity.reshape(-1, 3)
    flat[free_cells] = updated[free_cells]
    converged = current <= tol
    logger.info(
        "[Volumetric] %d sweeps, residual %.3e -> %.3e",
        sweeps,
        initial,
        current,
        extra={"stage": "volumetric_projection", "residual": current},
    )
    return ProjectionReport(out, initial, current, sweeps, converged, history)


__all__ = [
    "BoundaryLayer",
    "CameraModel",
    "ConstraintResult",
    "InterpolationResult",
    "MainstreamSpec",
    "ProjectionReport",
    "ScreenObservation",
    "constraint_target",
    "default_fixed_cells",
    "depth_change",
    "estimate_mainstream_direction",
    "mainstream_interpolate",
    "ndc_grid",
    "project_2d_constraint",
    "screen_divergence_operators",
    "splat_surface_velocities",
    "unproject_to_3d",
    "volumetric_projection",
    "wall_corrected_initialization",
    "wall_profile",
]
