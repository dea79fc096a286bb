"""Pipeline commands: reconstruct, fit-kernel, optimize, simulate and export."""

from __future__ import annotations

import glob
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fluid_twin.apic_transfer import (
    InletSeeder,
    ParticleSet,
    advect_particles,
    g2p,
    p2g,
    particles_from_cloud,
    scatter_to_grid,
    update_deformation,
)
from fluid_twin.config_service import PipelineConfig
from fluid_twin.diff_opt import optimize
from fluid_twin.errors import CFLViolation, GridError, InputParseError, PreconditionError
from fluid_twin.fluid_step import PARAM_NAMES, SimParams, cfl_number, step
from fluid_twin.formats import (
    load_cloud,
    read_json,
    read_params,
    read_raster,
    read_vgrd,
    save_cloud,
    write_json,
    write_loss_csv,
    write_params,
    write_rows_csv,
    write_vgrd,
)
from fluid_twin.grid_core import CellType, PlaneSpec, SimGrid, build_grid, occupancy_from_points, trilinear_sample
from fluid_twin.logging_setup import StageTimer
from fluid_twin.pointcloud_prep import (
    FrameBatch,
    GaussianCloud,
    cloud_from_covariance,
    fill_interior,
    motion_score,
    batch_size_from_score,
    prune,
    union_frames,
)
from fluid_twin.pressure import PressureKernel, fit_pressure_kernel, generate_pressure_samples
from fluid_twin.surface_recon import (
    MainstreamSpec,
    ScreenObservation,
    depth_change,
    estimate_mainstream_direction,
    mainstream_interpolate,
    project_2d_constraint,
    splat_surface_velocities,
    unproject_to_3d,
    volumetric_projection,
    wall_corrected_initialization,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 3

ASSET_FILE = "asset.json"
TRAJECTORY_FILE = "trajectory.json"
CELLS_FILE = "cells.vgrd"


@dataclass
class FluidAsset:
    """Cleaned fluid and terrain clouds plus the parameters and grid they simulate on."""

    cloud: GaussianCloud
    terrain: GaussianCloud
    params: SimParams
    dims: Tuple[int, int, int]
    dx: float
    origin: np.ndarray
    inlet: Optional[PlaneSpec] = None
    outlet: Optional[PlaneSpec] = None
    initial_velocity: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if len(self.cloud) == 0:
            raise GridError("fluid asset has an empty cloud")
        self.params.validate()


def _grid_spec(config: PipelineConfig) -> Tuple[Tuple[int, int, int], float, np.ndarray]:
    grid = config.section("grid")
    return tuple(int(n) for n in grid["dims"]), float(grid["dx"]), np.asarray(grid["origin"], dtype=np.float64)  # type: ignore[return-value]


def _plane_label(plane: Optional[PlaneSpec]) -> Optional[str]:
    return plane.label() if plane is not None else None


def _plane(text: Optional[str]) -> Optional[PlaneSpec]:
    return PlaneSpec.parse(text) if text else None


def _load_kernel(config: PipelineConfig) -> Optional[PressureKernel]:
    path = config.section("step").get("kernel_file")
    if not path:
        return None
    data = read_json(path, "kernel")
    try:
        return PressureKernel.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputParseError(path, 0, f"invalid kernel document ({exc})") from None


# ----------------------------------------------------------------------
# Asset persistence
# ----------------------------------------------------------------------
def save_asset(directory: str, asset: FluidAsset) -> None:
    os.makedirs(directory, exist_ok=True)
    save_cloud(os.path.join(directory, "fluid.ply"), asset.cloud)
    save_cloud(os.path.join(directory, "terrain.ply"), asset.terrain)
    manifest: Dict[str, Any] = {
        "cloud": "fluid.ply",
        "terrain": "terrain.ply",
        "params": asset.params.to_dict(),
        "grid": {"dims": list(asset.dims), "dx": asset.dx, "origin": asset.origin.tolist()},
        "planes": {"inlet": _plane_label(asset.inlet), "outlet": _plane_label(asset.outlet)},
    }
    if asset.initial_velocity is not None:
        write_vgrd(os.path.join(directory, "initial_velocity.vgrd"), asset.initial_velocity, asset.dx, asset.origin)
        manifest["initial_velocity"] = "initial_velocity.vgrd"
    write_json(os.path.join(directory, ASSET_FILE), manifest)


def load_asset(directory: str) -> FluidAsset:
    path = os.path.join(directory, ASSET_FILE)
    manifest = read_json(path, "asset")
    try:
        grid = manifest["grid"]
        planes = manifest.get("planes", {})
        cloud = load_cloud(os.path.join(directory, manifest["cloud"]))
        terrain_name = manifest.get("terrain")
        terrain = load_cloud(os.path.join(directory, terrain_name)) if terrain_name else GaussianCloud.empty()
        velocity = None
        if manifest.get("initial_velocity"):
            velocity = read_vgrd(os.path.join(directory, manifest["initial_velocity"])).data.astype(np.float64)
        return FluidAsset(
            cloud=cloud,
            terrain=terrain,
            params=SimParams.from_dict(manifest["params"]),
            dims=tuple(int(n) for n in grid["dims"]),  # type: ignore[arg-type]
            dx=float(grid["dx"]),
            origin=np.asarray(grid["origin"], dtype=np.float64),
            inlet=_plane(planes.get("inlet")),
            outlet=_plane(planes.get("outlet")),
            initial_velocity=velocity,
        )
    except KeyError as exc:
        raise InputParseError(path, 0, f"missing field {exc}") from None


# ----------------------------------------------------------------------
# Stage 1: reconstruction
# ----------------------------------------------------------------------
def _read_frame(entry: Mapping[str, str], base: str, config: PipelineConfig) -> Tuple[ScreenObservation, GaussianCloud]:
    def resolve(key: str) -> str:
        if key not in entry:
            raise InputParseError(os.path.join(base, "scene.json"), 0, f"frame entry lacks {key!r}")
        return os.path.join(base, entry[key])

    flow = read_raster(resolve("flow"), "flow").astype(np.float64)
    depth = read_raster(resolve("depth"), "depth").astype(np.float64)
    mask = read_raster(resolve("mask"), "mask") > 0
    if "detected" in entry:
        detected = (read_raster(resolve("detected"), "detected") > 0) & mask
    else:
        detected = mask & (np.linalg.norm(flow, axis=-1) > 0.0)
    cloud = load_cloud(resolve("cloud"))
    observation = ScreenObservation(
        flow=flow, depth=depth, fluid_mask=mask, detected_mask=detected,
        camera=config.camera_model(), frame_dt=config.frame_dt,
    )
    return observation, cloud


def _clean_clouds(clouds: Sequence[GaussianCloud], config: PipelineConfig, dx: float) -> List[GaussianCloud]:
    prune_cfg = config.section("prune")
    threshold = config.section("fill")["occupancy_threshold"]
    cleaned = []
    for cloud in clouds:
        kept = prune(cloud, prune_cfg["opacity_min"], prune_cfg["anisotropy_max"])
        cleaned.append(fill_interior(kept, dx, threshold))
    return cleaned


def _batches(clouds: Sequence[GaussianCloud], config: PipelineConfig, dx: float) -> List[List[int]]:
    batch_cfg = config.section("batch")
    if len(clouds) < 2:
        return [list(range(len(clouds)))]
    score = motion_score(list(clouds), batch_cfg["psnr_cap_db"], dx)
    size = batch_size_from_score(score, batch_cfg["n_min"], batch_cfg["n_max"], batch_cfg["c"])
    logger.info("[Reconstruct] motion score %.4f -> batches of %d frames", score, size)
    return [list(range(start, min(start + size, len(clouds)))) for start in range(0, len(clouds), size)]


def _surface_velocities(
    observation: ScreenObservation, next_depth: Optional[np.ndarray], config: PipelineConfig
) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Screen flow -> corrected 2D flow -> world points and velocities."""

    if next_depth is not None:
        vz = depth_change(observation.depth, next_depth, observation.flow, observation.frame_dt)
    else:
        vz = np.zeros(observation.shape)
    vz = np.where(observation.fluid_mask, vz, 0.0)

    spec = config.mainstream_spec()
    if spec.auto:
        spec = MainstreamSpec(
            direction=estimate_mainstream_direction(observation.fluid_mask, observation.flow),
            radius=spec.radius,
            sigma=spec.sigma,
        )
    stacked = np.concatenate([observation.flow, vz[..., None]], axis=-1)
    filled = mainstream_interpolate(stacked, observation.detected_mask, spec, observation.fluid_mask).velocity

    proj = config.section("projection")
    modifiable = observation.fluid_mask & ~observation.detected_mask
    result = project_2d_constraint(
        filled[..., :2], filled[..., 2], observation.depth, proj["constraint_2d_iters"], modifiable,
        proj["constraint_2d_tol"], observation.fluid_mask, observation.frame_dt,
    )
    dz = filled[..., 2] * observation.frame_dt
    points, velocities, _ = unproject_to_3d(result.vel2d, observation.depth, observation, dz=dz)
    return points, velocities, result.converged


def _volume_for_frame(
    points: np.ndarray,
    velocities: np.ndarray,
    fluid: GaussianCloud,
    terrain: GaussianCloud,
    config: PipelineConfig,
) -> Tuple[SimGrid, bool]:
    dims, dx, origin = _grid_spec(config)
    fluid_occ = occupancy_from_points(fluid.positions, dims, dx, origin)
    solid_occ = occupancy_from_points(terrain.positions, dims, dx, origin)
    grid = build_grid(fluid_occ, solid_occ, dx, origin, config.inlet_plane(), config.outlet_plane())
    grid = splat_surface_velocities(grid, points, velocities)

    mean = velocities.mean(axis=0) if len(velocities) else np.zeros(3)
    direction = mean / np.linalg.norm(mean) if np.linalg.norm(mean) > 0.0 else np.array([1.0, 0.0, 0.0])
    grid = wall_corrected_initialization(grid, direction, config.boundary_layer().delta)

    proj = config.section("projection")
    report = volumetric_projection(grid, proj["volumetric_iters"], proj["volumetric_epsilon"], proj["volumetric_tol"])
    return report.grid, report.converged


def cmd_reconstruct(scene_path: str, out_dir: str, config: PipelineConfig) -> int:
    """Rasters and PLY frames listed in ``scene.json`` -> velocity grids, cleaned clouds and an asset."""

    scene = read_json(scene_path, "scene")
    base = os.path.dirname(os.path.abspath(scene_path))
    entries = scene.get("frames") or []
    if not entries:
        raise InputParseError(scene_path, 0, "scene lists no frames")
    dims, dx, origin = _grid_spec(config)
    os.makedirs(out_dir, exist_ok=True)

    with StageTimer(logger, "load", frames=len(entries)):
        frames = [_read_frame(entry, base, config) for entry in entries]
        terrain = load_cloud(os.path.join(base, scene["terrain"])) if scene.get("terrain") else GaussianCloud.empty()

    with StageTimer(logger, "clean"):
        cleaned = _clean_clouds([cloud for _, cloud in frames], config, dx)
        batches = _batches(cleaned, config, dx)
        unions = [union_frames(FrameBatch([cleaned[i] for i in batch]), dx) for batch in batches]
    for index, union in enumerate(unions):
        save_cloud(os.path.join(out_dir, f"cleaned_{index:04d}.ply"), union)

    converged = True
    cells_written = False
    first_velocity = None
    for batch_index, batch in enumerate(batches):
        for frame_index in batch:
            observation, _ = frames[frame_index]
            next_depth = frames[frame_index + 1][0].depth if frame_index + 1 < len(frames) else None
            with StageTimer(logger, "surface", frame=frame_index):
                points, velocities, ok_2d = _surface_velocities(observation, next_depth, config)
            with StageTimer(logger, "volume", frame=frame_index):
                grid, ok_3d = _volume_for_frame(points, velocities, unions[batch_index], terrain, config)
            converged = converged and ok_2d and ok_3d
            write_vgrd(os.path.join(out_dir, f"velocity_{frame_index:04d}.vgrd"), grid.velocity, dx, origin)
            if not cells_written:
                write_vgrd(os.path.join(out_dir, CELLS_FILE), grid.cells.astype(np.float32), dx, origin)
                cells_written = True
                first_velocity = grid.velocity

    asset = FluidAsset(
        cloud=unions[0],
        terrain=terrain,
        params=config.sim_params(),
        dims=dims,
        dx=dx,
        origin=origin,
        inlet=config.inlet_plane(),
        outlet=config.outlet_plane(),
        initial_velocity=first_velocity,
    )
    save_asset(out_dir, asset)
    if not converged:
        logger.warning("[Reconstruct] a projection stopped before its tolerance; outputs were written anyway")
    logger.info("[Reconstruct] wrote %d velocity grids to %s", len(frames), out_dir)
    return EXIT_OK


# ----------------------------------------------------------------------
# Pressure kernel fitting
# ----------------------------------------------------------------------
def cmd_fit_kernel(out_path: str, config: PipelineConfig, count: int = 32, iters: int = 3, epochs: int = 400, lr: float = 0.05) -> int:
    dims, dx, _ = _grid_spec(config)
    params = config.sim_params()
    cells = np.full(dims, CellType.FLUID, dtype=np.int8)
    with StageTimer(logger, "fit_kernel", samples=count):
        samples = generate_pressure_samples(cells, count, iters, params.rho, params.dt, dx, config.seed)
        kernel = fit_pressure_kernel(samples, epochs, lr)
    write_json(out_path, kernel.to_dict())
    return EXIT_OK


# ----------------------------------------------------------------------
# Stage 2: parameter optimisation
# ----------------------------------------------------------------------
def load_guidance(directory: str, config: PipelineConfig) -> Tuple[SimGrid, List[np.ndarray]]:
    cells = read_vgrd(os.path.join(directory, CELLS_FILE))
    paths = sorted(glob.glob(os.path.join(directory, "velocity_*.vgrd")))
    frames = []
    for path in paths:
        grid = read_vgrd(path)
        if grid.dims != cells.dims:
            raise GridError(f"{os.path.basename(path)} has dims {grid.dims}, cells have {cells.dims}")
        frames.append(grid.data[..., :3].astype(np.float64))
    template = SimGrid.create(
        cells.dims, cells.dx, cells.origin,
        cells=np.rint(cells.data[..., 0]).astype(np.int8),
        inlet=config.inlet_plane(),
        outlet=config.outlet_plane(),
    )
    return template, frames


def cmd_optimize(guidance_dir: str, out_dir: str, config: PipelineConfig, init_params: Optional[str] = None) -> int:
    template, frames = load_guidance(guidance_dir, config)
    if len(frames) < 2:
        raise PreconditionError(f"optimize needs at least two guidance grids, found {len(frames)}")
    init = read_params(init_params) if init_params else config.sim_params()
    norm = config.normalization()
    os.makedirs(out_dir, exist_ok=True)

    with StageTimer(logger, "optimize", frames=len(frames)):
        result = optimize(
            frames, init, config.loss_weights(), config.optimizer_config(),
            config.step_config(_load_kernel(config)), template, norm,
        )

    write_params(os.path.join(out_dir, "params.txt"), result.params, {n: norm.describe(n) for n in PARAM_NAMES})
    write_loss_csv(os.path.join(out_dir, "loss.csv"), result.loss_history, result.best_history, result.rollout_steps)
    if os.path.isfile(os.path.join(guidance_dir, ASSET_FILE)):
        asset = load_asset(guidance_dir)
        asset.params = result.params
        save_asset(out_dir, asset)

    if result.failed:
        logger.error("[Optimize] failed: %s", result.message)
        return EXIT_NOT_CONVERGED
    ratio = result.best_loss / result.initial_loss if result.initial_loss > 0.0 else 0.0
    logger.info("[Optimize] best/initial loss %.3e after %d iterations", ratio, result.iterations)
    return EXIT_OK


# ----------------------------------------------------------------------
# Re-simulation
# ----------------------------------------------------------------------
def _obstacle_mask(obstacles: Sequence[Mapping[str, Sequence[float]]], dims, dx: float, origin: np.ndarray) -> np.ndarray:
    centres = origin + (np.indices(dims).transpose(1, 2, 3, 0) + 0.5) * dx
    solid = np.zeros(dims, dtype=bool)
    for box in obstacles:
        low, high = np.asarray(box["min"]), np.asarray(box["max"])
        solid |= np.all((centres >= low) & (centres <= high), axis=-1)
    return solid


def _frame_cloud(particles: ParticleSet) -> GaussianCloud:
    return cloud_from_covariance(
        particles.positions,
        particles.covariance,
        particles.opacity,
        particles.features,
        extra={
            "vx": particles.velocities[:, 0],
            "vy": particles.velocities[:, 1],
            "vz": particles.velocities[:, 2],
            "mass": particles.masses,
        },
    )


def cmd_simulate(
    asset_dir: str,
    out_dir: str,
    n_frames: int,
    config: PipelineConfig,
    edits: Optional[Mapping[str, Any]] = None,
    force: bool = False,
) -> int:
    """APIC re-simulation: p2g, grid step, g2p, deformation update, advection per substep."""

    if n_frames < 0:
        raise ValueError(f"n_frames must be >= 0, got {n_frames}")
    asset = load_asset(asset_dir)
    changes = {**config.section("simulate")["edits"], **(edits or {})}
    params = SimParams.from_dict({**asset.params.to_dict(), **changes})
    if changes:
        logger.info("[Simulate] parameter edits: %s", sorted(changes))

    solid = occupancy_from_points(asset.terrain.positions, asset.dims, asset.dx, asset.origin)
    solid |= _obstacle_mask(config.section("simulate")["obstacles"], asset.dims, asset.dx, asset.origin)
    ppc = config.section("simulate")["particles_per_cell"]
    particles = particles_from_cloud(asset.cloud, params.rho, asset.dx, ppc)
    sampler = SimGrid.create(asset.dims, asset.dx, asset.origin)
    if asset.initial_velocity is not None:
        particles.velocities = trilinear_sample(asset.initial_velocity, sampler, particles.positions)

    seeder = InletSeeder(particles, particles.masses[0], ppc, config.seed) if asset.inlet is not None else None
    step_cfg = config.step_config(_load_kernel(config))
    substeps = max(1, int(round(config.frame_dt / params.dt)))
    os.makedirs(out_dir, exist_ok=True)

    def write_frame(index: int) -> str:
        name = f"frame_{index:04d}.ply"
        save_cloud(os.path.join(out_dir, name), _frame_cloud(particles))
        return name

    names = [write_frame(0)]
    pressure = np.zeros(asset.dims)
    counter = 0
    for frame in range(1, n_frames + 1):
        with StageTimer(logger, "simulate_frame", frame=frame):
            for _ in range(substeps):
                fluid = occupancy_from_points(particles.positions, asset.dims, asset.dx, asset.origin)
                grid = build_grid(fluid, solid, asset.dx, asset.origin, asset.inlet, asset.outlet)
                grid = p2g(particles, grid)
                grid.pressure = np.where(grid.active, pressure, 0.0)
                courant = cfl_number(grid, params.dt)
                if courant > 1.0:
                    if not force:
                        raise CFLViolation(courant, 1.0)
                    logger.warning("[Simulate] CFL %.2f > 1 ignored (--force)", courant)
                grid = step(grid, params, step_cfg, step_index=counter)
                pressure = grid.pressure
                particles = g2p(grid, particles)
                particles = update_deformation(particles, params.dt, counter)
                particles = advect_particles(particles, params.dt, grid, seeder, params.v_in)
                counter += 1
        names.append(write_frame(frame))

    write_json(
        os.path.join(out_dir, TRAJECTORY_FILE),
        {
            "frames": names,
            "frame_dt": config.frame_dt,
            "substeps": substeps,
            "params": params.to_dict(),
            "grid": {"dims": list(asset.dims), "dx": asset.dx, "origin": asset.origin.tolist()},
        },
    )
    logger.info("[Simulate] wrote %d frames to %s", len(names), out_dir)
    return EXIT_OK


# ----------------------------------------------------------------------
# Export
# ----------------------------------------------------------------------
SUMMARY_COLUMNS = ("frame", "particles", "centroid_x", "centroid_y", "centroid_z", "kinetic_energy")


def frame_summary(cloud: GaussianCloud) -> Dict[str, float]:
    """Particle count, centroid and kinetic energy sum(0.5 m |v|^2) of one trajectory frame."""

    for key in ("vx", "vy", "vz", "mass"):
        if key not in cloud.extra:
            raise InputParseError("<frame>", 0, f"trajectory frame lacks the {key!r} property")
    velocity = np.stack([cloud.extra["vx"], cloud.extra["vy"], cloud.extra["vz"]], axis=1)
    mass = cloud.extra["mass"]
    centroid = cloud.positions.mean(axis=0) if len(cloud) else np.zeros(3)
    return {
        "particles": len(cloud),
        "centroid_x": float(centroid[0]),
        "centroid_y": float(centroid[1]),
        "centroid_z": float(centroid[2]),
        "kinetic_energy": float(0.5 * np.sum(mass * np.sum(velocity * velocity, axis=1))),
    }


def cmd_export(trajectory_dir: str, out_dir: str) -> int:
    manifest = read_json(os.path.join(trajectory_dir, TRAJECTORY_FILE), "trajectory")
    grid_spec = manifest["grid"]
    dims = tuple(int(n) for n in grid_spec["dims"])
    dx = float(grid_spec["dx"])
    origin = np.asarray(grid_spec["origin"], dtype=np.float64)
    template = SimGrid.create(dims, dx, origin)
    os.makedirs(out_dir, exist_ok=True)

    rows = []
    for index, name in enumerate(manifest["frames"]):
        path = os.path.join(trajectory_dir, name)
        cloud = load_cloud(path)
        try:
            summary = frame_summary(cloud)
        except InputParseError as exc:
            raise InputParseError(path, exc.offset, str(exc)) from None
        rows.append({"frame": index, **summary})

        particles = ParticleSet.create(
            cloud.positions,
            velocities=np.stack([cloud.extra["vx"], cloud.extra["vy"], cloud.extra["vz"]], axis=1),
            masses=cloud.extra["mass"],
        )
        momentum, mass = scatter_to_grid(particles, template, include_affine=False)
        velocity = np.zeros_like(momentum)
        covered = mass > 0.0
        velocity[covered] = momentum[covered] / mass[covered][:, None]
        write_vgrd(os.path.join(out_dir, f"velocity_{index:04d}.vgrd"), velocity, dx, origin)

    write_rows_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS, rows)
    logger.info("[Export] summarised %d frames", len(rows))
    return EXIT_OK


__all__ = [
    "EXIT_NOT_CONVERGED",
    "EXIT_OK",
    "FluidAsset",
    "SUMMARY_COLUMNS",
    "cmd_export",
    "cmd_fit_kernel",
    "cmd_optimize",
    "cmd_reconstruct",
    "cmd_simulate",
    "frame_summary",
    "load_asset",
    "load_guidance",
    "save_asset",
]
