import numpy as np
import pytest

from conftest import block_grid, channel_grid
from fluid_twin.errors import GridError
from fluid_twin.grid_core import CellType, SimGrid, build_grid
from fluid_twin.surface_recon import (
    BoundaryLayer,
    CameraModel,
    MainstreamSpec,
    ScreenObservation,
    constraint_target,
    default_fixed_cells,
    depth_change,
    estimate_mainstream_direction,
    mainstream_interpolate,
    ndc_grid,
    project_2d_constraint,
    splat_surface_velocities,
    unproject_to_3d,
    volumetric_projection,
    wall_corrected_initialization,
    wall_profile,
)


def _observation(shape=(4, 5), depth=2.0, frame_dt=0.5, camera=None):
    flow = np.zeros(shape + (2,))
    flow[...] = [0.1, -0.2]
    mask = np.ones(shape, dtype=bool)
    return ScreenObservation(flow, np.full(shape, depth), mask, mask, camera or CameraModel(), frame_dt)


# ----------------------------------------------------------------------
# Boundary layer
# ----------------------------------------------------------------------
def test_wall_profile_values():
    assert wall_profile(0.05, 0.1, 2.0) == pytest.approx(0.6875 * 2.0)
    assert wall_profile(0.0, 0.1, 2.0) == 0.0
    assert wall_profile(0.3, 0.1, 2.0) == 2.0
    np.testing.assert_allclose(wall_profile(np.array([0.0, 0.1]), 0.1, np.array([1.0, 3.0])), [0.0, 3.0])


@pytest.mark.parametrize("y, delta", [(-0.1, 0.1), (0.1, 0.0)])
def test_wall_profile_rejects_bad_input(y, delta):
    with pytest.raises(ValueError):
        wall_profile(y, delta, 1.0)


def test_boundary_layer_thickness_depends_on_medium():
    assert BoundaryLayer.for_medium("liquid", 0.1).delta == pytest.approx(0.4)
    assert BoundaryLayer.for_medium("gas", 0.1).delta == pytest.approx(0.025)
    with pytest.raises(GridError):
        BoundaryLayer(delta=0.0)


# ----------------------------------------------------------------------
# Screen-space fill
# ----------------------------------------------------------------------
def test_mainstream_fill_reproduces_uniform_flow():
    shape = (12, 14)
    vel = np.zeros(shape + (3,))
    vel[...] = [0.1, 0.0, 0.02]
    detected = np.ones(shape, dtype=bool)
    detected[4:8, 5:9] = False
    result = mainstream_interpolate(vel, detected, MainstreamSpec(direction=[1.0, 0.0], radius=3, sigma=2.0))
    assert not result.fallback.any()
    np.testing.assert_allclose(result.velocity, vel)


def test_mainstream_fill_falls_back_when_neighbours_oppose_the_stream():
    shape = (9, 9)
    vel = np.zeros(shape + (3,))
    vel[...] = [-0.2, 0.0, 0.0]
    detected = np.ones(shape, dtype=bool)
    detected[4, 4] = False
    result = mainstream_interpolate(vel, detected, MainstreamSpec(direction=[1.0, 0.0], radius=2, sigma=1.0))
    assert result.fallback.sum() == 1
    np.testing.assert_allclose(result.velocity[4, 4], [0.2, 0.0, 0.0])


def test_mainstream_spec_validation():
    with pytest.raises(GridError):
        MainstreamSpec(direction=[0.0, 0.0])
    with pytest.raises(GridError):
        MainstreamSpec(radius=0)


def test_estimate_mainstream_direction_follows_the_long_axis():
    mask = np.zeros((20, 50), dtype=bool)
    mask[5:15, 5:45] = True
    np.testing.assert_allclose(estimate_mainstream_direction(mask), [1.0, 0.0], atol=1e-9)
    flow = np.zeros((20, 50, 2))
    flow[..., 0] = -1.0
    np.testing.assert_allclose(estimate_mainstream_direction(mask, flow), [-1.0, 0.0], atol=1e-9)


# ----------------------------------------------------------------------
# Depth and the screen constraint
# ----------------------------------------------------------------------
def test_ndc_grid_orientation():
    u, v = ndc_grid((2, 4))
    np.testing.assert_allclose(u[0], [-0.75, -0.25, 0.25, 0.75])
    np.testing.assert_allclose(v[:, 0], [0.5, -0.5])


def test_depth_change_without_flow():
    depth0 = np.full((5, 6), 2.0)
    np.testing.assert_allclose(depth_change(depth0, depth0 + 0.1, np.zeros((5, 6, 2)), frame_dt=0.5), 0.2)


def test_constraint_target_for_uniform_depth_motion():
    vz = np.full((6, 7), 0.3)
    np.testing.assert_allclose(constraint_target(vz, np.full((6, 7), 2.0)), -2.0 * 0.3 / 2.0)


def _shear_field(shape, rng):
    vel = np.zeros(shape + (2,))
    vel[..., 0] = rng.standard_normal(shape[0])[:, None]
    vel[..., 1] = rng.standard_normal(shape[1])[None, :]
    return vel


def test_constraint_projection_repairs_modifiable_pixels_only():
    rng = np.random.default_rng(21)
    shape = (16, 16)
    clean = _shear_field(shape, rng)
    hole = np.zeros(shape, dtype=bool)
    hole[5:11, 5:11] = True
    noisy = clean.copy()
    noisy[hole] += 0.5 * rng.standard_normal((int(hole.sum()), 2))

    result = project_2d_constraint(noisy, np.zeros(shape), np.full(shape, 2.0), iters=500, modifiable=hole, tol=1e-12)
    assert result.initial_residual > 0.0
    assert result.final_residual <= 0.1 * result.initial_residual
    np.testing.assert_array_equal(result.vel2d[~hole], noisy[~hole])


def test_constraint_projection_skips_satisfied_fields():
    shape = (10, 12)
    clean = _shear_field(shape, np.random.default_rng(22))
    result = project_2d_constraint(clean, np.zeros(shape), np.ones(shape), tol=1e-9)
    assert result.converged and result.iterations == 0
    np.testing.assert_array_equal(result.vel2d, clean)


def test_constraint_projection_needs_positive_depth():
    with pytest.raises(GridError):
        project_2d_constraint(np.zeros((4, 4, 2)), np.zeros((4, 4)), np.zeros((4, 4)))


# ----------------------------------------------------------------------
# Unprojection
# ----------------------------------------------------------------------
def test_unproject_with_identity_camera():
    obs = _observation()
    dz = np.full(obs.shape, 0.3)
    points, velocities, pixels = unproject_to_3d(obs.flow, obs.depth, obs, dz=dz)
    u, v = ndc_grid(obs.shape)
    assert len(points) == 20
    np.testing.assert_allclose(points[:, 0], u[tuple(pixels.T)])
    np.testing.assert_allclose(points[:, 1], v[tuple(pixels.T)])
    np.testing.assert_allclose(points[:, 2], 2.0)
    np.testing.assert_allclose(velocities, np.broadcast_to([0.2, -0.4, 0.6], (20, 3)))


def test_unproject_undoes_screen_transform():
    camera = CameraModel(screen_scale=[2.0, 2.0], screen_translation=[0.5, 0.0])
    obs = _observation(camera=camera, frame_dt=1.0)
    _, velocities, _ = unproject_to_3d(obs.flow, obs.depth, obs)
    np.testing.assert_allclose(velocities, np.broadcast_to([0.05, -0.1, 0.0], (20, 3)))


def test_unproject_rejects_degenerate_cameras():
    obs = _observation(camera=CameraModel(screen_scale=[0.0, 1.0]))
    with pytest.raises(GridError):
        unproject_to_3d(obs.flow, obs.depth, obs)
    obs = _observation(camera=CameraModel(world_to_camera=np.zeros((4, 4))))
    with pytest.raises(GridError):
        unproject_to_3d(obs.flow, obs.depth, obs)


def test_screen_observation_validation():
    mask = np.ones((3, 3), dtype=bool)
    detected = mask.copy()
    fluid = mask.copy()
    fluid[0, 0] = False
    with pytest.raises(GridError):
        ScreenObservation(np.zeros((3, 3, 2)), np.ones((3, 3)), fluid, detected)
    with pytest.raises(GridError):
        ScreenObservation(np.zeros((3, 3, 2)), np.zeros((3, 3)), mask, detected)
    with pytest.raises(GridError):
        ScreenObservation(np.zeros((3, 4, 2)), np.ones((3, 3)), mask, detected)


# ----------------------------------------------------------------------
# Volumetric reconstruction
# ----------------------------------------------------------------------
def test_splat_averages_points_and_spreads_to_empty_surface_cells():
    grid = block_grid(6, 0.1, margin=1)
    points = np.array([[0.15, 0.15, 0.15], [0.12, 0.18, 0.11]])
    out = splat_surface_velocities(grid, points, np.array([[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]))
    surface = grid.cells == CellType.SURFACE
    np.testing.assert_allclose(out.velocity[surface], np.broadcast_to([2.0, 0.0, 0.0], (int(surface.sum()), 3)))
    assert np.all(out.velocity[grid.cells == CellType.FLUID] == 0.0)


def test_wall_corrected_initialization_uses_the_boundary_layer():
    grid = channel_grid()
    grid.velocity[grid.cells == CellType.SURFACE] = [2.0, 0.0, 0.0]
    out = wall_corrected_initialization(grid, [1.0, 0.0, 0.0], delta=0.4)
    near = wall_profile(0.05, 0.4, 2.0)
    far = wall_profile(0.15, 0.4, 2.0)
    np.testing.assert_allclose(out.velocity[1:5, 1, :, 0], near)
    np.testing.assert_allclose(out.velocity[1:5, 2, :, 0], far)
    assert np.all(out.velocity[1:5, 1:3, :, 1:] == 0.0)


def _solid_box(n=10):
    solid = np.ones((n, n, n), dtype=bool)
    solid[1:-1, 1:-1, 1:-1] = False
    return build_grid(~solid, solid, 0.1)


def test_default_fixed_cells_hold_the_wall_layer():
    grid = _solid_box()
    fixed = default_fixed_cells(grid.cells)
    assert int((~fixed).sum()) == 6**3
    assert np.all(fixed[grid.cells == CellType.SOLID])


def test_volumetric_projection_removes_divergence_of_free_cells():
    n = 10
    grid = SimGrid.create((n, n, n), 0.1, cells=np.full((n, n, n), CellType.FLUID, dtype=np.int8))
    centres = (np.indices((n, n, n)).transpose(1, 2, 3, 0) + 0.5) * 0.1
    grid.velocity[..., 0] = centres[..., 1]
    grid.velocity[..., 1] = -2.0 * centres[..., 2]
    grid.velocity[..., 2] = 0.5 * centres[..., 0]
    fixed = np.ones((n, n, n), dtype=bool)
    fixed[1:-1, 1:-1, 1:-1] = False
    grid.velocity[~fixed] += 0.3 * np.random.default_rng(31).standard_normal((int((~fixed).sum()), 3))

    report = volumetric_projection(grid, iters=500, tol=1e-12, fixed=fixed)
    assert report.initial_residual > 0.0
    assert report.final_residual <= report.initial_residual / 100.0
    assert len(report.history) == report.iterations + 1
    np.testing.assert_array_equal(report.grid.velocity[fixed], grid.velocity[fixed])


def test_volumetric_projection_inside_walls_keeps_fixed_cells():
    grid = _solid_box()
    fixed = default_fixed_cells(grid.cells)
    grid.velocity[~fixed] = np.random.default_rng(32).standard_normal((int((~fixed).sum()), 3))
    report = volumetric_projection(grid, iters=500, tol=1e-12)
    assert report.final_residual <= report.initial_residual / 100.0
    np.testing.assert_array_equal(report.grid.velocity[fixed], grid.velocity[fixed])
