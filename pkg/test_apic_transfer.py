import numpy as np
import pytest

from conftest import channel_grid
from fluid_twin.apic_transfer import (
    InletSeeder,
    ParticleSet,
    advect_particles,
    g2p,
    momentum_of,
    p2g,
    particles_from_cloud,
    scatter_to_grid,
    update_deformation,
)
from fluid_twin.errors import ParticleBoundsError, SimulationDiverged
from fluid_twin.grid_core import CellType, SimGrid
from fluid_twin.pointcloud_prep import GaussianCloud


def _fluid_grid(n=12, dx=0.1):
    return SimGrid.create((n, n, n), dx, cells=np.full((n, n, n), CellType.FLUID, dtype=np.int8))


def _affine_particles(rng, count=200, low=0.3, high=0.9):
    positions = rng.uniform(low, high, size=(count, 3))
    a = rng.standard_normal((3, 3))
    c = rng.standard_normal(3)
    particles = ParticleSet.create(positions, velocities=positions @ a.T + c, masses=rng.uniform(0.5, 2.0, count))
    particles.affine = np.broadcast_to(a, (count, 3, 3)).copy()
    return particles, a, c


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_round_trip_is_exact_for_affine_velocity(seed):
    rng = np.random.default_rng(seed)
    grid = _fluid_grid()
    particles, a, c = _affine_particles(rng)

    out = g2p(p2g(particles, grid), particles)
    np.testing.assert_allclose(out.velocities, particles.positions @ a.T + c, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(out.affine, np.broadcast_to(a, out.affine.shape), rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("include_affine", [False, True])
def test_scatter_conserves_momentum(include_affine):
    particles, _, _ = _affine_particles(np.random.default_rng(5))
    momentum, mass = scatter_to_grid(particles, _fluid_grid(), include_affine)
    np.testing.assert_allclose(momentum.reshape(-1, 3).sum(axis=0), momentum_of(particles), rtol=1e-10)
    assert mass.sum() == pytest.approx(particles.masses.sum())


def test_cells_without_mass_get_zero_velocity():
    grid = _fluid_grid()
    particles = ParticleSet.create([[0.55, 0.55, 0.55]], velocities=[[1.0, 2.0, 3.0]])
    out = p2g(particles, grid)
    assert np.all(out.velocity[0, 0, 0] == 0.0)
    np.testing.assert_allclose(out.velocity[5, 5, 5], [1.0, 2.0, 3.0])


def test_particles_outside_the_padded_grid_are_rejected():
    grid = _fluid_grid(4)
    particles = ParticleSet.create([[-1.0, 0.2, 0.2]])
    with pytest.raises(ParticleBoundsError):
        p2g(particles, grid)
    with pytest.raises(ParticleBoundsError):
        g2p(grid, particles)


def test_particle_arrays_must_share_length():
    with pytest.raises(ValueError):
        ParticleSet.create(np.zeros((3, 3)), velocities=np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ParticleSet.create(np.zeros((1, 3)), masses=np.zeros(1))


def test_advection_removes_particles_past_the_outlet_and_clamps_the_rest():
    grid = channel_grid()
    particles = ParticleSet.create(
        [[0.55, 0.25, 0.25], [0.3, 0.25, 0.25]], velocities=[[1.0, 0.0, 0.0], [0.0, -50.0, 0.0]]
    )
    moved = advect_particles(particles, 0.1, grid)
    assert len(moved) == 1
    low, high = grid.bounds()
    assert np.all(moved.positions >= low) and np.all(moved.positions <= high)
    assert moved.positions[0, 1] == pytest.approx(low[1], abs=1e-6)


def test_inlet_seeder_tops_up_inlet_cells():
    grid = channel_grid()
    empty = ParticleSet.create(np.zeros((0, 3)))
    seeder = InletSeeder(empty, mass=0.125, per_cell=8, seed=3)
    seeded = seeder.seed(empty, grid, [0.7, 0.0, 0.0])
    inlet_cells = int((grid.cells == CellType.INLET).sum())
    assert len(seeded) == 8 * inlet_cells
    np.testing.assert_allclose(seeded.velocities, np.broadcast_to([0.7, 0.0, 0.0], (len(seeded), 3)))
    index = np.floor(seeded.positions / grid.dx).astype(int)
    assert np.all(grid.cells[tuple(index.T)] == CellType.INLET)
    assert len(seeder.seed(seeded, grid, [0.7, 0.0, 0.0])) == len(seeded)


def test_deformation_update_scales_covariance():
    particles = ParticleSet.create([[0.5, 0.5, 0.5]], covariance=np.eye(3)[None] * 4e-4)
    same = update_deformation(particles, 0.1)
    np.testing.assert_allclose(same.covariance, particles.covariance)

    particles.affine = np.eye(3)[None] * 2.0
    stretched = update_deformation(particles, 0.1)
    np.testing.assert_allclose(stretched.covariance, particles.rest_covariance * 1.2**2)
    np.testing.assert_allclose(stretched.deformation[0], np.eye(3) * 1.2)


def test_non_finite_affine_matrix_is_reported():
    particles = ParticleSet.create([[0.5, 0.5, 0.5]])
    particles.affine[0, 0, 0] = np.inf
    with pytest.raises(SimulationDiverged):
        update_deformation(particles, 0.1, step_index=4)


def test_particles_from_cloud_carry_mass_and_appearance():
    cloud = GaussianCloud.isotropic(np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]), 0.02, opacity=0.8)
    particles = particles_from_cloud(cloud, rho=1000.0, dx=0.1, particles_per_cell=8)
    np.testing.assert_allclose(particles.masses, 1000.0 * 0.1**3 / 8)
    np.testing.assert_allclose(particles.opacity, 0.8)
    np.testing.assert_allclose(particles.covariance[0], np.eye(3) * 0.02**2)
