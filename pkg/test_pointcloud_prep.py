from itertools import product

import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st

from fluid_twin.pointcloud_prep import (
    FrameBatch,
    GaussianCloud,
    batch_size_from_score,
    cloud_from_covariance,
    fill_interior,
    interior_voids,
    motion_score,
    occupancy,
    prune,
    psnr,
    select_batch_size,
    union_frames,
)


def _hollow_cube(n=6, dx=0.1):
    cells = [c for c in product(range(n), repeat=3) if min(c) == 0 or max(c) == n - 1]
    positions = (np.array(cells, dtype=np.float64) + 0.5) * dx
    features = np.tile([0.2, 0.4, 0.6], (len(cells), 1))
    return GaussianCloud.isotropic(positions, dx / 4.0, opacity=1.0, features=features)


# ----------------------------------------------------------------------
# Cloud container
# ----------------------------------------------------------------------
def test_covariance_round_trips_through_scales_and_rotations():
    rng = np.random.default_rng(0)
    n = 12
    rot = rng.standard_normal((n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    cloud = GaussianCloud(rng.random((n, 3)), np.ones(n), rng.uniform(0.01, 0.1, (n, 3)), rot, np.zeros((n, 3)))
    again = cloud_from_covariance(cloud.positions, cloud.covariance, cloud.opacity, cloud.features)
    np.testing.assert_allclose(again.covariance, cloud.covariance, atol=1e-12)
    np.testing.assert_allclose(np.sort(again.scales, axis=1), np.sort(cloud.scales, axis=1), rtol=1e-9)


def test_cloud_rejects_mismatched_features():
    with pytest.raises(ValueError):
        GaussianCloud(np.zeros((2, 3)), np.ones(2), np.ones((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)), np.zeros((3, 3)))


def test_empty_cloud_has_empty_covariance():
    assert GaussianCloud.empty().covariance.shape == (0, 3, 3)


# ----------------------------------------------------------------------
# Prune and fill
# ----------------------------------------------------------------------
def test_prune_drops_faint_and_elongated_points():
    positions = np.zeros((3, 3))
    scales = np.array([[0.1, 0.1, 0.1], [0.1, 0.1, 0.1], [1.0, 0.1, 0.1]])
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (3, 1))
    cloud = GaussianCloud(positions, [0.9, 0.05, 0.9], scales, rotations, np.zeros((3, 3)))
    kept = prune(cloud, opacity_min=0.1, anisotropy_max=10.0)
    assert len(kept) == 1
    np.testing.assert_allclose(kept.scales[0], 0.1)
    with pytest.raises(ValueError):
        prune(cloud, opacity_min=0.0)


def test_fill_interior_closes_a_hollow_cube():
    shell = _hollow_cube()
    filled = fill_interior(shell, 0.1, occupancy_threshold=0.3)
    assert len(filled) - len(shell) == 4**3
    inserted = filled.positions[len(shell):]
    assert np.all((inserted > 0.1) & (inserted < 0.5))
    np.testing.assert_allclose(filled.features[len(shell):], np.tile([0.2, 0.4, 0.6], (64, 1)))
    np.testing.assert_allclose(filled.opacity[len(shell):], 1.0)


def test_fill_interior_leaves_open_shapes_alone():
    shell = _hollow_cube()
    open_top = shell.subset(shell.positions[:, 1] < 0.5)
    assert len(fill_interior(open_top, 0.1)) == len(open_top)


def test_interior_voids_ignores_cells_reaching_the_border():
    occupied = np.zeros((5, 5, 5), dtype=bool)
    occupied[1:4, 1:4, 1:4] = True
    occupied[2, 2, 2] = False
    voids = interior_voids(occupied)
    assert voids.sum() == 1 and voids[2, 2, 2]


# ----------------------------------------------------------------------
# Frame union
# ----------------------------------------------------------------------
@given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(min_value=1, max_value=4))
def test_union_occupancy_is_the_union_of_frame_occupancies(seed, n_frames):
    rng = np.random.default_rng(seed)
    clouds = [
        GaussianCloud.isotropic(rng.uniform(0.0, 0.6, (int(rng.integers(0, 30)), 3)), 0.02, rng.uniform(0.1, 1.0))
        for _ in range(n_frames)
    ]
    merged = union_frames(FrameBatch(clouds), 0.1)
    expected = set()
    for cloud in clouds:
        expected |= {tuple(row) for row in occupancy(cloud, 0.05)}
    assert {tuple(row) for row in occupancy(merged, 0.05)} == expected
    assert len(merged) == len(expected)


def test_union_keeps_the_most_opaque_point_per_voxel():
    a = GaussianCloud.isotropic([[0.01, 0.01, 0.01]], 0.01, opacity=0.3)
    b = GaussianCloud.isotropic([[0.02, 0.02, 0.02]], 0.01, opacity=0.9)
    merged = union_frames(FrameBatch([a, b]), 0.1)
    assert len(merged) == 1 and merged.opacity[0] == pytest.approx(0.9)
    with pytest.raises(ValueError):
        union_frames(FrameBatch([]), 0.1)


# ----------------------------------------------------------------------
# Batch sizing
# ----------------------------------------------------------------------
def test_psnr_is_capped_and_matches_closed_form():
    a = np.array([0.0, 1.0])
    assert psnr(a, a, cap_db=60.0) == 60.0
    assert psnr(a, np.zeros(2), cap_db=60.0) == pytest.approx(10.0 * np.log10(2.0))


def test_static_footage_gets_the_longest_batch():
    frame = np.random.default_rng(2).random((8, 8))
    assert motion_score([frame, frame, frame]) == 0.0
    assert select_batch_size([frame, frame], n_min=2, n_max=16) == 16
    with pytest.raises(ValueError):
        motion_score([frame])


def test_motion_score_grows_with_change():
    rng = np.random.default_rng(3)
    base = rng.random((16, 16))
    small = motion_score([base, base + 1e-2 * rng.standard_normal(base.shape)])
    large = motion_score([base, rng.random((16, 16))])
    assert 0.0 < small < large <= 1.0


def test_motion_score_accepts_clouds():
    cloud = _hollow_cube()
    assert motion_score([cloud, cloud]) == 0.0


@pytest.mark.parametrize("score, expected", [(0.5, 2), (0.25, 4), (0.1, 10), (0.01, 16), (10.0, 2)])
def test_batch_size_from_score(score, expected):
    assert batch_size_from_score(score, 2, 16, 1.0) == expected


def test_batch_bounds_are_validated():
    with pytest.raises(ValueError):
        batch_size_from_score(0.1, 0, 4, 1.0)
    with pytest.raises(ValueError):
        batch_size_from_score(0.1, 5, 4, 1.0)
