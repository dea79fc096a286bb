"""Gaussian point-cloud cleanup: pruning, interior fill, frame union and batch sizing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from fluid_twin.config import DEFAULT_BATCH, DEFAULT_FILL, DEFAULT_PRUNE

logger = logging.getLogger(__name__)

_FILL_PADDING_CELLS = 2
_COV_JITTER = 1e-12


@dataclass
class GaussianCloud:
    """Per-point Gaussians with activated opacity/scales and (w, x, y, z) rotations."""

    positions: np.ndarray
    opacity: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    features: np.ndarray
    extra: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        features = np.asarray(self.features, dtype=np.float64)
        self.features = features if features.ndim == 2 else features.reshape(n, -1)
        if len(self.features) != n:
            raise ValueError(f"features have {len(self.features)} rows, expected {n}")
        self.extra = {key: np.asarray(value, dtype=np.float64).reshape(n) for key, value in self.extra.items()}

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls, feature_width: int = 3) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, feature_width)))

    @classmethod
    def isotropic(
        cls,
        positions: np.ndarray,
        radius: float,
        opacity: Union[float, np.ndarray] = 1.0,
        features: Optional[np.ndarray] = None,
    ) -> "GaussianCloud":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        return cls(
            positions=positions,
            opacity=np.broadcast_to(np.asarray(opacity, dtype=np.float64), (n,)).copy(),
            scales=np.full((n, 3), float(radius)),
            rotations=rotations,
            features=np.zeros((n, 3)) if features is None else features,
        )

    @property
    def covariance(self) -> np.ndarray:
        """R diag(s^2) R^T per point."""

        if len(self) == 0:
            return np.zeros((0, 3, 3))
        quats = self.rotations.copy()
        norms = np.linalg.norm(quats, axis=1)
        quats[norms == 0.0] = (1.0, 0.0, 0.0, 0.0)
        rot = Rotation.from_quat(quats[:, [1, 2, 3, 0]]).as_matrix()
        return np.einsum("nij,nj,nkj->nik", rot, self.scales**2, rot)

    def subset(self, keep: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions[keep],
            opacity=self.opacity[keep],
            scales=self.scales[keep],
            rotations=self.rotations[keep],
            features=self.features[keep],
            extra={key: value[keep] for key, value in self.extra.items()},
        )

    @classmethod
    def concatenate(cls, clouds: Sequence["GaussianCloud"]) -> "GaussianCloud":
        if not clouds:
            return cls.empty()
        keys = set(clouds[0].extra)
        for cloud in clouds[1:]:
            keys &= set(cloud.extra)
        return cls(
            positions=np.concatenate([c.positions for c in clouds]),
            opacity=np.concatenate([c.opacity for c in clouds]),
            scales=np.concatenate([c.scales for c in clouds]),
            rotations=np.concatenate([c.rotations for c in clouds]),
            features=np.concatenate([c.features for c in clouds]),
            extra={key: np.concatenate([c.extra[key] for c in clouds]) for key in sorted(keys)},
        )


def cloud_from_covariance(
    positions: np.ndarray,
    covariance: np.ndarray,
    opacity: np.ndarray,
    features: np.ndarray,
    extra: Optional[Dict[str, np.ndarray]] = None,
) -> GaussianCloud:
    """Scales and rotations from the eigen-decomposition of SPD covariances."""

    covariance = np.asarray(covariance, dtype=np.float64).reshape(-1, 3, 3)
    eigvals, eigvecs = np.linalg.eigh(0.5 * (covariance + np.transpose(covariance, (0, 2, 1))))
    flip = np.linalg.det(eigvecs) < 0.0
    eigvecs[flip, :, 2] *= -1.0
    if len(covariance):
        xyzw = Rotation.from_matrix(eigvecs).as_quat()
        rotations = xyzw[:, [3, 0, 1, 2]]
    else:
        rotations = np.zeros((0, 4))
    return GaussianCloud(
        positions=positions,
        opacity=opacity,
        scales=np.sqrt(np.clip(eigvals, 0.0, None)),
        rotations=rotations,
        features=features,
        extra=dict(extra or {}),
    )


@dataclass
class FrameBatch:
    clouds: List[GaussianCloud]
    similarity_scores: List[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.clouds)


# ----------------------------------------------------------------------
# Prune and fill
# ----------------------------------------------------------------------
def prune(
    cloud: GaussianCloud,
    opacity_min: float = DEFAULT_PRUNE["opacity_min"],
    anisotropy_max: float = DEFAULT_PRUNE["anisotropy_max"],
) -> GaussianCloud:
    """Drop faint points and points whose covariance is too elongated."""

    if opacity_min <= 0.0 or anisotropy_max <= 0.0:
        raise ValueError("prune thresholds must be positive")
    if len(cloud) == 0:
        return cloud
    eig = np.linalg.eigvalsh(cloud.covariance)
    ratio = eig[:, 2] / np.maximum(eig[:, 0], _COV_JITTER)
    keep = (cloud.opacity >= opacity_min) & (ratio <= anisotropy_max)
    removed = int((~keep).sum())
    if not keep.any():
        logger.warning("[Prune] every point was removed (%d)", removed)
    elif removed:
        logger.info("[Prune] removed %d of %d points", removed, len(cloud))
    return cloud.subset(keep)


def _density_grid(cloud: GaussianCloud, dx: float) -> Tuple[np.ndarray, np.ndarray]:
    low = np.floor(cloud.positions.min(axis=0) / dx) * dx - _FILL_PADDING_CELLS * dx
    high = cloud.positions.max(axis=0)
    dims = np.floor((high - low) / dx).astype(np.int64) + 1 + _FILL_PADDING_CELLS
    density = np.zeros(tuple(dims))
    cell = np.floor((cloud.positions - low) / dx).astype(np.int64)
    precision = np.linalg.inv(cloud.covariance + np.eye(3) * _COV_JITTER)
    for offset in np.ndindex(3, 3, 3):
        node = cell + np.asarray(offset) - 1
        inside = np.all((node >= 0) & (node < dims), axis=1)
        delta = low + (node + 0.5) * dx - cloud.positions
        mahalanobis = np.einsum("ni,nij,nj->n", delta, precision, delta)
        weight = cloud.opacity * np.exp(-0.5 * mahalanobis)
        np.add.at(density, tuple(node[inside].T), weight[inside])
    return density, low


def interior_voids(occupied: np.ndarray) -> np.ndarray:
    """Unoccupied cells that no 6-connected path links to the domain boundary."""

    free = ~occupied
    labels, _ = ndimage.label(free, structure=ndimage.generate_binary_structure(3, 1))
    faces = np.concatenate(
        [
            labels[0].ravel(), labels[-1].ravel(),
            labels[:, 0].ravel(), labels[:, -1].ravel(),
            labels[:, :, 0].ravel(), labels[:, :, -1].ravel(),
        ]
    )
    exterior = np.unique(faces[faces > 0])
    return free & ~np.isin(labels, exterior)


def fill_interior(
    cloud: GaussianCloud,
    dx: float,
    occupancy_threshold: float = DEFAULT_FILL["occupancy_threshold"],
) -> GaussianCloud:
    """Insert one Gaussian at the centre of every enclosed empty cell."""

    if not dx > 0.0:
        raise ValueError(f"dx must be positive, got {dx}")
    if len(cloud) == 0:
        return cloud
    density, low = _density_grid(cloud, dx)
    occupied = density >= occupancy_threshold * density.max()
    voids = np.argwhere(interior_voids(occupied))
    if len(voids) == 0:
        return cloud

    centres = low + (voids + 0.5) * dx
    _, nearest = cKDTree(cloud.positions).query(centres)
    inserted = GaussianCloud.isotropic(centres, dx / 4.0, opacity=1.0, features=cloud.features[nearest])
    inserted.extra = {key: value[nearest] for key, value in cloud.extra.items()}
    logger.info("[Fill] inserted %d interior points", len(inserted))
    return GaussianCloud.concatenate([cloud, inserted])


# ----------------------------------------------------------------------
# Cross-frame union and batch sizing
# ----------------------------------------------------------------------
def occupancy(cloud: GaussianCloud, dx: float, origin: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Unique (M, 3) integer voxel indices touched by the cloud at spacing dx."""

    if len(cloud) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    index = np.floor((cloud.positions - np.asarray(origin, dtype=np.float64)) / dx).astype(np.int64)
    return np.unique(index, axis=0)


def union_frames(batch: FrameBatch, dx: float) -> GaussianCloud:
    """Concatenate the frames and keep the most opaque point per dx/2 voxel."""

    if batch.n == 0:
        raise ValueError("union_frames needs at least one cloud")
    merged = GaussianCloud.concatenate(batch.clouds)
    if len(merged) == 0:
        return merged
    keys = np.floor(merged.positions / (0.5 * dx)).astype(np.int64)
    order = np.argsort(-merged.opacity, kind="stable")
    _, first = np.unique(keys[order], axis=0, return_index=True)
    keep = np.sort(order[first])
    logger.debug("[Union] %d frames, %d -> %d points", batch.n, len(merged), len(keep))
    return merged.subset(keep)


def _frame_signal(frame: Union[np.ndarray, GaussianCloud], dx: float, low: np.ndarray, dims: Tuple[int, ...]) -> np.ndarray:
    if isinstance(frame, GaussianCloud):
        signal = np.zeros(dims)
        if len(frame):
            index = np.clip(np.floor((frame.positions - low) / dx).astype(np.int64), 0, np.asarray(dims) - 1)
            np.add.at(signal, tuple(index.T), frame.opacity)
        return signal
    return np.asarray(frame, dtype=np.float64)


def psnr(a: np.ndarray, b: np.ndarray, cap_db: float = DEFAULT_BATCH["psnr_cap_db"]) -> float:
    mse = float(np.mean((a - b) ** 2))
    peak = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), 1e-12)
    if mse == 0.0:
        return float(cap_db)
    return float(min(cap_db, 10.0 * np.log10(peak * peak / mse)))


def motion_score(frames: Sequence[Union[np.ndarray, GaussianCloud]], cap_db: float = DEFAULT_BATCH["psnr_cap_db"], dx: float = 0.05) -> float:
    """Mean squared shortfall of adjacent-frame PSNR below the cap, relative to the cap."""

    if len(frames) < 2:
        raise ValueError("motion_score needs at least two frames")
    low = np.zeros(3)
    dims: Tuple[int, ...] = ()
    clouds = [f for f in frames if isinstance(f, GaussianCloud) and len(f)]
    if clouds:
        points = np.concatenate([c.positions for c in clouds])
        low = points.min(axis=0)
        dims = tuple(int(n) for n in np.floor((points.max(axis=0) - low) / dx).astype(np.int64) + 1)
    signals = [_frame_signal(f, dx, low, dims) for f in frames]
    values = np.array([psnr(signals[i], signals[i + 1], cap_db) for i in range(len(signals) - 1)])
    return float(np.mean((cap_db - values) ** 2) / cap_db**2)


def batch_size_from_score(score: float, n_min: int, n_max: int, c: float, eps: float = 1e-9) -> int:
    if n_min < 1 or n_max < n_min:
        raise ValueError(f"invalid batch bounds [{n_min}, {n_max}]")
    raw = c / (max(score, 0.0) + eps)
    return int(np.clip(round(raw), n_min, n_max)) if np.isfinite(raw) else int(n_max)


def select_batch_size(
    frames: Sequence[Union[np.ndarray, GaussianCloud]],
    n_min: int = DEFAULT_BATCH["n_min"],
    n_max: int = DEFAULT_BATCH["n_max"],
    c: float = DEFAULT_BATCH["c"],
    cap_db: float = DEFAULT_BATCH["psnr_cap_db"],
) -> int:
    """Steadier footage gets longer batches: N = clamp(round(c / (score + eps)))."""

    score = motion_score(frames, cap_db)
    size = batch_size_from_score(score, n_min, n_max, c)
    logger.info("[Batch] motion score %.4f -> N=%d", score, size)
    return size


__all__ = [
    "FrameBatch",
    "GaussianCloud",
    "batch_size_from_score",
    "cloud_from_covariance",
    "fill_interior",
    "interior_voids",
    "motion_score",
    "occupancy",
    "prune",
    "psnr",
    "select_batch_size",
    "union_frames",
]
