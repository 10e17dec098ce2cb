"""Deterministic point-cloud primitives: normalisation, FPS, kNN, augmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PointCloud:
    coords: np.ndarray
    extras: np.ndarray | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
            raise ValueError(f"coords must be (n>=1, 3), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords contain NaN or Inf")
        object.__setattr__(self, "coords", coords)
        if self.extras is not None:
            extras = np.asarray(self.extras)
            if extras.ndim != 2 or extras.shape[0] != coords.shape[0]:
                raise ValueError(f"extras must have {coords.shape[0]} rows, got {extras.shape}")
            object.__setattr__(self, "extras", extras)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def with_coords(self, coords: np.ndarray) -> "PointCloud":
        return PointCloud(coords, self.extras)


@dataclass(frozen=True)
class AugmentParams:
    scale_lo: float = 0.66
    scale_hi: float = 1.4
    shift_range: float = 0.2
    noise_sigma: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.scale_lo <= self.scale_hi:
            raise ValueError("need 0 < scale_lo <= scale_hi")
        if self.shift_range < 0 or self.noise_sigma < 0:
            raise ValueError("shift_range and noise_sigma must be non-negative")


def _coords(pc) -> np.ndarray:
    return pc.coords if isinstance(pc, PointCloud) else np.asarray(pc)


def normalize_coords(coords: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale so the farthest point has norm 1.

    A cloud whose points all coincide maps to the zero cloud.
    """
    coords = np.asarray(coords)
    if np.all(coords == coords[0]):
        return np.zeros_like(coords)
    centered = coords - coords.mean(axis=0)
    scale = np.sqrt((centered * centered).sum(axis=1)).max()
    if scale == 0:
        return np.zeros_like(coords)
    return centered / scale


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    return pc.with_coords(normalize_coords(pc.coords))


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of ``a`` (..., q, 3) and ``b`` (..., n, 3)."""
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def farthest_point_sampling(pc, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling starting at ``seed_index``.

    Each step picks the point maximising the minimum distance to the points
    already chosen; ``np.argmax`` resolves ties to the lowest index.
    """
    pts = _coords(pc)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for n={n}")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    diff = pts - pts[seed_index]
    mind = np.sqrt((diff * diff).sum(axis=1))
    mind[seed_index] = -np.inf
    for t in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[t] = nxt
        diff = pts - pts[nxt]
        mind = np.minimum(mind, np.sqrt((diff * diff).sum(axis=1)))
        mind[nxt] = -np.inf
    return chosen


def max_norm_index(pc) -> int:
    """Index of the point farthest from the origin (lowest index on ties).

    Depends on each point alone, so it follows the point under any
    reordering of the cloud; used as a permutation-stable FPS seed.
    """
    pts = _coords(pc)
    return int(np.argmax((pts * pts).sum(axis=1)))


def knn_batch(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest rows of ``points`` for every query row.

    ``points`` is (..., n, 3), ``queries`` (..., q, 3); the result is
    (..., q, k), ascending by distance with ties broken by lowest index.
    """
    n = points.shape[-2]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    dist = pairwise_distances(queries, points)
    order = np.argsort(dist, axis=-1, kind="stable")
    return order[..., :k]


def knn(pc, query, k: int) -> np.ndarray:
    pts = _coords(pc)
    return knn_batch(pts, np.asarray(query, dtype=pts.dtype).reshape(1, 3), k)[0]


def anisotropic_scale(coords: np.ndarray, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    scale = rng.uniform(lo, hi, 3)
    return (coords * scale).astype(coords.dtype)


def augment(pc: PointCloud, params: AugmentParams, rng: np.random.Generator | None = None) -> PointCloud:
    """Per-axis scale, then per-axis shift, then Gaussian jitter.

    Without an explicit ``rng`` the stream is seeded from ``params.rng_seed``.
    """
    if rng is None:
        rng = np.random.default_rng(params.rng_seed)
    return pc.with_coords(augment_coords(pc.coords, params, rng))


def augment_coords(coords: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    scale = rng.uniform(params.scale_lo, params.scale_hi, 3)
    shift = rng.uniform(-params.shift_range, params.shift_range, 3)
    out = coords * scale + shift
    if params.noise_sigma > 0:
        out = out + rng.normal(0.0, params.noise_sigma, coords.shape)
    return out.astype(coords.dtype)
