"""Local areas around center points, their metric features, and the g2 encoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import LayerParams, Tensor, as_tensor, max_reduce, mlp, reshape
from .cpl import ConfigError
from .geometry import PointCloud, knn_batch


@dataclass
class LocalArea:
    center_index: int
    neighbor_indices: np.ndarray
    rel_coords: np.ndarray
    metric_feats: np.ndarray | None = None

    @property
    def k(self) -> int:
        return len(self.neighbor_indices)


def group(points: np.ndarray, centers: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """kNN grouping for a batch: returns neighbor indices and center-relative coords.

    ``points`` is (B, n, 3), ``centers`` (B, m, 3); outputs are (B, m, k) and
    (B, m, k, 3).
    """
    if k > points.shape[-2]:
        raise ValueError(f"k={k} exceeds point count {points.shape[-2]}")
    idx = knn_batch(points, centers, k)
    b = np.arange(points.shape[0])[:, None, None]
    rel = points[b, idx] - centers[:, :, None, :]
    return idx, rel


def build_local_areas(pc, centers, k: int, with_metrics: bool = True) -> list[LocalArea]:
    pts = pc.coords if isinstance(pc, PointCloud) else np.asarray(pc)
    centers = np.asarray(centers, dtype=pts.dtype).reshape(-1, 3)
    idx, rel = group(pts[None], centers[None], k)
    phi = metric_features_batch(rel)[0] if with_metrics else None
    return [LocalArea(i, idx[0, i], rel[0, i], None if phi is None else phi[i])
            for i in range(len(centers))]


def metric_features_batch(rel: np.ndarray) -> np.ndarray:
    """Distance-to-center, farthest-in-area and area diameter for every row.

    ``rel`` is (..., k, 3) center-relative coordinates; the result is
    (..., k, 3). Pairwise maxima include the row itself, which is harmless.
    """
    phi1 = np.sqrt((rel * rel).sum(axis=-1))
    # chunk over the leading axes to bound the (k, k, 3) temporaries
    flat = rel.reshape((-1,) + rel.shape[-2:])
    phi2 = np.empty(flat.shape[:-1], dtype=rel.dtype)
    chunk = max(1, 2_000_000 // max(1, flat.shape[1] ** 2 * 3))
    for s in range(0, flat.shape[0], chunk):
        part = flat[s:s + chunk]
        diff = part[:, :, None, :] - part[:, None, :, :]
        phi2[s:s + chunk] = np.sqrt((diff * diff).sum(axis=-1)).max(axis=-1)
    phi2 = phi2.reshape(rel.shape[:-1])
    phi3 = np.broadcast_to(phi2.max(axis=-1, keepdims=True), phi2.shape)
    return np.stack([phi1, phi2, phi3], axis=-1)


def metric_features(area) -> np.ndarray:
    rel = area.rel_coords if isinstance(area, LocalArea) else np.asarray(area)
    return metric_features_batch(rel)


def area_inputs(rel: np.ndarray, mfc_mask: Sequence[bool] = (True, True, True)) -> np.ndarray:
    """Low-level per-row input: relative xyz followed by the enabled metric columns."""
    if not any(mfc_mask):
        return rel
    phi = metric_features_batch(rel)
    cols = [i for i, on in enumerate(mfc_mask) if on]
    return np.concatenate([rel, phi[..., cols]], axis=-1)


def init_fe_layers(d_in: int, rng: np.random.Generator, area_widths=(64, 128),
                   global_widths=(256, 1024), dtype=np.float32):
    dims = [d_in, *area_widths]
    area = [LayerParams.init(a, b, rng, dtype=dtype) for a, b in zip(dims[:-1], dims[1:])]
    dims = [area_widths[-1], *global_widths]
    glob = [LayerParams.init(a, b, rng, dtype=dtype) for a, b in zip(dims[:-1], dims[1:])]
    return area, glob


def encode_areas(inputs, layers: Sequence[LayerParams], mode: str) -> Tensor:
    """Shared MLP over every row of every area, then max over each area's rows.

    ``inputs`` is (B, m, k, w) or a single (m, k, w) stack; output (B, m, d).
    """
    x = as_tensor(inputs)
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    if layers[0].d_in != x.shape[-1]:
        raise ConfigError(f"area encoder expects width {layers[0].d_in}, got {x.shape[-1]}")
    h = mlp(x, layers, mode)
    pooled, _ = max_reduce(h, axis=2)
    return pooled


def aggregate_global(area_features: Tensor, layers: Sequence[LayerParams], mode: str) -> Tensor:
    """Shared MLP over area vectors (B, m, d), max over the m areas -> (B, d_g2)."""
    x = as_tensor(area_features)
    if x.ndim == 2:
        x = reshape(x, (1,) + x.shape)
    if x.shape[1] < 1:
        raise ValueError("need at least one area")
    h = mlp(x, layers, mode)
    g2, _ = max_reduce(h, axis=1)
    return g2
