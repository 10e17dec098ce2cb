"""Critical point learning: per-point encoder, max pool, argmax centers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import LayerParams, Tensor, as_tensor, max_reduce, mlp


class ConfigError(ValueError):
    pass


@dataclass
class CplOutput:
    """Batched result of the critical-point stage.

    All fields carry a leading batch axis B: ``g1`` is (B, m),
    ``critical_indices`` (B, m) and ``point_features`` (B, n, d_cpl).
    """
    g1: Tensor
    critical_indices: np.ndarray
    point_features: Tensor | None = None

    @property
    def distinct_count(self) -> np.ndarray:
        return np.array([len(np.unique(row)) for row in self.critical_indices])

    @property
    def m(self) -> int:
        return self.critical_indices.shape[1]


def init_cpl_layers(m: int, rng: np.random.Generator, widths: Sequence[int] = (64, 128),
                    d_in: int = 3, dtype=np.float32) -> list[LayerParams]:
    dims = [d_in, *widths, m]
    return [LayerParams.init(a, b, rng, bn=True, dtype=dtype) for a, b in zip(dims[:-1], dims[1:])]


def cpl_pool(features: Tensor) -> CplOutput:
    """Max-pool (B, n, m) per-point features into g1 and read off the argmax rows."""
    g1, idx = max_reduce(features, axis=1)
    return CplOutput(g1=g1, critical_indices=idx)


def cpl_forward(points, layers: Sequence[LayerParams], m: int, mode: str) -> CplOutput:
    """Run the encoder on (B, n, 3) or (n, 3) points and pool.

    The final layer has no ReLU so g1 may take any sign; ``point_features``
    holds the output of the penultimate layer.
    """
    pts = as_tensor(points if np.ndim(points) == 3 else np.asarray(points)[None])
    if layers[-1].d_out != m:
        raise ConfigError(f"last CPL layer width {layers[-1].d_out} != m={m}")
    if layers[0].d_in != pts.shape[-1]:
        raise ConfigError(f"first CPL layer expects width {layers[0].d_in}, got {pts.shape[-1]}")
    hidden = mlp(pts, layers[:-1], mode)
    features = mlp(hidden, layers[-1:], mode, last_activation=False)
    out = cpl_pool(features)
    out.point_features = hidden
    return out


def select_centers(cpl: CplOutput, points) -> np.ndarray:
    """Coordinates of the critical points, (B, m, 3), duplicates kept in order."""
    pts = np.asarray(points.data if isinstance(points, Tensor) else points)
    if pts.ndim == 2:
        pts = pts[None]
    return np.take_along_axis(pts, cpl.critical_indices[..., None], axis=1)


def count_distinct_stats(outputs) -> tuple[float, int, int]:
    """(mean, max, min) number of pairwise different centers per cloud.

    Accepts CplOutputs, index arrays or plain per-cloud counts.
    """
    counts: list[int] = []
    for item in outputs:
        if isinstance(item, CplOutput):
            counts.extend(int(c) for c in item.distinct_count)
        elif np.ndim(item) == 0:
            counts.append(int(item))
        else:
            arr = np.atleast_2d(np.asarray(item))
            counts.extend(len(np.unique(row)) for row in arr)
    if not counts:
        raise ValueError("need at least one output")
    return float(np.mean(counts)), max(counts), min(counts)
