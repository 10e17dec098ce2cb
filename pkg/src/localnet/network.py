"""Full classification and part-segmentation networks, voting and metrics."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import EVAL, LayerParams, Tensor
from .cpl import ConfigError, CplOutput, cpl_forward, init_cpl_layers
from .features import aggregate_global, area_inputs, encode_areas, group, init_fe_layers
from .geometry import farthest_point_sampling, knn_batch, max_norm_index, pairwise_distances

COINCIDENT_DIST = 1e-10


@dataclass
class ClassifierConfig:
    m: int = 256
    k: int = 128
    use_cpl: bool = True
    use_g1: bool = True
    mfc_mask: tuple[bool, bool, bool] = (True, True, True)
    class_count: int = 40
    cpl_widths: tuple[int, ...] = (64, 128)
    area_widths: tuple[int, ...] = (64, 128)
    global_widths: tuple[int, ...] = (256, 1024)
    head_widths: tuple[int, ...] = (512, 256)
    dropout: float = 0.5
    fps_seed: int | str = 0

    def __post_init__(self):
        self.mfc_mask = tuple(bool(b) for b in self.mfc_mask)
        for name in ("cpl_widths", "area_widths", "global_widths", "head_widths"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.m < 1 or self.k < 1:
            raise ConfigError("m and k must be >= 1")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if len(self.mfc_mask) != 3:
            raise ConfigError("mfc_mask needs three flags")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def needs_cpl(self) -> bool:
        return self.use_cpl or self.use_g1

    @property
    def g_dim(self) -> int:
        return self.global_widths[-1] + (self.m if self.use_g1 else 0)

    def to_dict(self) -> dict:
        return {"task": "classify", **asdict(self)}


@dataclass
class SegmenterConfig:
    m: int = 512
    k: int = 128
    part_count: int = 50
    shape_class_count: int = 16
    use_g1: bool = True
    mfc_mask: tuple[bool, bool, bool] = (False, False, False)
    cpl_widths: tuple[int, ...] = (64, 128)
    area_widths: tuple[int, ...] = (64, 256)
    global_widths: tuple[int, ...] = (256, 512)
    head_widths: tuple[int, ...] = (256, 128)
    dropout: float = 0.5
    k_interp: int = 3
    fps_seed: int | str = "max_norm"

    def __post_init__(self):
        self.mfc_mask = tuple(bool(b) for b in self.mfc_mask)
        for name in ("cpl_widths", "area_widths", "global_widths", "head_widths"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.m < 1 or self.k < 1 or self.k_interp < 1:
            raise ConfigError("m, k and k_interp must be >= 1")
        if self.part_count < 2:
            raise ConfigError("part_count must be >= 2")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    use_cpl = False
    needs_cpl = True

    @property
    def g_dim(self) -> int:
        return self.global_widths[-1] + (self.m if self.use_g1 else 0)

    @property
    def point_dim(self) -> int:
        return self.area_widths[-1] + self.cpl_widths[-1] + self.g_dim + self.shape_class_count

    def to_dict(self) -> dict:
        return {"task": "segment", **asdict(self)}


def config_from_dict(d: dict):
    d = dict(d)
    task = d.pop("task", "classify")
    cls = SegmenterConfig if task == "segment" else ClassifierConfig
    return cls(**d)


@dataclass
class NetworkParams:
    """Learnable layers grouped by sub-network, in a fixed naming order."""
    groups: dict[str, list[LayerParams]] = field(default_factory=dict)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for gname, layers in self.groups.items():
            for i, layer in enumerate(layers):
                for pname, t in layer.tensors().items():
                    out[f"{gname}.{i}.{pname}"] = t
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for gname, layers in self.groups.items():
            for i, layer in enumerate(layers):
                for bname, arr in layer.buffers().items():
                    out[f"{gname}.{i}.{bname}"] = arr
        return out

    def zero_grad(self):
        for t in self.named_tensors().values():
            t.grad = None

    def __getitem__(self, name: str) -> list[LayerParams]:
        return self.groups[name]

    def get(self, name: str):
        return self.groups.get(name)


def _head_layers(d_in: int, widths: Sequence[int], d_out: int, rng, dtype) -> list[LayerParams]:
    dims = [d_in, *widths]
    layers = [LayerParams.init(a, b, rng, dtype=dtype) for a, b in zip(dims[:-1], dims[1:])]
    layers.append(LayerParams.init(dims[-1], d_out, rng, bn=False, dtype=dtype))
    return layers


def init_params(cfg, rng: np.random.Generator | int = 0, dtype=np.float32) -> NetworkParams:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    groups: dict[str, list[LayerParams]] = {}
    if cfg.needs_cpl:
        groups["cpl"] = init_cpl_layers(cfg.m, rng, cfg.cpl_widths, dtype=dtype)
    d_in = 3 + sum(cfg.mfc_mask)
    groups["area"], groups["global"] = init_fe_layers(d_in, rng, cfg.area_widths,
                                                      cfg.global_widths, dtype=dtype)
    if isinstance(cfg, SegmenterConfig):
        groups["head"] = _head_layers(cfg.point_dim, cfg.head_widths, cfg.part_count, rng, dtype)
    else:
        groups["head"] = _head_layers(cfg.g_dim, cfg.head_widths, cfg.class_count, rng, dtype)
    return NetworkParams(groups)


def _as_batch(points, dtype) -> np.ndarray:
    pts = np.asarray(getattr(points, "coords", points), dtype=dtype)
    return pts[None] if pts.ndim == 2 else pts


def _param_dtype(params: NetworkParams):
    return next(iter(params.named_tensors().values())).dtype


def _fps_seed(pts: np.ndarray, seed) -> int:
    return max_norm_index(pts) if seed == "max_norm" else int(seed)


def fps_centers(points: np.ndarray, m: int, seed=0) -> np.ndarray:
    """FPS center indices for each cloud of a (B, n, 3) batch."""
    return np.stack([farthest_point_sampling(p, m, _fps_seed(p, seed)) for p in points])


@dataclass
class ForwardResult:
    logits: Tensor
    probs: np.ndarray
    center_indices: np.ndarray
    cpl: CplOutput | None = None
    g: Tensor | None = None


def _global_feature(pts, params, cfg, mode, center_source: str):
    cpl = cpl_forward(pts, params["cpl"], cfg.m, mode) if cfg.needs_cpl else None
    if center_source == "cpl":
        centers_idx = cpl.critical_indices
    else:
        centers_idx = fps_centers(pts, cfg.m, cfg.fps_seed)
    centers = np.take_along_axis(pts, centers_idx[..., None], axis=1)
    _, rel = group(pts, centers, cfg.k)
    area_feats = encode_areas(area_inputs(rel, cfg.mfc_mask), params["area"], mode)
    g2 = aggregate_global(area_feats, params["global"], mode)
    g = ad.concat([cpl.g1, g2]) if cfg.use_g1 else g2
    return cpl, centers_idx, centers, area_feats, g


def _head(x: Tensor, layers: Sequence[LayerParams], ratio: float, mode: str, rng) -> Tensor:
    for layer in layers[:-1]:
        x = ad.shared_mlp_layer(x, layer, mode)
        x = ad.dropout(x, ratio, mode, rng)
    return ad.linear(x, layers[-1].weight, layers[-1].bias, exact_rows=mode != ad.TRAIN)


def classify_forward(points, params: NetworkParams, cfg: ClassifierConfig, mode: str = EVAL,
                     rng: np.random.Generator | None = None) -> ForwardResult:
    """Class scores for a (B, n, 3) batch or a single cloud.

    Centers come from the critical-point argmax, or from FPS when
    ``cfg.use_cpl`` is off; g1 is prepended to g2 when ``cfg.use_g1``.
    """
    pts = _as_batch(points, _param_dtype(params))
    if cfg.use_cpl and "cpl" not in params.groups:
        raise ConfigError("use_cpl requires CPL layers")
    if cfg.k > pts.shape[1]:
        raise ConfigError(f"k={cfg.k} exceeds point count {pts.shape[1]}")
    if mode == ad.TRAIN and cfg.dropout > 0 and rng is None:
        raise ConfigError("training with dropout needs an rng")
    cpl, centers_idx, _, _, g = _global_feature(pts, params, cfg, mode,
                                                "cpl" if cfg.use_cpl else "fps")
    if g.shape[-1] != params["head"][0].d_in:
        raise ConfigError(f"g has width {g.shape[-1]}, head expects {params['head'][0].d_in}")
    logits = _head(g, params["head"], cfg.dropout, mode, rng)
    return ForwardResult(logits, ad.softmax(logits.data), centers_idx, cpl, g)


def idw_weights(points: np.ndarray, centers: np.ndarray, k_interp: int):
    """Nearest-center indices and normalised inverse-squared-distance weights.

    Shapes: ``points`` (B, n, 3), ``centers`` (B, m, 3) -> two (B, n, k)
    arrays. A point within 1e-10 of its nearest center takes that center's
    weight alone.
    """
    if centers.shape[-2] < 1:
        raise ValueError("need at least one center")
    k_interp = min(k_interp, centers.shape[-2])
    idx = knn_batch(centers, points, k_interp)
    dist = np.take_along_axis(pairwise_distances(points, centers), idx, axis=-1)
    coincident = dist[..., :1] < COINCIDENT_DIST
    with np.errstate(divide="ignore"):
        w = np.where(coincident, 0.0, 1.0 / np.where(coincident, 1.0, dist * dist))
    w[..., :1] = np.where(coincident, 1.0, w[..., :1])
    return idx, w / w.sum(axis=-1, keepdims=True)


def idw_combine(center_feats: Tensor, idx: np.ndarray, w: np.ndarray) -> Tensor:
    """Weighted average written as f_0 + sum_i w_i (f_i - f_0).

    With weights summing to one this is the plain weighted mean, but
    constant features come back bit-exactly.
    """
    center_feats = ad.as_tensor(center_feats)
    base = ad.take(center_feats, idx[..., 0], axis=1)
    out = base
    for i in range(1, idx.shape[-1]):
        diff = ad.sub(ad.take(center_feats, idx[..., i], axis=1), base)
        out = ad.add(out, ad.mul(diff, w[..., i:i + 1].astype(center_feats.dtype)))
    return out


def idw_interpolate(target, centers, center_feats, k_interp: int = 3) -> np.ndarray:
    """Inverse-squared-distance average of the ``k_interp`` nearest center features."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if len(centers) == 0:
        raise ValueError("need at least one center")
    feats = np.asarray(center_feats, dtype=np.float64)
    scalar = feats.ndim == 1
    feats = feats.reshape(len(centers), -1)
    target = np.asarray(target, dtype=np.float64).reshape(1, 1, 3)
    idx, w = idw_weights(target, centers[None], k_interp)
    out = idw_combine(ad.Tensor(feats[None]), idx, w).data[0, 0]
    return out[0] if scalar else out


@dataclass
class SegmentResult:
    logits: Tensor
    probs: np.ndarray
    center_indices: np.ndarray
    cpl: CplOutput | None = None


def _onehot(classes, count: int, batch: int, dtype) -> np.ndarray:
    arr = np.asarray(classes)
    if arr.ndim == 2:
        if arr.shape != (batch, count):
            raise ConfigError(f"one-hot must be ({batch}, {count}), got {arr.shape}")
        return arr.astype(dtype)
    arr = np.broadcast_to(arr.reshape(-1), (batch,))
    if arr.min() < 0 or arr.max() >= count:
        raise ConfigError("shape class out of range")
    return np.eye(count, dtype=dtype)[arr]


def segment_forward(points, class_onehot, params: NetworkParams, cfg: SegmenterConfig,
                    mode: str = EVAL, rng: np.random.Generator | None = None) -> SegmentResult:
    """Per-point part scores for a (B, n, 3) batch.

    ``class_onehot`` is either a (B, C) one-hot matrix or shape-class ids.
    Centers come from FPS; center features reach every point through IDW.
    """
    dtype = _param_dtype(params)
    pts = _as_batch(points, dtype)
    b, n, _ = pts.shape
    if cfg.m > n or cfg.k > n:
        raise ConfigError(f"m={cfg.m} and k={cfg.k} must not exceed n={n}")
    if mode == ad.TRAIN and cfg.dropout > 0 and rng is None:
        raise ConfigError("training with dropout needs an rng")
    onehot = _onehot(class_onehot, cfg.shape_class_count, b, dtype)
    cpl, centers_idx, centers, area_feats, g = _global_feature(pts, params, cfg, mode, "fps")
    idx, w = idw_weights(pts, centers, cfg.k_interp)
    interp = idw_combine(area_feats, idx, w)
    g_rows = ad.broadcast_to(ad.reshape(g, (b, 1, g.shape[-1])), (b, n, g.shape[-1]))
    oh_rows = np.broadcast_to(onehot[:, None, :], (b, n, onehot.shape[-1]))
    x = ad.concat([interp, cpl.point_features, g_rows, ad.Tensor(oh_rows)])
    if x.shape[-1] != params["head"][0].d_in:
        raise ConfigError(f"point feature width {x.shape[-1]} != head input {params['head'][0].d_in}")
    logits = _head(x, params["head"], cfg.dropout, mode, rng)
    return SegmentResult(logits, ad.softmax(logits.data), centers_idx, cpl)


def _jobs(jobs: int | None) -> int:
    cap = int(os.environ.get("LOCALNET_THREADS", "0") or 0)
    jobs = 1 if jobs is None else max(1, jobs)
    return min(jobs, cap) if cap > 0 else jobs


def _run_votes(fn, pts: np.ndarray, n_votes: int, scale_range, rng, jobs):
    lo, hi = scale_range
    scales = rng.uniform(lo, hi, (n_votes, pts.shape[0], 1, 3)).astype(pts.dtype)
    copies = [(pts * s).astype(pts.dtype) for s in scales]
    if _jobs(jobs) > 1:
        with ThreadPoolExecutor(_jobs(jobs)) as pool:
            outs = list(pool.map(fn, copies))
    else:
        outs = [fn(c) for c in copies]
    return np.mean(outs, axis=0)


def vote_predict(points, params: NetworkParams, cfg: ClassifierConfig, n_votes: int = 10,
                 scale_range=(0.66, 1.4), rng: np.random.Generator | None = None,
                 jobs: int | None = 1) -> np.ndarray:
    """Average the softmax over ``n_votes`` anisotropically scaled copies."""
    rng = rng if rng is not None else np.random.default_rng(0)
    pts = _as_batch(points, _param_dtype(params))
    return _run_votes(lambda c: classify_forward(c, params, cfg, EVAL).probs,
                      pts, n_votes, scale_range, rng, jobs)


def vote_segment(points, class_onehot, params: NetworkParams, cfg: SegmenterConfig,
                 n_votes: int = 10, scale_range=(0.66, 1.4),
                 rng: np.random.Generator | None = None, jobs: int | None = 1) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng(0)
    pts = _as_batch(points, _param_dtype(params))
    return _run_votes(lambda c: segment_forward(c, class_onehot, params, cfg, EVAL).probs,
                      pts, n_votes, scale_range, rng, jobs)


def instance_accuracy(preds, truth) -> float:
    preds, truth = np.asarray(preds), np.asarray(truth)
    if preds.shape != truth.shape or preds.size == 0:
        raise ValueError("preds and truth must be equal-length and non-empty")
    return float(np.mean(preds == truth))


def shape_iou(pred, truth, parts_of_shape) -> float:
    """Mean part IoU for one shape; a part missing from both sides scores 1."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    ious = []
    for part in parts_of_shape:
        p, t = pred == part, truth == part
        union = np.count_nonzero(p | t)
        ious.append(1.0 if union == 0 else np.count_nonzero(p & t) / union)
    return float(np.mean(ious))


def mean_iou(shape_ious) -> float:
    vals = list(shape_ious)
    if not vals:
        raise ValueError("need at least one shape")
    return float(np.mean(vals))
