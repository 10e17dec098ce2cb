"""Training and evaluation loops shared by the CLI and the experiment scripts."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .cpl import ConfigError
from .data import (DataError, Dataset, LabeledSample, batch_iter, load_dataset, load_modelnet,
                   stack_coords, synthetic_dataset)
from .geometry import AugmentParams, augment_coords
from .network import (ClassifierConfig, NetworkParams, SegmenterConfig, classify_forward,
                      init_params, instance_accuracy, mean_iou, segment_forward, shape_iou,
                      vote_predict, vote_segment)

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass
class RunConfig:
    task: str = "classify"
    data_dir: str | None = None
    data_format: str = "csv"
    synthetic_classes: tuple[str, ...] = ("sphere", "cube", "cylinder", "plane")
    train_per_class: int = 50
    test_per_class: int = 20
    n_points: int = 1024
    jitter: float = 0.0
    m: int = 256
    k: int = 128
    use_cpl: bool = True
    use_g1: bool = True
    mfc: tuple[bool, bool, bool] = (True, True, True)
    cpl_widths: tuple[int, ...] = (64, 128)
    area_widths: tuple[int, ...] = (64, 128)
    global_widths: tuple[int, ...] = (256, 1024)
    head_widths: tuple[int, ...] = (512, 256)
    dropout: float = 0.5
    k_interp: int = 3
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    decay_rate: float = 0.7
    decay_every: int = 23
    scale_lo: float | None = None
    scale_hi: float | None = None
    shift_range: float = 0.2
    noise_sigma: float = 0.01
    votes: int = 10
    jobs: int = 1
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        if self.task not in ("classify", "segment"):
            raise ConfigError(f"unknown task {self.task!r}")
        self.synthetic_classes = tuple(self.synthetic_classes)
        self.mfc = tuple(bool(b) for b in self.mfc)
        for name in ("cpl_widths", "area_widths", "global_widths", "head_widths"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @property
    def scale_range(self) -> tuple[float, float]:
        """Anisotropic scale bounds; segmentation defaults to a wider range."""
        lo, hi = (0.5, 2.0) if self.task == "segment" else (0.66, 1.4)
        return (lo if self.scale_lo is None else self.scale_lo,
                hi if self.scale_hi is None else self.scale_hi)

    def augment_params(self) -> AugmentParams:
        return AugmentParams(*self.scale_range, self.shift_range, self.noise_sigma, self.seed)

    def model_config(self, class_count: int, part_count: int = 2):
        common = dict(m=self.m, k=self.k, use_g1=self.use_g1, mfc_mask=self.mfc,
                      cpl_widths=self.cpl_widths, area_widths=self.area_widths,
                      global_widths=self.global_widths, head_widths=self.head_widths,
                      dropout=self.dropout)
        if self.task == "segment":
            return SegmenterConfig(part_count=part_count, shape_class_count=class_count,
                                   k_interp=self.k_interp, **common)
        return ClassifierConfig(use_cpl=self.use_cpl, class_count=class_count, **common)


@dataclass
class DataSplits:
    train: list[LabeledSample]
    test: list[LabeledSample]
    class_names: list[str]
    parts_of_class: dict[int, list[int]] = field(default_factory=dict)

    @property
    def part_count(self) -> int:
        parts = [p for ps in self.parts_of_class.values() for p in ps]
        return max(parts) + 1 if parts else 2


def _offset_parts(samples: list[LabeledSample]):
    # synthetic part ids are 0/1 per shape; give each class its own pair
    for s in samples:
        s.part_labels = s.part_labels + 2 * s.shape_label


def load_splits(cfg: RunConfig, rng: np.random.Generator) -> DataSplits:
    if cfg.data_dir is None:
        classes = list(cfg.synthetic_classes)
        train = synthetic_dataset(classes, cfg.train_per_class, cfg.n_points, cfg.jitter, rng)
        test = synthetic_dataset(classes, cfg.test_per_class, cfg.n_points, cfg.jitter, rng)
        parts = {}
        if cfg.task == "segment":
            _offset_parts(train)
            _offset_parts(test)
            parts = {c: [2 * c, 2 * c + 1] for c in range(len(classes))}
        return DataSplits(train, test, classes, parts)
    root = Path(cfg.data_dir)
    if not root.exists():
        raise DataError(f"data directory {root} does not exist")
    ds: Dataset = load_modelnet(root, cfg.n_points, rng) if cfg.data_format == "modelnet" \
        else load_dataset(root)
    parts: dict[int, set] = {}
    for s in ds.samples:
        if s.part_labels is not None and s.shape_label is not None:
            parts.setdefault(s.shape_label, set()).update(int(p) for p in np.unique(s.part_labels))
    train, test = ds.split("train"), ds.split("test")
    if not train:
        raise DataError("dataset has no training samples")
    return DataSplits(train, test, ds.class_names, {c: sorted(p) for c, p in parts.items()})


def _forward(batch_pts, batch, params, model_cfg, mode, rng):
    if isinstance(model_cfg, SegmenterConfig):
        classes = np.array([s.shape_label for s in batch])
        out = segment_forward(batch_pts, classes, params, model_cfg, mode, rng)
        labels = np.concatenate([s.part_labels for s in batch])
        logits = ad.reshape(out.logits, (-1, out.logits.shape[-1]))
    else:
        out = classify_forward(batch_pts, params, model_cfg, mode, rng)
        labels = np.array([s.shape_label for s in batch])
        logits = out.logits
    return out, logits, labels


def evaluate(params: NetworkParams, model_cfg, samples, parts_of_class=None, votes: int = 0,
             scale_range=(0.66, 1.4), rng: np.random.Generator | None = None,
             jobs: int = 1, batch_size: int = 16) -> dict:
    """Accuracy (classification) or instance mIoU (segmentation), optionally voted.

    ``votes=0`` skips the voted variant.
    """
    if not samples:
        return {}
    rng = rng if rng is not None else np.random.default_rng(0)
    dtype = next(iter(params.named_tensors().values())).dtype
    seg = isinstance(model_cfg, SegmenterConfig)
    plain, voted = [], []
    for batch in batch_iter(samples, batch_size, shuffle=False):
        pts = stack_coords(batch, dtype)
        if seg:
            classes = np.array([s.shape_label for s in batch])
            plain.append(segment_forward(pts, classes, params, model_cfg, ad.EVAL).probs)
            if votes:
                voted.append(vote_segment(pts, classes, params, model_cfg, votes, scale_range, rng, jobs))
        else:
            plain.append(classify_forward(pts, params, model_cfg, ad.EVAL).probs)
            if votes:
                voted.append(vote_predict(pts, params, model_cfg, votes, scale_range, rng, jobs))
    report: dict = {"count": len(samples)}
    if seg:
        def miou(prob_batches):
            probs = [p for b in prob_batches for p in b]
            ious = [shape_iou(p.argmax(-1), s.part_labels,
                              (parts_of_class or {}).get(s.shape_label, np.unique(s.part_labels)))
                    for p, s in zip(probs, samples)]
            return mean_iou(ious)
        report["miou"] = miou(plain)
        if votes:
            report["miou_vote"] = miou(voted)
        return report
    truth = np.array([s.shape_label for s in samples])
    probs = np.concatenate(plain)
    report["accuracy"] = instance_accuracy(probs.argmax(1), truth)
    report["probs"] = probs
    if votes:
        vprobs = np.concatenate(voted)
        report["accuracy_vote"] = instance_accuracy(vprobs.argmax(1), truth)
        report["probs_vote"] = vprobs
    return report


@dataclass
class TrainResult:
    params: NetworkParams
    model_config: object
    adam: ad.AdamState
    rows: list[dict]
    step_mprime: list[tuple[int, float, int, int]]
    final_eval: dict
    splits: DataSplits


LOG_FIELDS = ["epoch", "lr", "train_loss", "test_metric", "mprime_mean", "mprime_max", "mprime_min"]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def train(cfg: RunConfig, out_dir: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train per the recipe in ``cfg``; writes metrics.csv, steps.csv and checkpoint.bin.

    Separate seeded streams drive data, initialisation, shuffling,
    augmentation and dropout, so a fixed seed replays the run exactly.
    """
    data_ss, init_ss, shuffle_ss, aug_ss, drop_ss = np.random.SeedSequence(cfg.seed).spawn(5)
    splits = load_splits(cfg, np.random.default_rng(data_ss))
    model_cfg = cfg.model_config(len(splits.class_names), splits.part_count)
    params = init_params(model_cfg, np.random.default_rng(init_ss))
    adam = ad.AdamState(lr=cfg.lr)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)
    drop_rng = np.random.default_rng(drop_ss)
    aug = cfg.augment_params()
    tensors = params.named_tensors()

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_FIELDS)

    rows, step_mprime = [], []
    step = 0
    final_eval: dict = {}
    for epoch in range(cfg.epochs):
        adam.lr = ad.lr_schedule(epoch, cfg.lr, cfg.decay_rate, cfg.decay_every)
        losses, weights, counts = [], [], []
        for batch in batch_iter(splits.train, cfg.batch_size, True, shuffle_rng):
            pts = stack_coords(batch)
            pts = np.stack([augment_coords(p, aug, aug_rng) for p in pts])
            params.zero_grad()
            res, logits, labels = _forward(pts, batch, params, model_cfg, ad.TRAIN, drop_rng)
            loss = ad.softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            ad.adam_step(tensors, adam)
            distinct = [len(np.unique(r)) for r in res.center_indices]
            counts.extend(distinct)
            step_mprime.append((step, float(np.mean(distinct)), max(distinct), min(distinct)))
            losses.append(float(loss.data))
            weights.append(len(batch))
            step += 1
        final_eval = evaluate(params, model_cfg, splits.test, splits.parts_of_class)
        row = {"epoch": epoch, "lr": adam.lr,
               "train_loss": float(np.average(losses, weights=weights)),
               "test_metric": final_eval.get("miou", final_eval.get("accuracy", float("nan"))),
               "mprime_mean": float(np.mean(counts)), "mprime_max": max(counts),
               "mprime_min": min(counts)}
        rows.append(row)
        log.info("epoch %d loss %.4f test %.4f m' %.1f", epoch, row["train_loss"],
                 row["test_metric"], row["mprime_mean"])
        if out is not None:
            with open(out / "metrics.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[k]) for k in LOG_FIELDS])
        if on_epoch is not None:
            on_epoch(row)

    if out is not None:
        with open(out / "steps.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mprime_mean", "mprime_max", "mprime_min"])
            w.writerows([[s, _fmt(a), b, c] for s, a, b, c in step_mprime])
        meta = {"class_names": list(splits.class_names), "epochs": cfg.epochs, "seed": cfg.seed,
                "parts_of_class": {str(k): v for k, v in splits.parts_of_class.items()},
                # the output path is left out so reruns elsewhere stay byte-identical
                "run": {k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in asdict(cfg).items() if k != "out"}}
        ckpt.save(out / "checkpoint.bin", model_cfg, params, adam, meta)
    return TrainResult(params, model_cfg, adam, rows, step_mprime, final_eval, splits)
