"""Mesh and point-file ingestion, surface sampling, synthetic shapes, batching."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .geometry import PointCloud, normalize_coords


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise DataError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class LabeledSample:
    cloud: PointCloud
    shape_label: int | None = None
    part_labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.part_labels is not None:
            self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
            if self.part_labels.shape != (self.cloud.n,):
                raise DataError(f"need {self.cloud.n} part labels, got {self.part_labels.shape}")


def load_off(path) -> Mesh:
    """Parse an ASCII OFF file; polygons are split into triangle fans."""
    lines = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        text = raw.split("#", 1)[0].strip()
        if text:
            lines.append((lineno, text))
    if not lines or not lines[0][1].upper().startswith("OFF"):
        raise DataError(f"{path}:1: missing OFF header")
    lineno, head = lines[0]
    rest = head[3:].split()
    pos = 1
    if not rest:
        if len(lines) < 2:
            raise DataError(f"{path}:{lineno}: missing counts line")
        lineno, counts_line = lines[1]
        rest = counts_line.split()
        pos = 2
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (IndexError, ValueError):
        raise DataError(f"{path}:{lineno}: bad counts line") from None
    if len(lines) < pos + nv + nf:
        last = lines[-1][0]
        raise DataError(f"{path}:{last}: truncated file, expected {nv} vertices and {nf} faces")
    verts = np.empty((nv, 3))
    for i in range(nv):
        lineno, text = lines[pos + i]
        try:
            verts[i] = [float(t) for t in text.split()[:3]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad vertex") from None
    tris = []
    for i in range(nf):
        lineno, text = lines[pos + nv + i]
        try:
            vals = [int(t) for t in text.split()]
            count, idx = vals[0], vals[1:vals[0] + 1]
        except (ValueError, IndexError):
            raise DataError(f"{path}:{lineno}: bad face") from None
        if count < 3 or len(idx) != count:
            raise DataError(f"{path}:{lineno}: bad face")
        if min(idx) < 0 or max(idx) >= nv:
            raise DataError(f"{path}:{lineno}: face index out of range")
        tris.extend((idx[0], idx[j], idx[j + 1]) for j in range(1, count - 1))
    return Mesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))


def sample_mesh_uniform(mesh: Mesh, n_points: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface."""
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n_points, p=areas / total)
    r1 = np.sqrt(rng.random(n_points))[:, None]
    r2 = rng.random(n_points)[:, None]
    a, b, c = (mesh.vertices[mesh.faces[tri, i]] for i in range(3))
    return PointCloud((1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c)


# synthetic primitives

SYNTHETIC_CLASSES = ("sphere", "cube", "cylinder", "plane", "torus")
CYLINDER_RADIUS = 0.5
CYLINDER_HEIGHT = 1.0
PLANE_BORDER = 0.1
TORUS_R, TORUS_r = 0.5, 0.2


def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v, (v[:, 2] > 0).astype(np.int64)


def _cube(n, rng):
    face = rng.integers(0, 6, n)
    pts = rng.uniform(-0.5, 0.5, (n, 3))
    axis, sign = face // 2, np.where(face % 2 == 0, -0.5, 0.5)
    pts[np.arange(n), axis] = sign
    return pts, (axis == 2).astype(np.int64)


def _cylinder(n, rng):
    r, h = CYLINDER_RADIUS, CYLINDER_HEIGHT
    barrel_area, cap_area = 2 * np.pi * r * h, 2 * np.pi * r * r
    cap = rng.random(n) < cap_area / (barrel_area + cap_area)
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(cap, r * np.sqrt(rng.random(n)), r)
    z = np.where(cap, np.where(rng.random(n) < 0.5, -h / 2, h / 2), rng.uniform(-h / 2, h / 2, n))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1), cap.astype(np.int64)


def _plane(n, rng):
    xy = rng.uniform(-0.5, 0.5, (n, 2))
    border = np.abs(xy).max(axis=1) > 0.5 - PLANE_BORDER
    return np.column_stack([xy, np.zeros(n)]), border.astype(np.int64)


def _torus(n, rng):
    out = np.empty((0, 2))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) < (TORUS_R + TORUS_r * np.cos(v)) / (TORUS_R + TORUS_r)
        out = np.concatenate([out, np.column_stack([u[keep], v[keep]])])
    u, v = out[:n, 0], out[:n, 1]
    ring = TORUS_R + TORUS_r * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_r * np.sin(v)], axis=1)
    return pts, (np.cos(v) > 0).astype(np.int64)


_GENERATORS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder,
               "plane": _plane, "torus": _torus}


def generate_synthetic(cls: str, n_points: int, jitter: float, rng: np.random.Generator,
                       label: int | None = None) -> LabeledSample:
    """Uniform surface samples of a unit-scale primitive with a two-part labelling.

    Parts: sphere upper/lower hemisphere, cube top+bottom faces vs sides,
    cylinder caps vs barrel, plane border band vs interior, torus outer vs
    inner half.
    """
    if cls not in _GENERATORS:
        raise DataError(f"unknown synthetic class {cls!r}")
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    pts, parts = _GENERATORS[cls](n_points, rng)
    if jitter > 0:
        pts = pts + rng.normal(0.0, jitter, pts.shape)
    return LabeledSample(PointCloud(pts), label, parts, name=cls)


def synthetic_dataset(classes: Sequence[str], per_class: int, n_points: int, jitter: float,
                      rng: np.random.Generator, normalize: bool = True) -> list[LabeledSample]:
    out = []
    for label, cls in enumerate(classes):
        for _ in range(per_class):
            s = generate_synthetic(cls, n_points, jitter, rng, label)
            if normalize:
                s.cloud = PointCloud(normalize_coords(s.cloud.coords))
            out.append(s)
    return out


def batch_iter(dataset: Sequence, batch_size: int = 16, shuffle: bool = True,
               rng: np.random.Generator | None = None) -> Iterator[list]:
    """Yield lists of samples; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(dataset))
    if shuffle:
        order = (rng if rng is not None else np.random.default_rng()).permutation(len(dataset))
    for s in range(0, len(order), batch_size):
        yield [dataset[i] for i in order[s:s + batch_size]]


def stack_coords(samples: Sequence[LabeledSample], dtype=np.float32) -> np.ndarray:
    sizes = {s.cloud.n for s in samples}
    if len(sizes) != 1:
        raise DataError(f"clouds in a batch must share a point count, got {sorted(sizes)}")
    return np.stack([s.cloud.coords for s in samples]).astype(dtype)


# native point-cloud files

def write_cloud_csv(path, coords: np.ndarray, labels=None):
    coords = np.asarray(coords)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z"] + (["label"] if labels is not None else []))
        for i, row in enumerate(coords):
            vals = [repr(float(v)) for v in row]
            if labels is not None:
                vals.append(str(int(labels[i])))
            w.writerow(vals)


def read_cloud_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0][:3]] != ["x", "y", "z"]:
        raise DataError(f"{path}:1: expected header x,y,z[,label]")
    has_label = len(rows[0]) > 3
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no points")
    try:
        coords = np.array([[float(v) for v in r[:3]] for r in body])
        labels = np.array([int(r[3]) for r in body]) if has_label else None
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from None
    return coords, labels


@dataclass
class Dataset:
    samples: list[LabeledSample]
    class_names: list[str]
    splits: list[str]

    def split(self, name: str) -> list[LabeledSample]:
        return [s for s, sp in zip(self.samples, self.splits) if sp == name]


def write_dataset(root, samples: Sequence[LabeledSample], class_names: Sequence[str],
                  splits: Sequence[str] | None = None):
    """Write one CSV per sample, ``manifest.csv`` (path,class_name,split) and
    ``classes.txt`` fixing the label order."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = list(splits) if splits is not None else ["train"] * len(samples)
    lines = []
    for i, (s, sp) in enumerate(zip(samples, splits)):
        cname = class_names[s.shape_label] if s.shape_label is not None else ""
        rel = f"{sp}/{cname or 'unlabeled'}_{i:05d}.csv"
        (root / sp).mkdir(exist_ok=True)
        write_cloud_csv(root / rel, s.cloud.coords, s.part_labels)
        lines.append(f"{rel},{cname},{sp}")
    (root / "manifest.csv").write_text("\n".join(lines) + "\n")
    (root / "classes.txt").write_text("".join(f"{c}\n" for c in class_names))


def read_manifest(path) -> list[tuple[str, str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.strip().split(",")
        if len(parts) < 2:
            raise DataError(f"{path}:{lineno}: expected relative_path,class_name[,split]")
        out.append((parts[0], parts[1], parts[2] if len(parts) > 2 else "train"))
    return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"{manifest} not found")
    entries = read_manifest(manifest)
    class_file = root / "classes.txt"
    if class_file.exists():
        class_names = [c for c in class_file.read_text().splitlines() if c]
    else:
        class_names = sorted({c for _, c, _ in entries if c})
    samples, splits = [], []
    for rel, cname, sp in entries:
        coords, labels = read_cloud_csv(root / rel)
        if cname and cname not in class_names:
            raise DataError(f"{manifest}: class {cname!r} missing from classes.txt")
        label = class_names.index(cname) if cname else None
        samples.append(LabeledSample(PointCloud(coords), label, labels, name=rel))
        splits.append(sp)
    return Dataset(samples, class_names, splits)


def load_modelnet(root, n_points: int = 1024, rng: np.random.Generator | None = None) -> Dataset:
    """ModelNet layout: ``root/<class>/{train,test}/*.off`` meshes, sampled and normalised."""
    root = Path(root)
    rng = rng if rng is not None else np.random.default_rng(0)
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    samples, splits = [], []
    for label, cname in enumerate(class_names):
        for sp in ("train", "test"):
            for f in sorted((root / cname / sp).glob("*.off")):
                cloud = sample_mesh_uniform(load_off(f), n_points, rng)
                samples.append(LabeledSample(PointCloud(normalize_coords(cloud.coords)), label,
                                             name=str(f.relative_to(root))))
                splits.append(sp)
    return Dataset(samples, class_names, splits)


def load_shapenet_part(root, split_files: dict[str, Sequence[str]] | None = None) -> Dataset:
    """ShapeNet-part text layout: ``root/<synset>/<id>.txt`` rows of x y z [nx ny nz] part.

    Clouds keep their native point counts; callers resample to a fixed n.
    """
    root = Path(root)
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    samples, splits = [], []
    wanted = {sp: set(names) for sp, names in (split_files or {}).items()}
    for label, cname in enumerate(class_names):
        for f in sorted((root / cname).glob("*.txt")):
            arr = np.loadtxt(f, ndmin=2)
            key = f"{cname}/{f.stem}"
            sp = next((s for s, names in wanted.items() if key in names), "train")
            samples.append(LabeledSample(PointCloud(normalize_coords(arr[:, :3])), label,
                                         arr[:, -1].astype(np.int64), name=key))
            splits.append(sp)
    return Dataset(samples, class_names, splits)


# exports

def write_ply(path, coords: np.ndarray, colors: np.ndarray | None = None):
    coords = np.asarray(coords, dtype=np.float64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(coords)}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i, p in enumerate(coords):
        row = f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}"
        if colors is not None:
            row += " " + " ".join(str(int(c)) for c in colors[i])
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


PALETTE = np.array([[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40],
                    [148, 103, 189], [140, 86, 75], [227, 119, 194], [127, 127, 127]])


def label_colors(labels) -> np.ndarray:
    return PALETTE[np.asarray(labels) % len(PALETTE)]


def write_predictions(path, ids, truth, preds, probs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "true_label", "pred_label"] + [f"p{c}" for c in range(probs.shape[1])])
        for sid, t, p, row in zip(ids, truth, preds, probs):
            w.writerow([sid, "" if t is None else int(t), int(p)] + [repr(float(v)) for v in row])
