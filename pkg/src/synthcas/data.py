"""Dataset ingestion, preprocessing and persistence.

Images are held as ``float32`` arrays of shape ``(H, W, C)`` normalised to
``[-1, 1]``.  On disk a dataset is a directory with one sub-directory per
class holding lossless 8-bit PNG files plus a plain ``key = value`` manifest.
"""

from __future__ import annotations

import hashlib
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest"
SPLITS = ("train", "test")
PROVENANCES = ("real", "synthetic")

TOY_SHAPES = (
    "circle", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar",
)


class DatasetError(Exception):
    """Raised for structural problems with an on-disk or in-memory dataset."""


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    class_names: list[str]
    split: str = "train"
    provenance: str = "real"
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in length")
        if len(self.labels) == 0:
            raise DatasetError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError("class id outside [0, C-1]")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        if self.provenance not in PROVENANCES:
            raise DatasetError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def resolution(self) -> int:
        return self.images.shape[1]

    def class_distribution(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes).astype(np.int64)

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(
            self.images[index], self.labels[index], list(self.class_names),
            self.split, self.provenance, dict(self.meta),
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(",".join(self.class_names).encode())
        h.update(to_uint8(self.images).tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Pixel transforms
# ---------------------------------------------------------------------------

def normalize_to_unit_range(img) -> np.ndarray:
    """Map raw ``[0, 255]`` values to ``[-1, 1]`` via ``v / 127.5 - 1``."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("raw pixel values must lie in [0, 255]")
    return (arr / 127.5 - 1.0).astype(np.float32)


def denormalize(img) -> np.ndarray:
    """Inverse of :func:`normalize_to_unit_range` (float output, no rounding)."""
    return (np.asarray(img, dtype=np.float64) + 1.0) * 127.5


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(denormalize(img)), 0, 255).astype(np.uint8)


def _resize_axis(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(img, target: int) -> np.ndarray:
    """Bilinear resize of an ``(H, W[, C])`` image to ``target x target``.

    Half-pixel centres without corner alignment; source coordinates are
    clamped at the borders, so the output never leaves the input's range.
    """
    if target < 1:
        raise ValueError("target must be >= 1")
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    h, w = arr.shape[:2]
    if (h, w) == (target, target):
        out = arr.copy()
    else:
        y0, y1, fy = _resize_axis(h, target)
        x0, x1, fx = _resize_axis(w, target)
        fy = fy[:, None, None]
        fx = fx[None, :, None]
        top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
        bottom = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
        out = top * (1 - fy) + bottom * fy
    return out[..., 0] if squeeze else out


def resize_batch(images: np.ndarray, target: int) -> np.ndarray:
    if images.shape[1] == target and images.shape[2] == target:
        return images
    n, h, w, c = images.shape
    flat = images.transpose(1, 2, 0, 3).reshape(h, w, n * c)
    out = bilinear_resize(flat, target).reshape(target, target, n, c)
    return out.transpose(2, 0, 1, 3).astype(np.float32)


# ---------------------------------------------------------------------------
# Stratification
# ---------------------------------------------------------------------------

def _largest_remainder(n_total: int, weights: np.ndarray) -> np.ndarray:
    quotas = n_total * weights / weights.sum()
    counts = np.floor(quotas).astype(np.int64)
    remainder = quotas - counts
    short = n_total - counts.sum()
    # stable sort keeps ascending class id among equal remainders
    order = np.argsort(-remainder, kind="stable")
    counts[order[:short]] += 1
    return counts


def stratified_counts(n_total: int, dist=None, *, num_classes: int | None = None) -> np.ndarray:
    """Per-class counts summing exactly to ``n_total``.

    With ``dist`` given the counts are proportional to it; otherwise
    ``num_classes`` selects a uniform split.  Both use largest-remainder
    apportionment, ties going to the lower class id.
    """
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    if dist is None:
        if not num_classes or num_classes < 1:
            raise ValueError("uniform mode needs num_classes >= 1")
        if n_total < num_classes:
            raise ValueError("uniform mode needs n_total >= number of classes")
        weights = np.ones(num_classes)
    else:
        weights = np.asarray(dist, dtype=np.float64)
        if weights.ndim != 1 or (weights < 0).any() or weights.sum() <= 0:
            raise ValueError("distribution must be non-negative with a positive sum")
    return _largest_remainder(n_total, weights)


def stratified_split(ds: LabeledDataset, fraction: float, seed: int):
    """Split off a stratified ``fraction`` of ``ds``; returns ``(rest, held_out)``."""
    n_held = int(round(fraction * len(ds)))
    if n_held <= 0:
        raise DatasetError("held-out split would be empty")
    counts = stratified_counts(n_held, ds.class_distribution())
    rng = np.random.default_rng(seed)
    held = []
    for c, k in enumerate(counts):
        idx = np.flatnonzero(ds.labels == c)
        held.extend(rng.permutation(idx)[:k].tolist())
    mask = np.zeros(len(ds), dtype=bool)
    mask[held] = True
    return ds.subset(np.flatnonzero(~mask)), ds.subset(np.flatnonzero(mask))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def write_manifest(path: Path, entries: Mapping[str, object]) -> None:
    lines = []
    for key, value in entries.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> dict[str, str]:
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def load_dataset(root, manifest=None, resolution: int | None = None) -> LabeledDataset:
    """Load ``<root>/<class_name>/*.png`` using the manifest's class order.

    Images are resized (bilinear) to ``resolution`` when given and
    normalised to ``[-1, 1]`` eagerly.
    """
    root = Path(root)
    manifest = Path(manifest) if manifest is not None else root / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"manifest not found: {manifest}")
    entries = read_manifest(manifest)
    if "classes" not in entries:
        raise DatasetError(f"{manifest}: missing 'classes'")
    class_names = [c.strip() for c in entries["classes"].split(",") if c.strip()]
    images, labels = [], []
    for class_id, name in enumerate(class_names):
        class_dir = root / name
        if not class_dir.is_dir():
            raise DatasetError(f"missing class directory: {class_dir}")
        files = sorted(p for p in class_dir.iterdir() if p.is_file())
        if not files:
            raise DatasetError(f"class directory is empty: {class_dir}")
        for path in files:
            try:
                with Image.open(path) as im:
                    raw = np.asarray(im.convert("RGB"), dtype=np.float64)
            except Exception as exc:
                raise DatasetError(f"cannot decode image {path}: {exc}") from exc
            if resolution is not None and raw.shape[0] != resolution:
                raw = np.clip(bilinear_resize(raw, resolution), 0, 255)
            images.append(normalize_to_unit_range(raw))
            labels.append(class_id)
    if len({im.shape for im in images}) > 1:
        raise DatasetError("images differ in size; pass a resolution to resize")
    meta = {k: v for k, v in entries.items() if k not in ("classes", "split", "provenance")}
    return LabeledDataset(
        np.stack(images), np.array(labels), class_names,
        split=entries.get("split", "train"),
        provenance=entries.get("provenance", "real"),
        meta=meta,
    )


def write_dataset(ds: LabeledDataset, root, overwrite: bool = False,
                  extra: Mapping[str, object] | None = None) -> Path:
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise FileExistsError(f"target directory is not empty: {root}")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(ds.images)
    index = np.zeros(ds.num_classes, dtype=np.int64)
    width = max(5, len(str(len(ds))))
    for name in ds.class_names:
        (root / name).mkdir()
    for img, label in zip(pixels, ds.labels):
        name = ds.class_names[label]
        Image.fromarray(img).save(root / name / f"{index[label]:0{width}d}.png")
        index[label] += 1
    entries: dict[str, object] = {
        "split": ds.split,
        "provenance": ds.provenance,
        "classes": ds.class_names,
        "resolution": ds.resolution,
        "size": len(ds),
    }
    entries.update(ds.meta)
    if extra:
        entries.update(extra)
    path = root / MANIFEST_NAME
    write_manifest(path, entries)
    return path


def save_synthetic_dataset(ds: LabeledDataset, root, overwrite: bool = False) -> Path:
    """Write a synthetic dataset; generation parameters live in ``ds.meta``."""
    if ds.provenance != "synthetic":
        raise DatasetError("save_synthetic_dataset expects a synthetic dataset")
    return write_dataset(ds, root, overwrite=overwrite)


# ---------------------------------------------------------------------------
# Toy data
# ---------------------------------------------------------------------------

def _shape_mask(shape: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if shape == "triangle":
        return (dy <= 0.7 * r) & (dy >= -r + 1.6 * np.abs(dx))
    if shape == "cross":
        t = 0.3 * r
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if shape == "hbar":
        return (np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r)
    if shape == "vbar":
        return (np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= r)
    raise ValueError(f"unknown shape {shape!r}")


def render_shape(shape: str, resolution: int, rng: np.random.Generator) -> np.ndarray:
    """One raw ``uint8`` RGB image of a coloured shape on a plain background."""
    yy, xx = np.mgrid[0:resolution, 0:resolution] + 0.5
    r = rng.uniform(0.25, 0.4) * resolution
    cy, cx = rng.uniform(r, resolution - r, size=2)
    background = rng.uniform(0, 90, size=3)
    foreground = rng.uniform(150, 255, size=3)
    mask = _shape_mask(shape, yy, xx, cy, cx, r)
    img = np.where(mask[..., None], foreground, background)
    img = img + rng.normal(0, 3, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_toy_dataset(n_per_class, num_classes: int = 3, resolution: int = 32, seed: int = 0,
                     class_offset: int = 0, split: str = "train") -> LabeledDataset:
    """Coloured geometric shapes, one shape type per class.

    ``n_per_class`` is an int or a per-class sequence of counts.
    ``class_offset`` picks a disjoint block of shapes (used for the
    pre-training source set).
    """
    if class_offset + num_classes > len(TOY_SHAPES):
        raise ValueError(f"at most {len(TOY_SHAPES)} toy shapes are available")
    counts = np.broadcast_to(np.asarray(n_per_class, dtype=np.int64), (num_classes,))
    names = list(TOY_SHAPES[class_offset:class_offset + num_classes])
    rng = np.random.default_rng([seed, class_offset, SPLITS.index(split)])
    images, labels = [], []
    for class_id, (name, count) in enumerate(zip(names, counts)):
        for _ in range(int(count)):
            images.append(normalize_to_unit_range(render_shape(name, resolution, rng)))
            labels.append(class_id)
    ds = LabeledDataset(np.stack(images), np.array(labels), names, split=split, provenance="real")
    ds.meta["source"] = f"toy:shapes:offset={class_offset}:seed={seed}"
    return ds


def write_toy_dataset(root, n_per_class, num_classes: int = 3, resolution: int = 32,
                      seed: int = 0, class_offset: int = 0, split: str = "train",
                      overwrite: bool = False) -> Path:
    ds = make_toy_dataset(n_per_class, num_classes, resolution, seed, class_offset, split)
    return write_dataset(ds, root, overwrite=overwrite)


def scale_distribution(dist: Sequence[int], factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError("scaling factor must be >= 1")
    return np.asarray(dist, dtype=np.int64) * int(factor)
