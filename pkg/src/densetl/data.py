"""Image loading, resizing, augmentation, splitting and batching.

Datasets live on disk as one subdirectory per class. PNG and JPEG are decoded
with Pillow; the codec-free ``IMGR`` format (magic, u32 LE width, height,
channels=3, then row-major u8 RGB) exists so fixtures need no codec.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .nn import one_hot
from .tensor import DTYPE, Tensor

IMGR_MAGIC = b"IMGR"
_IMGR_HEADER = struct.Struct("<4sIII")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".imgr"}


class DataError(ValueError):
    pass


@dataclass
class ImageRecord:
    pixels: np.ndarray  # H×W×3 uint8
    label: int
    source_id: str

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or min(px.shape[:2]) < 1:
            raise DataError(f"{self.source_id}: expected H×W×3 pixels, got {px.shape}")
        self.pixels = px.astype(np.uint8, copy=False)


@dataclass
class Dataset:
    records: list[ImageRecord]
    class_names: list[str]

    def __post_init__(self):
        k = len(self.class_names)
        for r in self.records:
            if not 0 <= r.label < k:
                raise DataError(f"{r.source_id}: label {r.label} outside {k} classes")

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def map(self, fn) -> "Dataset":
        return Dataset([fn(r) for r in self.records], list(self.class_names))


@dataclass(frozen=True)
class AugmentSpec:
    rotation_degrees: float = 20.0
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5

    def __post_init__(self):
        if self.rotation_degrees < 0:
            raise ValueError("rotation_degrees must be >= 0")
        for p in (self.hflip_prob, self.vflip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability must lie in [0, 1], got {p}")

    @property
    def is_identity(self) -> bool:
        return self.rotation_degrees == 0 and self.hflip_prob == 0 and self.vflip_prob == 0


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def write_imgr(path, pixels: np.ndarray) -> None:
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, c = px.shape
    with open(path, "wb") as fh:
        fh.write(_IMGR_HEADER.pack(IMGR_MAGIC, w, h, c))
        fh.write(px.tobytes())


def _decode_imgr(raw: bytes, path: Path) -> np.ndarray:
    if len(raw) < _IMGR_HEADER.size:
        raise DataError(f"{path}: truncated IMGR header")
    magic, w, h, c = _IMGR_HEADER.unpack_from(raw)
    if magic != IMGR_MAGIC or c != 3 or w < 1 or h < 1:
        raise DataError(f"{path}: invalid IMGR header")
    body = raw[_IMGR_HEADER.size:]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: IMGR body has {len(body)} bytes, expected {w * h * 3}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def read_image(path) -> np.ndarray:
    """Decode a PNG, JPEG or IMGR file to H×W×3 uint8."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == IMGR_MAGIC:
        return _decode_imgr(raw, path)
    if path.suffix.lower() not in IMAGE_SUFFIXES - {".imgr"}:
        raise DataError(f"{path}: unsupported image format")
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise DataError(f"{path}: unsupported codec {im.format}")
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from None


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: dataset root does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise DataError(f"{root}: no class subdirectories")
    records = []
    for label, d in enumerate(class_dirs):
        for f in sorted(p for p in d.rglob("*") if p.is_file() and not p.name.startswith(".")):
            records.append(ImageRecord(read_image(f), label, str(f.relative_to(root))))
    return Dataset(records, [d.name for d in class_dirs])


def write_dataset(ds: Dataset, root, fmt: str = "imgr") -> Path:
    """Write ``ds`` as a directory-per-class tree (``imgr`` or ``png``)."""
    root = Path(root)
    for i, r in enumerate(ds.records):
        d = root / ds.class_names[r.label]
        d.mkdir(parents=True, exist_ok=True)
        target = d / f"{i:05d}.{fmt}"
        if fmt == "imgr":
            write_imgr(target, r.pixels)
        elif fmt == "png":
            from PIL import Image

            Image.fromarray(r.pixels).save(target)
        else:
            raise ValueError(f"unknown output format {fmt!r}")
    return root


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def _bilinear_axis(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, clamped at the border
    pos = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_pixels(px: np.ndarray, h: int, w: int) -> np.ndarray:
    if h < 1 or w < 1:
        raise ValueError(f"resize target must be positive, got {h}x{w}")
    sh, sw = px.shape[:2]
    if (sh, sw) == (h, w):
        return px.copy()
    y0, y1, wy = _bilinear_axis(sh, h)
    x0, x1, wx = _bilinear_axis(sw, w)
    f = px.astype(np.float64)
    top = f[y0][:, x0] * (1 - wx)[None, :, None] + f[y0][:, x1] * wx[None, :, None]
    bot = f[y1][:, x0] * (1 - wx)[None, :, None] + f[y1][:, x1] * wx[None, :, None]
    out = top * (1 - wy)[:, None, None] + bot * wy[:, None, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize(img: ImageRecord, h: int, w: int) -> ImageRecord:
    return replace(img, pixels=resize_pixels(img.pixels, h, w))


def rotate_pixels(px: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image centre; uncovered pixels are black.

    Positive angles turn the image counter-clockwise as displayed (row 0 on top).
    """
    if degrees % 360 == 0:
        return px.copy()
    h, w = px.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    theta = -math.radians(degrees)  # rows grow downward, so flip the sign
    c, s = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    sy = cy + c * dy - s * dx
    sx = cx + s * dy + c * dx
    # sample from a zero-padded copy so out-of-frame neighbours read black
    padded = np.zeros((h + 2, w + 2, 3), dtype=np.float64)
    padded[1:-1, 1:-1] = px
    sy, sx = sy + 1, sx + 1
    inside = (sy >= 0) & (sy <= h + 1) & (sx >= 0) & (sx <= w + 1)
    sy, sx = np.clip(sy, 0, h + 1), np.clip(sx, 0, w + 1)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w)
    fy, fx = (sy - y0)[..., None], (sx - x0)[..., None]
    out = (padded[y0, x0] * (1 - fy) * (1 - fx) + padded[y0, x0 + 1] * (1 - fy) * fx
           + padded[y0 + 1, x0] * fy * (1 - fx) + padded[y0 + 1, x0 + 1] * fy * fx)
    out[~inside] = 0
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def augment(img: ImageRecord, spec: AugmentSpec, rng: np.random.Generator) -> ImageRecord:
    """Random rotation in [-r, r] degrees, then independent horizontal/vertical flips.

    Draws exactly three values from ``rng`` whatever ``spec`` says.
    """
    angle = rng.uniform(-spec.rotation_degrees, spec.rotation_degrees)
    hflip = rng.random() < spec.hflip_prob
    vflip = rng.random() < spec.vflip_prob
    px = img.pixels
    if angle != 0:
        px = rotate_pixels(px, angle)
    if hflip:
        px = px[:, ::-1]
    if vflip:
        px = px[::-1]
    if px is img.pixels:
        return img
    return replace(img, pixels=np.ascontiguousarray(px))


def normalize(img) -> np.ndarray:
    """uint8 H×W×3 -> float32 3×H×W in [0, 1]."""
    px = img.pixels if isinstance(img, ImageRecord) else np.asarray(img)
    return (px.astype(DTYPE) / DTYPE(255.0)).transpose(2, 0, 1).copy()


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------

def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified, seeded split. The train total is round(fraction * N); per-class
    quotas use largest remainders so each class is within one record of its share."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    labels = ds.labels()
    k = len(ds.class_names)
    counts = np.bincount(labels, minlength=k)
    for c in range(k):
        if counts[c] == 0:
            raise DataError(f"class {ds.class_names[c]!r} has no records")
    exact = counts * train_fraction
    quota = np.floor(exact).astype(np.int64)
    remaining = int(round(train_fraction * len(ds))) - int(quota.sum())
    order = sorted(range(k), key=lambda c: (-(exact[c] - quota[c]), c))
    for c in order[:max(remaining, 0)]:
        quota[c] += 1

    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    for c in range(k):
        members = np.flatnonzero(labels == c)
        train_idx.extend(members[rng.permutation(len(members))[:quota[c]]].tolist())
    chosen = np.zeros(len(ds), dtype=bool)
    chosen[train_idx] = True
    train = [r for r, keep in zip(ds.records, chosen) if keep]
    val = [r for r, keep in zip(ds.records, chosen) if not keep]
    return Dataset(train, list(ds.class_names)), Dataset(val, list(ds.class_names))


@dataclass
class Batch:
    x: Tensor
    y: np.ndarray  # one-hot N×K
    labels: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __iter__(self):
        return iter((self.x, self.y))


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(
    ds: Dataset,
    batch_size: int,
    shuffle: bool = True,
    seed: int = 0,
    epoch: int = 0,
    augment_spec: Optional[AugmentSpec] = None,
) -> Iterator[Batch]:
    """Yield (N×3×H×W input, one-hot labels) batches; the last batch may be short.

    The permutation is keyed by (seed, epoch) and each record's augmentation
    by (seed, epoch, record index), so any epoch can be replayed on its own.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(ds) == 0:
        raise DataError("cannot batch an empty dataset")
    order = epoch_order(len(ds), shuffle, seed, epoch)
    k = len(ds.class_names)
    use_aug = augment_spec is not None and not augment_spec.is_identity
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        arrays = []
        for i in idx:
            rec = ds.records[i]
            if use_aug:
                rec = augment(rec, augment_spec, np.random.default_rng([seed, epoch, int(i), 7]))
            arrays.append(normalize(rec))
        labels = np.array([ds.records[i].label for i in idx], dtype=np.int64)
        yield Batch(Tensor(np.stack(arrays)), one_hot(labels, k), labels, idx)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

# One colour per class; task B mixes the task-A primaries so features transfer.
SYNTHETIC_TASKS = {
    "A": {"blue": (0, 0, 1), "green": (0, 1, 0), "red": (1, 0, 0)},
    "B": {"early_blight": (1, 1, 0), "healthy": (0, 1, 1), "late_blight": (1, 0, 1)},
}


def synthetic_blobs(n_per_class: int, size: int, seed: int, task: str = "B") -> Dataset:
    """Three-class images: a noisy dark background with one soft coloured blob.

    The class is the blob colour, so class means are linearly separable.
    """
    if task not in SYNTHETIC_TASKS:
        raise DataError(f"unknown synthetic task {task!r}")
    palette = SYNTHETIC_TASKS[task]
    names = sorted(palette)
    rng = np.random.default_rng([seed, ord(task)])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    records = []
    for i in range(n_per_class):
        for label, name in enumerate(names):
            bg = rng.uniform(0, 60, size=(size, size, 3))
            cy, cx = rng.uniform(0.25, 0.75, size=2) * size
            sigma = rng.uniform(0.12, 0.22) * size
            amp = rng.uniform(150, 220)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            px = bg + amp * blob[..., None] * np.array(palette[name], dtype=np.float64)
            records.append(ImageRecord(np.clip(np.rint(px), 0, 255).astype(np.uint8), label,
                                       f"synthetic-{task}/{name}/{i:04d}"))
    return Dataset(records, names)
