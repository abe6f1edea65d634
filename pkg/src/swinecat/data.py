"""Image ingestion, the fixed preprocessing pipeline, splitting and batching.

Pipeline per image: bilinear resize so the short side is 256 (long side
floored), center crop to 224x224, scale to [0, 1], per-channel
``(x - mean) / std``.  Smaller model inputs scale both numbers by the same
256/224 ratio.
"""
from __future__ import annotations

import logging
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, IngestionError
from .tensor import Tensor

log = logging.getLogger(__name__)

LABELS = (
    "Healthy",
    "Retinitis Pigmentosa",
    "Retinal Detachment",
    "Myopia",
    "Macular Scar",
    "Glaucoma",
    "Optic Disc Edema",
    "Diabetic Retinopathy",
    "Central Serous Chorioretinopathy",
)
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}

SPLITS = ("train", "val", "test")
STD_EPS = 1e-6
IMAGE_SUFFIXES = (".ppm", ".png")


# ------------------------------------------------------------------ decoding

def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestionError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    """Binary (P6) 8-bit PPM bytes -> ``uint8[H, W, 3]``."""
    tokens, offset = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise IngestionError(f"not a binary PPM (magic {tokens[0][:8]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise IngestionError("malformed PPM header") from exc
    if width <= 0 or height <= 0:
        raise IngestionError(f"degenerate PPM size {width}x{height}")
    if maxval != 255:
        raise IngestionError(f"only 8-bit PPM is supported (maxval {maxval})")
    need = width * height * 3
    pixels = buf[offset:offset + need]
    if len(pixels) != need:
        raise IngestionError(f"PPM pixel data truncated: {len(pixels)} of {need} bytes")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + image.tobytes()


def read_image(path, allow_png: bool = False) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        if not allow_png:
            raise IngestionError(f"{path}: PNG input is disabled (enable allow_png)")
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    else:
        try:
            arr = decode_ppm(path.read_bytes())
        except IngestionError as exc:
            raise IngestionError(f"{path}: {exc}") from None
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise IngestionError(f"{path}: image has a zero dimension")
    return arr


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


# ------------------------------------------------------------- preprocessing

def resize_target(image_size: int) -> int:
    """Short-side resize length for a given crop; 224 maps to 256."""
    return image_size * 256 // 224


def resized_shape(height: int, width: int, short: int = 256) -> tuple[int, int]:
    if height <= 0 or width <= 0:
        raise IngestionError(f"degenerate image size {height}x{width}")
    if height <= width:
        return short, width * short // height
    return height * short // width, short


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and edge clamping (float64 out)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    fr = fr[:, None, None]
    rows = img[r0] * (1 - fr) + img[r1] * fr
    fc = fc[None, :, None]
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def crop_offsets(height: int, width: int, size: int) -> tuple[int, int]:
    return (height - size) // 2, (width - size) // 2


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise IngestionError(f"image {h}x{w} is smaller than the {size}x{size} crop")
    top, left = crop_offsets(h, w, size)
    return image[top:top + size, left:left + size]


def resize_and_crop(image: np.ndarray, crop: int = 224, short: int | None = None) -> np.ndarray:
    """Steps 1-3 of the pipeline: ``uint8[H, W, 3] -> float64[crop, crop, 3]`` in [0, 1]."""
    short = resize_target(crop) if short is None else short
    h, w = image.shape[:2]
    out_h, out_w = resized_shape(h, w, short)
    return center_crop(resize_bilinear(image, out_h, out_w), crop) / 255.0


def preprocess(image: np.ndarray, mean: Sequence[float] = (0.0, 0.0, 0.0),
               std: Sequence[float] = (1.0, 1.0, 1.0), crop: int = 224) -> np.ndarray:
    """Decoded RGB raster -> normalized ``float32[3, crop, crop]``."""
    x = resize_and_crop(image, crop)
    x = (x - np.asarray(mean)) / np.maximum(np.asarray(std), STD_EPS)
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)


# ------------------------------------------------------------------ manifest

@dataclass(frozen=True)
class Record:
    path: str
    label: int
    split: str = "train"


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path = Path(".")
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)
    image_size: int = 224
    allow_png: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def path_of(self, record: Record) -> Path:
        return self.root / record.path

    def select(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def with_records(self, records) -> "DatasetManifest":
        return replace(self, records=list(records), _cache={})

    def load(self, record: Record, cache: bool = False) -> np.ndarray:
        if cache and record.path in self._cache:
            return self._cache[record.path]
        arr = preprocess(read_image(self.path_of(record), self.allow_png), self.mean, self.std, self.image_size)
        if cache:
            self._cache[record.path] = arr
        return arr


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = ["#stats " + " ".join(repr(float(v)) for v in (*manifest.mean, *manifest.std))]
    lines += [f"{r.path}\t{r.label}\t{r.split}" for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path, image_size: int = 224, allow_png: bool = False) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest not found: {path}")
    mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#stats"):
            vals = [float(v) for v in line.split()[1:]]
            if len(vals) != 6:
                raise IngestionError(f"{path}:{lineno}: #stats needs six numbers")
            mean, std = tuple(vals[:3]), tuple(vals[3:])
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in SPLITS:
            raise IngestionError(f"{path}:{lineno}: expected '<path>\\t<label>\\t<split>'")
        try:
            label = int(parts[1])
        except ValueError:
            raise IngestionError(f"{path}:{lineno}: label is not an integer") from None
        if not 0 <= label < len(LABELS):
            raise IngestionError(f"{path}:{lineno}: label {label} out of range")
        records.append(Record(parts[0], label, parts[2]))
    if not np.all(np.isfinite(mean + std)) or min(std) <= 0:
        raise IngestionError(f"{path}: normalization stats must be finite with positive std")
    return DatasetManifest(records, path.parent, mean, std, image_size, allow_png)


def scan_directory(root, image_size: int = 224, allow_png: bool = False) -> DatasetManifest:
    """Build an (unsplit) manifest from one sub-directory per class name."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"data directory not found: {root}")
    suffixes = IMAGE_SUFFIXES if allow_png else (".ppm",)
    records = []
    for label, name in enumerate(LABELS):
        folder = root / name
        if not folder.is_dir():
            continue
        for f in sorted(folder.iterdir()):
            if f.suffix.lower() in suffixes:
                records.append(Record(f"{name}/{f.name}", label))
    if not records:
        raise IngestionError(f"no class images found under {root}")
    return DatasetManifest(records, root, image_size=image_size, allow_png=allow_png)


def compute_stats(manifest: DatasetManifest, scope: str = "all") -> tuple[tuple, tuple]:
    """Channel mean and population std of resized, cropped, [0, 1]-scaled pixels.

    ``scope`` is ``"all"`` or one split name.
    """
    records = manifest.records if scope == "all" else manifest.select(scope)
    if not records:
        raise ContractError(f"no images in stats scope {scope!r}")
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for r in records:
        x = resize_and_crop(read_image(manifest.path_of(r), manifest.allow_png), manifest.image_size).reshape(-1, 3)
        total += x.sum(axis=0)
        total_sq += (x * x).sum(axis=0)
        count += x.shape[0]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), STD_EPS)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def split(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Stratified 80/10/10 assignment.

    Each class is shuffled with a seeded generator; val and test each take
    ``floor(n / 10)`` items and the remainder goes to train.
    """
    rng = np.random.default_rng(seed)
    assigned = {}
    for label in range(len(LABELS)):
        members = [i for i, r in enumerate(manifest.records) if r.label == label]
        if not members:
            continue
        order = [members[i] for i in rng.permutation(len(members))]
        n_hold = len(members) // 10
        n_train = len(members) - 2 * n_hold
        for rank, i in enumerate(order):
            assigned[i] = "train" if rank < n_train else ("val" if rank < n_train + n_hold else "test")
    return manifest.with_records(replace(r, split=assigned[i]) for i, r in enumerate(manifest.records))


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    images: Tensor
    labels: np.ndarray


def default_workers() -> int:
    raw = os.environ.get("SWINECAT_THREADS", "0").strip() or "0"
    n = int(raw)
    return n if n > 0 else (os.cpu_count() or 1)


def batches(manifest: DatasetManifest, split_name: str, batch_size: int, shuffle: bool = False,
            seed: int = 0, epoch: int = 0, workers: int = 1, prefetch: int = 2,
            cache: bool = False) -> Iterator[Batch]:
    """Stream one epoch of ``split_name`` in batches.

    Shuffled order is a permutation keyed by ``(seed, epoch)``; otherwise
    manifest order.  With ``workers > 1`` up to ``prefetch`` batches are
    decoded ahead on a thread pool but always delivered in sequence.
    """
    records = manifest.select(split_name)
    if not records:
        raise IngestionError(f"split {split_name!r} is empty")
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle:
        perm = np.random.default_rng([seed, epoch]).permutation(len(records))
        records = [records[i] for i in perm]
    chunks = [records[i:i + batch_size] for i in range(0, len(records), batch_size)]

    def load(chunk):
        images = np.stack([manifest.load(r, cache) for r in chunk])
        return Batch(Tensor(images), np.array([r.label for r in chunk], dtype=np.int64))

    if workers <= 1:
        for chunk in chunks:
            yield load(chunk)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        todo = iter(chunks)
        for chunk in todo:
            pending.append(pool.submit(load, chunk))
            if len(pending) > prefetch:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


# --------------------------------------------------------------- synthetic

_FUNDUS = np.array([170.0, 60.0, 25.0])


def _disc(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _paint(img, where, color, alpha=1.0):
    img[where] = img[where] * (1 - alpha) + np.asarray(color, dtype=np.float64) * alpha


def synth_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One fundus-like ``uint8[size, size, 3]`` raster with a class motif."""
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    jy, jx = rng.uniform(-0.02, 0.02, 2)
    cy, cx = 0.5 + jy, 0.5 + jx
    rr = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    img = np.zeros((size, size, 3))
    inside = rr <= 0.46
    tint = np.array([200.0, 110.0, 70.0]) if label == 3 else _FUNDUS
    img[inside] = tint * (1 - 0.35 * (rr[inside] / 0.46) ** 2)[:, None]
    oy, ox = cy, cx + 0.2
    disc_r = {5: 0.12, 6: 0.15}.get(label, 0.07)

    if label == 6:
        glow = np.exp(-((yy - oy) ** 2 + (xx - ox) ** 2) / (2 * 0.07 ** 2))[..., None]
        img = img * (1 - 0.9 * glow) + np.array([250.0, 220.0, 100.0]) * 0.9 * glow
    else:
        _paint(img, _disc(yy, xx, oy, ox, disc_r), (240, 200, 120))
    if label == 1:
        phase = rng.uniform(0, 2 * np.pi)
        for a in np.linspace(0, 2 * np.pi, 12, endpoint=False) + phase:
            _paint(img, _disc(yy, xx, cy + 0.32 * np.sin(a), cx + 0.32 * np.cos(a), 0.035), (40, 25, 15))
    elif label == 2:
        _paint(img, inside & (yy < cy - 0.08), (200, 190, 180), 0.8)
    elif label == 3:
        ring = _disc(yy, xx, oy, ox, 0.14) & ~_disc(yy, xx, oy, ox, 0.07) & (xx < ox)
        _paint(img, ring, (235, 215, 170))
    elif label == 4:
        _paint(img, _disc(yy, xx, cy - 0.05, cx - 0.05, 0.12), (60, 30, 20))
        _paint(img, _disc(yy, xx, cy - 0.05, cx - 0.05, 0.09), (245, 235, 200))
    elif label == 5:
        _paint(img, _disc(yy, xx, oy, ox, 0.08), (255, 250, 220))
    elif label == 7:
        for _ in range(14):
            py, px = rng.uniform(cy + 0.08, cy + 0.32), rng.uniform(cx - 0.3, cx + 0.1)
            _paint(img, _disc(yy, xx, py, px, 0.03), (110, 10, 10))
        for _ in range(6):
            py, px = rng.uniform(cy + 0.08, cy + 0.3), rng.uniform(cx - 0.3, cx + 0.1)
            _paint(img, _disc(yy, xx, py, px, 0.025), (250, 240, 90))
    elif label == 8:
        _paint(img, _disc(yy, xx, cy, cx - 0.05, 0.15), (250, 170, 120))
        _paint(img, _disc(yy, xx, cy, cx - 0.05, 0.12), (90, 40, 20))

    img += rng.normal(0.0, 10.0, img.shape) * inside[..., None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def nearest_centroid_accuracy(images: np.ndarray, labels: np.ndarray) -> float:
    """Resubstitution accuracy of a nearest-class-mean classifier on raw pixels."""
    flat = images.reshape(len(images), -1).astype(np.float64)
    classes = np.unique(labels)
    centroids = np.stack([flat[labels == c].mean(axis=0) for c in classes])
    d = ((flat[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float(np.mean(classes[d.argmin(axis=1)] == labels))


def synth_generate(out_dir, per_class: int, image_size: int = 64, seed: int = 0,
                   stats_scope: str = "all") -> DatasetManifest:
    """Write ``9 * per_class`` PPM images plus ``manifest.tsv`` under ``out_dir``.

    Images follow the one-folder-per-class layout.  The manifest is split
    and carries normalization stats.  Raises ``RuntimeError`` if a
    nearest-centroid classifier cannot separate the classes (>90%).
    """
    if per_class < 1:
        raise ContractError(f"per_class must be >= 1, got {per_class}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, images, labels = [], [], []
    for label, name in enumerate(LABELS):
        (out / name).mkdir(exist_ok=True)
        for i in range(per_class):
            img = synth_image(label, image_size, np.random.default_rng([seed, label, i]))
            rel = f"{name}/{label}_{i:04d}.ppm"
            write_ppm(out / rel, img)
            records.append(Record(rel, label))
            images.append(img)
            labels.append(label)
    acc = nearest_centroid_accuracy(np.stack(images), np.array(labels))
    log.info("synthetic set: %d images, nearest-centroid accuracy %.3f", len(records), acc)
    if acc <= 0.9:
        raise RuntimeError(f"synthetic classes are not separable enough (centroid accuracy {acc:.3f})")
    manifest = split(DatasetManifest(records, out, image_size=image_size), seed)
    manifest.mean, manifest.std = compute_stats(manifest, stats_scope)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest
