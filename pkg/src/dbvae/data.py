"""Corpus ingestion, preprocessing, stratified splitting and a synthetic face generator."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

CATEGORIES = ("happiness", "sadness", "neutrality", "anger", "surprise", "fear", "disgust", "contempt")

# Per-emotion sample counts of the reference corpus, in CATEGORIES order.
REFERENCE_COUNTS = (9049, 5403, 5072, 4725, 4226, 3454, 795, 130)

IMAGE_SIDE = 64


class DataError(Exception):
    """Problem with a corpus file or directory; ``path`` names the culprit."""

    def __init__(self, message: str, path: str | os.PathLike | None = None):
        super().__init__(f"{path}: {message}" if path is not None else message)
        self.path = None if path is None else str(path)


class PGMFormatError(DataError):
    pass


def round_half_up(x) -> int:
    return int(Fraction(x).limit_denominator(10**9) + Fraction(1, 2)) if x >= 0 else -round_half_up(-x)


# ---------------------------------------------------------------------------
# PGM


def read_pgm(path) -> np.ndarray:
    """Parse a binary (P5) 8-bit PGM file into a uint8 [H, W] array."""
    path = Path(path)
    data = path.read_bytes()
    pos = 0
    tokens: list[bytes] = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMFormatError("truncated header", path)
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise PGMFormatError(f"expected binary PGM magic P5, found {tokens[0]!r}", path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMFormatError(f"non-numeric header fields {tokens[1:]!r}", path) from None
    if maxval != 255:
        raise PGMFormatError(f"maxval {maxval} unsupported, need 8-bit grayscale (255)", path)
    if width < 1 or height < 1:
        raise PGMFormatError(f"bad dimensions {width}x{height}", path)
    pos += 1  # single whitespace after maxval
    pixels = data[pos:pos + width * height]
    if len(pixels) != width * height:
        raise PGMFormatError(f"expected {width * height} pixel bytes, found {len(pixels)}", path)
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)


def pgm_bytes(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(image))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# preprocessing


def resize_bilinear(image: np.ndarray, size: int = IMAGE_SIDE) -> np.ndarray:
    """Bilinear resize to ``size`` x ``size`` with corner-aligned sampling."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 2:
        raise DataError(f"need a 2-D image of at least 2x2 pixels, got shape {image.shape}")
    h, w = image.shape
    if (h, w) == (size, size):
        return image.copy()

    def axis_weights(n):
        pos = np.arange(size) * (n - 1) / (size - 1)
        lo = np.minimum(np.floor(pos).astype(np.int64), n - 2)
        return lo, pos - lo

    r0, fr = axis_weights(h)
    c0, fc = axis_weights(w)
    rows = image[r0] * (1 - fr)[:, None] + image[r0 + 1] * fr[:, None]
    out = rows[:, c0] * (1 - fc) + rows[:, c0 + 1] * fc
    return np.clip(out, image.min(), image.max())


def preprocess(raw: np.ndarray) -> np.ndarray:
    """uint8 image of any size -> float [64, 64] in [0, 1]."""
    return resize_bilinear(raw.astype(np.float64) / 255.0, IMAGE_SIDE)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray                      # [N, 1, 64, 64] float32 in [0, 1]
    labels: np.ndarray                      # [N] int64
    category_names: tuple[str, ...] = CATEGORIES
    source_index: np.ndarray | None = None  # position in the dataset this was split from

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.category_names)):
            raise DataError(f"labels must lie in [0, {len(self.category_names)})")
        if self.source_index is None:
            self.source_index = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.category_names))

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.category_names, self.source_index[idx])


def load_dataset(root) -> Dataset:
    """Read ``<root>/<category>/*.pgm`` for the eight categories.

    Samples are ordered by category (fixed order) and then by file name.
    """
    root = Path(root)
    images, labels = [], []
    for label, name in enumerate(CATEGORIES):
        folder = root / name
        if not folder.is_dir():
            raise DataError(f"missing category directory {name!r}", folder)
        for path in sorted(folder.glob("*.pgm")):
            images.append(preprocess(read_pgm(path)))
            labels.append(label)
    if not images:
        return Dataset(np.zeros((0, 1, IMAGE_SIDE, IMAGE_SIDE), np.float32), np.zeros(0, np.int64))
    return Dataset(np.stack(images)[:, None].astype(np.float32), np.array(labels))


def validation_count(n: int, fraction: float) -> int:
    return max(1, round_half_up(Fraction(fraction).limit_denominator(10**6) * n))


def stratified_split(dataset: Dataset, validation_fraction: float = 0.1,
                     seed: int | np.random.Generator = 0) -> tuple[Dataset, Dataset]:
    """Hold out ``max(1, round_half_up(fraction * n))`` random samples of every category."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    val_idx, train_idx = [], []
    for label, name in enumerate(dataset.category_names):
        members = np.flatnonzero(dataset.labels == label)
        if len(members) < 2:
            raise DataError(f"category {name!r} has {len(members)} samples; need at least 2 to split")
        k = validation_count(len(members), validation_fraction)
        chosen = rng.permutation(len(members))
        val_idx.append(members[np.sort(chosen[:k])])
        train_idx.append(members[np.sort(chosen[k:])])
    return dataset.subset(np.concatenate(train_idx)), dataset.subset(np.concatenate(val_idx))


def class_distribution(counts_or_dataset, names: Sequence[str] = CATEGORIES) -> list[tuple[str, int, float]]:
    """(name, count, percentage rounded to 2 decimals) per category."""
    counts = counts_or_dataset.counts() if isinstance(counts_or_dataset, Dataset) else np.asarray(counts_or_dataset)
    total = int(np.sum(counts))
    if total == 0:
        raise DataError("class distribution of an empty dataset")
    return [(n, int(c), round(100.0 * int(c) / total, 2)) for n, c in zip(names, counts)]


def format_distribution(rows) -> str:
    lines = [f"{'category':<12}{'count':>8}{'percent':>10}"]
    lines += [f"{name:<12}{count:>8}{pct:>10.2f}" for name, count, pct in rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# synthetic glyph faces


def scaled_counts(scale: float = 0.1) -> tuple[int, ...]:
    return tuple(max(1, round_half_up(Fraction(str(scale)) * c)) for c in REFERENCE_COUNTS)


@dataclass
class SyntheticSpec:
    counts: tuple[int, ...] = field(default_factory=scaled_counts)
    noise: float = 0.35
    jitter: int = 4
    seed: int = 0

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        if len(self.counts) != len(CATEGORIES):
            raise DataError(f"need {len(CATEGORIES)} category counts, got {len(self.counts)}")
        if min(self.counts) < 1:
            raise DataError("every category count must be >= 1")
        if self.noise < 0 or self.jitter < 0:
            raise DataError("noise and jitter must be non-negative")


_YY, _XX = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE].astype(np.float64)


def _stroke(canvas: np.ndarray, pts: np.ndarray, width: float = 1.2, ink: float = 0.05) -> None:
    """Draw an anti-aliased polyline through ``pts`` ([M, 2] as x, y)."""
    d = np.full(canvas.shape, np.inf)
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        vx, vy = x1 - x0, y1 - y0
        t = np.clip(((_XX - x0) * vx + (_YY - y0) * vy) / max(vx * vx + vy * vy, 1e-12), 0, 1)
        d = np.minimum(d, np.hypot(_XX - x0 - t * vx, _YY - y0 - t * vy))
    cover = np.clip(width - d + 0.5, 0, 1)
    canvas *= 1 - cover
    canvas += cover * ink


def _arc(cx, cy, half_width, bend, n=17):
    """Mouth-like curve; positive ``bend`` lifts the corners (smile)."""
    x = np.linspace(-half_width, half_width, n)
    return np.column_stack([cx + x, cy + bend * (1 - (x / half_width) ** 2) - bend])


def _ellipse(cx, cy, rx, ry, n=40):
    t = np.linspace(0, 2 * np.pi, n)
    return np.column_stack([cx + rx * np.cos(t), cy + ry * np.sin(t)])


_FEATURE_WIDTH = 2.0


def glyph_face(category: int, dx: float = 0.0, dy: float = 0.0) -> np.ndarray:
    """Noise-free 64x64 face in [0, 1] with the category's distinguishing feature."""
    cx, cy = 32 + dx, 32 + dy
    img = np.full((IMAGE_SIDE, IMAGE_SIDE), 0.2)
    face = ((_XX - cx) / 21) ** 2 + ((_YY - cy) / 26) ** 2 <= 1
    img[face] = 0.75
    _stroke(img, _ellipse(cx, cy, 21, 26))
    name = CATEGORIES[category]

    eye_r = 4.0 if name == "surprise" else 2.2
    for ex in (cx - 9, cx + 9):
        _stroke(img, _ellipse(ex, cy - 6, eye_r, eye_r * 0.9, 20), width=1.0)

    brow_y = cy - 12
    if name == "anger":
        brows = [((cx - 14, brow_y - 3), (cx - 4, brow_y + 2)), ((cx + 4, brow_y + 2), (cx + 14, brow_y - 3))]
    elif name == "fear":
        brows = [((cx - 14, brow_y - 4), (cx - 4, brow_y - 5)), ((cx + 4, brow_y - 5), (cx + 14, brow_y - 4))]
    else:
        brows = [((cx - 14, brow_y), (cx - 4, brow_y)), ((cx + 4, brow_y), (cx + 14, brow_y))]
    for a, b in brows:
        _stroke(img, np.array([a, b]), width=_FEATURE_WIDTH)

    _stroke(img, np.array([(cx, cy - 2), (cx - 1.5, cy + 5), (cx + 1.5, cy + 5)]), width=0.9)
    if name == "disgust":
        _stroke(img, np.array([(cx + 3, cy - 1), (cx + 7, cy + 2)]), width=_FEATURE_WIDTH)
        _stroke(img, np.array([(cx + 3, cy + 2), (cx + 7, cy + 5)]), width=_FEATURE_WIDTH)

    my = cy + 13
    if name == "happiness":
        _stroke(img, _arc(cx, my, 8, 3.5), width=_FEATURE_WIDTH)
    elif name == "sadness":
        _stroke(img, _arc(cx, my, 8, -3.5), width=_FEATURE_WIDTH)
    elif name == "surprise":
        _stroke(img, _ellipse(cx, my, 4, 4.5), width=_FEATURE_WIDTH)
    elif name == "fear":
        _stroke(img, _ellipse(cx, my, 5, 2.5), width=_FEATURE_WIDTH)
    elif name == "contempt":
        x = np.linspace(-7, 10, 18)
        lift = np.where(x > 0, 7.0 * (x / 10) ** 2, 0.0)
        _stroke(img, np.column_stack([cx + x, my - lift]), width=_FEATURE_WIDTH)
    else:
        _stroke(img, np.array([(cx - 8, my), (cx + 8, my)]), width=_FEATURE_WIDTH)
    return img


def synthetic_images(spec: SyntheticSpec):
    """Yield (category index, sample index, uint8 image) in a fixed order."""
    rng = np.random.default_rng(spec.seed)
    for label, count in enumerate(spec.counts):
        for i in range(count):
            dx, dy = (rng.integers(-spec.jitter, spec.jitter + 1, size=2) if spec.jitter else (0, 0))
            img = glyph_face(label, float(dx), float(dy))
            if spec.noise:
                img = img + rng.normal(0.0, spec.noise, img.shape)
            yield label, i, to_uint8(img)


def synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    """The synthetic corpus in memory, identical to what ``generate_synthetic`` writes."""
    images, labels = [], []
    for label, _, img in synthetic_images(spec):
        images.append(img.astype(np.float32) / 255.0)
        labels.append(label)
    return Dataset(np.stack(images)[:, None], np.array(labels))


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write the corpus as ``<out>/<category>/<category>_NNNNN.pgm`` plus ``manifest.json``."""
    out = Path(out_dir)
    try:
        for name in CATEGORIES:
            (out / name).mkdir(parents=True, exist_ok=True)
        for label, i, img in synthetic_images(spec):
            name = CATEGORIES[label]
            write_pgm(out / name / f"{name}_{i:05d}.pgm", img)
        manifest = {"generator": "glyph-faces", "categories": list(CATEGORIES), **asdict(spec)}
        manifest["counts"] = list(spec.counts)
        manifest["total"] = int(sum(spec.counts))
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write synthetic corpus: {exc.strerror or exc}", out) from exc
    return manifest
