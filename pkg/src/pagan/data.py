"""Datasets (Gaussian ring, synthetic shapes, MNIST IDX) and image/point writers."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pagan.errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Items in [-1, 1]: images (N, C, H, W) or points (N, D), optional labels."""

    items: np.ndarray
    labels: np.ndarray | None = None
    name: str = "data"
    scale: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.items):
            raise ValueError(f"{len(self.items)} items but {len(self.labels)} labels")

    def __len__(self):
        return len(self.items)

    def subset(self, n, rng=None):
        idx = np.arange(n) if rng is None else np.sort(rng.choice(len(self), n, replace=False))
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.items[idx], labels, self.name, self.scale)

    def batches(self, batch_size, rng):
        """Shuffled full batches of one epoch; order depends only on ``rng``."""
        order = rng.permutation(len(self))
        for i in range(0, len(order) - batch_size + 1, batch_size):
            yield self.items[order[i:i + batch_size]]


# --- MNIST IDX -----------------------------------------------------------------

def _read_bytes(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(blob, expected_magic, what):
    """Header dims and uint8 payload of one IDX file."""
    if len(blob) < 4:
        raise FormatError(f"{what}: file too short for a magic number", f"{what}.magic")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise FormatError(f"{what}: magic {magic:#010x}, expected {expected_magic:#010x}",
                          f"{what}.magic")
    ndim = magic & 0xFF
    if len(blob) < 4 + 4 * ndim:
        raise FormatError(f"{what}: truncated dimension header", f"{what}.dims")
    dims = struct.unpack(f">{ndim}I", blob[4:4 + 4 * ndim])
    size = int(np.prod(dims, dtype=np.int64))
    payload = blob[4 + 4 * ndim:]
    if len(payload) < size:
        raise FormatError(f"{what}: payload has {len(payload)} bytes, header declares {size}",
                          f"{what}.payload")
    if len(payload) > size:
        raise FormatError(f"{what}: {len(payload) - size} trailing bytes after payload",
                          f"{what}.payload")
    return dims, np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def pixels_to_unit(pixels):
    """[0, 255] bytes -> [-1, 1], exactly affine."""
    return (np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0))


def load_mnist_idx(images_path, labels_path, limit=None):
    _, images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    _, labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if images.ndim != 3:
        raise FormatError(f"images: expected 3 dims, got {images.ndim}", "images.dims")
    if len(images) != len(labels):
        raise FormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels", "count")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    items = pixels_to_unit(images)[:, None, :, :]
    return Dataset(items, labels.astype(np.int64), "mnist")


def write_idx(path, array, magic):
    """Write uint8 ``array`` as an IDX file (gzipped when ``path`` ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    blob = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(blob)


def find_mnist(data_dir):
    """(images, labels) paths in ``data_dir``; training files preferred over t10k."""
    data_dir = Path(data_dir)
    for prefix in ("train", "t10k"):
        for suffix in ("", ".gz"):
            img = data_dir / f"{prefix}-images-idx3-ubyte{suffix}"
            lab = data_dir / f"{prefix}-labels-idx1-ubyte{suffix}"
            if img.exists() and lab.exists():
                return img, lab
    raise FileNotFoundError(f"no MNIST IDX files in {data_dir}")


# --- Gaussian ring --------------------------------------------------------------

@dataclass(frozen=True)
class GaussianRingSpec:
    modes: int = 8
    radius: float = 2.0
    std: float = 0.05
    n: int = 10000

    def __post_init__(self):
        if self.modes < 1:
            raise ValueError(f"modes must be >= 1, got {self.modes}")
        if self.std <= 0:
            raise ValueError(f"std must be > 0, got {self.std}")

    def centers(self):
        angle = 2 * np.pi * np.arange(self.modes) / self.modes
        return self.radius * np.stack([np.cos(angle), np.sin(angle)], axis=1)


def gaussian_ring(spec, rng):
    labels = rng.integers(0, spec.modes, size=spec.n)
    points = spec.centers()[labels] + spec.std * rng.standard_normal((spec.n, 2))
    return Dataset(points.astype(np.float32), labels, "ring", scale=(-np.inf, np.inf))


def mode_coverage(points, spec, radius_stds=3.0, min_fraction=0.02):
    """Per-mode fraction of ``points`` within ``radius_stds`` stds of each center."""
    d = np.linalg.norm(np.asarray(points)[:, None, :] - spec.centers()[None], axis=2)
    frac = np.mean(d <= radius_stds * spec.std, axis=0)
    return frac, int(np.sum(frac >= min_fraction))


class RingClassifier:
    """Exact mode posterior of an equal-weight ring mixture; features are the points."""

    def __init__(self, spec):
        self.spec = spec
        self.n_classes = spec.modes

    @classmethod
    def for_config(cls, config):
        return cls(GaussianRingSpec(config.ring_modes, config.ring_radius, config.ring_std))

    def predict_proba(self, x):
        x = np.asarray(x, dtype=np.float64)
        sq = np.sum((x[:, None, :] - self.spec.centers()[None]) ** 2, axis=2)
        logits = -sq / (2 * self.spec.std ** 2)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def features(self, x):
        return np.asarray(x, dtype=np.float64)


# --- synthetic shapes ---------------------------------------------------------

SHAPE_NAMES = ("square", "disk", "cross", "ring")


def shapes_dataset(n, size=16, rng=None):
    """Binary glyphs of four classes at random positions and scales, in {-1, 1}."""
    rng = rng or np.random.default_rng(0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = rng.integers(0, len(SHAPE_NAMES), size=n)
    images = np.full((n, 1, size, size), -1.0, dtype=np.float32)
    for i, k in enumerate(labels):
        r = rng.uniform(0.2, 0.32) * size
        cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
        dy, dx = yy - cy, xx - cx
        if k == 0:
            mask = (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
        elif k == 1:
            mask = dy ** 2 + dx ** 2 <= r ** 2
        elif k == 2:
            arm = max(1.0, r * 0.3)
            mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
        else:
            d = np.sqrt(dy ** 2 + dx ** 2)
            mask = (d <= r) & (d >= r * 0.55)
        images[i, 0][mask] = 1.0
    return Dataset(images, labels.astype(np.int64), "shapes")


def load_dataset(config):
    rng = np.random.default_rng([config.seed, 1])
    if config.dataset == "ring":
        spec = GaussianRingSpec(config.ring_modes, config.ring_radius, config.ring_std, config.n_data)
        return gaussian_ring(spec, rng)
    if config.dataset == "shapes":
        return shapes_dataset(config.n_data, 16, rng)
    images, labels = find_mnist(config.data_dir)
    return load_mnist_idx(images, labels, limit=config.n_data)


# --- writers ------------------------------------------------------------------

def to_bytes(images):
    """[-1, 1] -> [0, 255] with rounding half-up."""
    v = (np.asarray(images, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def interleave(originals, reconstructions):
    """o1 r1 o2 r2 ... so that a grid shows each reconstruction right of its original."""
    originals, reconstructions = np.asarray(originals), np.asarray(reconstructions)
    if originals.shape != reconstructions.shape:
        raise ValueError(f"shape mismatch: {originals.shape} vs {reconstructions.shape}")
    out = np.empty((2 * len(originals),) + originals.shape[1:], dtype=originals.dtype)
    out[0::2], out[1::2] = originals, reconstructions
    return out


def image_grid(images, cols):
    """Tile (N, C, H, W) row-major into (C, rows*H, cols*W); empty cells are -1."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError(f"expected (N, C, H, W), got {images.shape}")
    if cols < 1:
        raise ValueError("cols must be >= 1")
    n, c, h, w = images.shape
    rows = -(-n // cols)
    grid = np.full((rows * cols, c, h, w), -1.0, dtype=np.float64)
    grid[:n] = images
    return grid.reshape(rows, cols, c, h, w).transpose(2, 0, 3, 1, 4).reshape(c, rows * h, cols * w)


def write_image_grid(images, cols, path):
    """Binary PGM (1 channel) or PPM (3 channels)."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] not in (1, 3):
        raise ValueError(f"unsupported image layout {images.shape}: need 1 or 3 channels")
    grid = to_bytes(image_grid(images, cols))
    c, height, width = grid.shape
    kind = b"P5" if c == 1 else b"P6"
    payload = grid[0] if c == 1 else grid.transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(kind + b"\n%d %d\n255\n" % (width, height))
        f.write(np.ascontiguousarray(payload).tobytes())
    return Path(path)


def read_pnm(path):
    """Raw bytes of a binary PGM/PPM as (C, H, W) uint8."""
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    pos += 1
    kind, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if kind not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"{path}: unsupported PNM header {kind!r} maxval {maxval}", "header")
    c = 1 if kind == b"P5" else 3
    data = np.frombuffer(blob, dtype=np.uint8, offset=pos)
    if data.size != c * width * height:
        raise FormatError(f"{path}: payload size {data.size} != {c * width * height}", "payload")
    return data.reshape(height, width, c).transpose(2, 0, 1)


def write_points(points, path):
    """Plain-text scatter dump, one row of coordinates per line."""
    np.savetxt(path, np.asarray(points, dtype=np.float64), fmt="%.6f", delimiter=" ")
    return Path(path)
