"""smallNORB binary matrices, preprocessing, and a synthetic shapes dataset."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = {
    0x1E3D4C51: np.dtype("<f4"),
    0x1E3D4C53: np.dtype("<f8"),
    0x1E3D4C54: np.dtype("<i4"),
    0x1E3D4C55: np.dtype("u1"),
    0x1E3D4C56: np.dtype("<i2"),
}
_MAGIC_OF = {dt: m for m, dt in MAGIC.items()}

SMALLNORB_FILES = {
    "train": ("smallnorb-5x46789x9x18x6x2x96x96-training-dat.mat",
              "smallnorb-5x46789x9x18x6x2x96x96-training-cat.mat",
              "smallnorb-5x46789x9x18x6x2x96x96-training-info.mat"),
    "test": ("smallnorb-5x01235x9x18x6x2x96x96-testing-dat.mat",
             "smallnorb-5x01235x9x18x6x2x96x96-testing-cat.mat",
             "smallnorb-5x01235x9x18x6x2x96x96-testing-info.mat"),
}
SMALLNORB_PAIRS = 24300
SHAPES = ("bar", "corner", "cross", "disc", "ring")


class FormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path, self.offset = path, offset


def read_header(buf: bytes, path="<bytes>") -> tuple[np.dtype, tuple[int, ...], int]:
    """Parse a binary-matrix header; returns (dtype, dims, data offset)."""
    if len(buf) < 8:
        raise FormatError(path, len(buf), "truncated header")
    magic, ndim = struct.unpack_from("<iI", buf, 0)
    if magic not in MAGIC:
        raise FormatError(path, 0, f"bad magic 0x{magic & 0xFFFFFFFF:08X}")
    if not 0 < ndim <= 16:
        raise FormatError(path, 4, f"implausible ndim {ndim}")
    # at least three dimension slots are always present
    slots = max(ndim, 3)
    end = 8 + 4 * slots
    if len(buf) < end:
        raise FormatError(path, len(buf), "truncated dimension list")
    dims = struct.unpack_from(f"<{slots}i", buf, 8)[:ndim]
    if any(d < 0 for d in dims):
        raise FormatError(path, 8, f"negative dimension in {dims}")
    return MAGIC[magic], tuple(dims), end


def read_matrix(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    dtype, dims, off = read_header(buf, path)
    need = off + int(np.prod(dims)) * dtype.itemsize
    if len(buf) < need:
        raise FormatError(path, len(buf), f"truncated data: expected {need} bytes for dims {dims}")
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=off).reshape(dims).copy()


def write_matrix(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
    if dtype not in _MAGIC_OF:
        raise TypeError(f"no binary-matrix type for dtype {array.dtype}")
    dims = list(array.shape) + [1] * max(0, 3 - array.ndim)
    with open(path, "wb") as f:
        f.write(struct.pack(f"<iI{len(dims)}i", _MAGIC_OF[dtype], array.ndim, *dims))
        f.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


@dataclass(frozen=True)
class Example:
    image: np.ndarray    # (H, W, 1) in [0, 1]
    label: int


@dataclass
class DatasetSplit:
    """Single-channel examples; ``images`` is (N, H, W) uint8.

    ``eyes`` records how many consecutive examples came from one stereo pair.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str
    source: str
    eyes: int = 1
    info: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.ndim != 3 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Example:
        return Example(self.images[i][..., None] / 255.0, int(self.labels[i]))


def load_smallnorb(dat_path, cat_path, info_path=None, split: str = "train") -> DatasetSplit:
    """Parse a smallNORB pair of files; each stereo eye becomes its own example."""
    images = read_matrix(dat_path)
    labels = read_matrix(cat_path)
    if images.dtype != np.uint8 or images.ndim != 4 or images.shape[1] != 2:
        raise FormatError(dat_path, 8, f"expected a (N, 2, H, W) byte matrix, got {images.dtype} {images.shape}")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise FormatError(cat_path, 8, f"label dims {labels.shape} do not match {images.shape[0]} pairs")
    info = read_matrix(info_path) if info_path is not None else None
    n, eyes, h, w = images.shape
    return DatasetSplit(images.reshape(n * eyes, h, w), np.repeat(labels.astype(np.int64), eyes),
                        split, "smallnorb", eyes=eyes, info=info)


def smallnorb_paths(root, split: str) -> tuple[Path, Path, Path]:
    root = Path(root)
    return tuple(root / name for name in SMALLNORB_FILES[split])


def write_split(split: DatasetSplit, dat_path, cat_path) -> None:
    """Inverse of :func:`load_smallnorb` (and of :func:`load_split`)."""
    n = len(split) // split.eyes
    write_matrix(dat_path, split.images.reshape(n, split.eyes, *split.images.shape[1:]))
    write_matrix(cat_path, split.labels[::split.eyes].astype(np.int32))


def load_split(dat_path, cat_path, split: str, source: str) -> DatasetSplit:
    images = read_matrix(dat_path)
    labels = read_matrix(cat_path)
    n, eyes = images.shape[:2]
    return DatasetSplit(images.reshape(n * eyes, *images.shape[2:]), np.repeat(labels.astype(np.int64), eyes),
                        split, source, eyes=eyes)


# ---------------------------------------------------------------------------
# preprocessing


def downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def standardize(img: np.ndarray) -> np.ndarray:
    return (img - img.mean()) / max(float(img.std()), 1e-6)


def preprocess(raw: np.ndarray, mode: str = "test", rng: np.random.Generator | None = None,
               size: int = 32) -> np.ndarray:
    """Raw (H, W) image -> standardized ``(size, size, 1)`` float crop.

    96x96 inputs are mean-pooled to 48x48 first. Train mode crops at a random
    offset and jitters brightness and contrast; test mode crops the centre.
    """
    img = np.asarray(raw, dtype=np.float64) / 255.0
    if img.shape == (96, 96):
        img = downsample2(img)
    img = standardize(img)
    h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {img.shape} smaller than crop {size}")
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng()
        y, x = rng.integers(0, h - size + 1), rng.integers(0, w - size + 1)
        img = img[y:y + size, x:x + size]
        img = img * rng.uniform(0.8, 1.2) + rng.uniform(-0.2, 0.2)
    elif mode == "test":
        y, x = (h - size) // 2, (w - size) // 2
        img = img[y:y + size, x:x + size]
    else:
        raise ValueError(f"mode must be train or test, got {mode!r}")
    return img[..., None]


def preprocess_batch(raw: np.ndarray, mode: str, rng: np.random.Generator | None = None,
                     size: int = 32) -> np.ndarray:
    return np.stack([preprocess(r, mode, rng, size) for r in raw]) if len(raw) else np.zeros((0, size, size, 1))


# ---------------------------------------------------------------------------
# synthetic shapes


def _inside(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    r = np.hypot(u, v)
    if shape == "bar":
        return (au < 0.75) & (av < 0.14)
    if shape == "corner":
        return ((u > -0.6) & (u < 0.6) & (v > -0.6) & (v < -0.32)) | \
               ((u > -0.6) & (u < -0.32) & (v > -0.6) & (v < 0.6))
    if shape == "cross":
        return ((au < 0.7) & (av < 0.13)) | ((av < 0.7) & (au < 0.13))
    if shape == "disc":
        return r < 0.55
    if shape == "ring":
        return (r > 0.36) & (r < 0.62)
    raise ValueError(f"unknown shape {shape!r}")


def render(shape: str, angle: float, scale: float, shift: tuple[float, float], size: int = 32,
           supersample: int = 3) -> np.ndarray:
    """Render one shape into a float image in [0, 1] (box-filtered supersampling)."""
    n = size * supersample
    axis = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    y, x = np.meshgrid(axis, axis, indexing="ij")
    x, y = x - shift[0], y - shift[1]
    c, s = np.cos(angle), np.sin(angle)
    u, v = (c * x + s * y) / scale, (-s * x + c * y) / scale
    img = _inside(shape, u, v).astype(np.float64)
    return img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def make_synthetic(n: int, classes: int = 2, seed: int = 0, split: str = "train", size: int = 32,
                   rotation: float = 30.0, noise: float = 0.05) -> DatasetSplit:
    """Balanced, seeded dataset of rendered shapes with random pose and noise.

    ``rotation`` is the half-range in degrees of the random rotation; 180
    gives the rotation-heavy variant.
    """
    if not 1 <= classes <= len(SHAPES):
        raise ValueError(f"classes must be in [1, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    images = np.empty((n, size, size), dtype=np.uint8)
    for i, lab in enumerate(labels):
        angle = np.deg2rad(rng.uniform(-rotation, rotation))
        scale = rng.uniform(0.55, 0.85)
        shift = tuple(rng.uniform(-0.2, 0.2, 2))
        img = rng.uniform(0.6, 1.0) * render(SHAPES[lab], angle, scale, shift, size)
        img = img + rng.normal(0.0, noise, img.shape)
        images[i] = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return DatasetSplit(images, labels.astype(np.int64), split, "synthetic")


def synthetic_splits(n_train: int, n_test: int, classes: int, seed: int, **kw) -> tuple[DatasetSplit, DatasetSplit]:
    """Train and test sets drawn from disjoint seed streams."""
    train_seed, test_seed = np.random.SeedSequence(seed).spawn(2)
    return (make_synthetic(n_train, classes, int(train_seed.generate_state(1)[0]), "train", **kw),
            make_synthetic(n_test, classes, int(test_seed.generate_state(1)[0]), "test", **kw))


def data_root(explicit=None) -> Path | None:
    root = explicit or os.environ.get("EMCAPS_DATA")
    return Path(root) if root else None
