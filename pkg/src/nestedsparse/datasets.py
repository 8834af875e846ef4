"""Toy datasets and their self-describing binary file format.

File layout (little endian)::

    magic "NSDS" | version u16 | n_samples u32 | n_classes u32 | ndim u8 |
    feature_shape u32[ndim] | X f32[n_samples * prod(shape)] | y u16[n_samples]
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import BadMagicError, InvariantError, TruncatedError, UnsupportedVersionError

MAGIC = b"NSDS"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sHIIB")
KINDS = ("blobs", "spirals", "spiral-images", "textures")


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_shape: tuple
    n_classes: int

    def __post_init__(self):
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y disagree on sample count")
        if int(np.prod(self.feature_shape)) != self.X.shape[1]:
            raise ValueError(f"feature shape {self.feature_shape} vs {self.X.shape[1]} features")

    def __len__(self):
        return self.X.shape[0]

    def checksum(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.y, dtype="<u2").tobytes())
        return h.hexdigest()

    def split(self, test_fraction):
        """Deterministic split: the trailing `test_fraction` becomes the test set."""
        n_test = int(round(len(self) * test_fraction))
        cut = len(self) - n_test
        head = Dataset(self.X[:cut], self.y[:cut], self.feature_shape, self.n_classes)
        tail = Dataset(self.X[cut:], self.y[cut:], self.feature_shape, self.n_classes)
        return head, tail


def _shuffled(X, y, rng, feature_shape, n_classes):
    perm = rng.permutation(len(y))
    return Dataset(np.ascontiguousarray(X[perm], dtype=np.float32),
                   y[perm].astype(np.int64), tuple(feature_shape), n_classes)


def _per_class(n, n_classes):
    counts = np.full(n_classes, n // n_classes)
    counts[: n % n_classes] += 1
    return counts


def make_blobs(n=1000, n_classes=2, seed=0, spread=0.5, radius=3.0):
    """Gaussian blobs centred on a circle; linearly separable for 2 classes."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c, count in enumerate(_per_class(n, n_classes)):
        angle = 2 * np.pi * c / n_classes
        centre = radius * np.array([np.cos(angle), np.sin(angle)])
        xs.append(centre + spread * rng.standard_normal((count, 2)))
        ys.append(np.full(count, c))
    return _shuffled(np.concatenate(xs), np.concatenate(ys), rng, (2,), n_classes)


def _spiral_points(n, n_classes, rng, noise, turns):
    xs, ys = [], []
    for c, count in enumerate(_per_class(n, n_classes)):
        r = np.linspace(0.05, 1.0, count)
        t = 2 * np.pi * (c / n_classes + turns * r) + noise * rng.standard_normal(count)
        xs.append(np.stack([r * np.sin(t), r * np.cos(t)], axis=1))
        ys.append(np.full(count, c))
    return np.concatenate(xs), np.concatenate(ys)


def make_spirals(n=1500, n_classes=3, seed=0, noise=0.2, turns=0.75):
    """Interleaved spiral arms in [-1, 1]^2 (not linearly separable)."""
    rng = np.random.default_rng(seed)
    X, y = _spiral_points(n, n_classes, rng, noise, turns)
    return _shuffled(X, y, rng, (2,), n_classes)


def render_points(points, size=8, sigma=0.8):
    """Render 2-D points in [-1, 1]^2 as Gaussian bumps on a size x size grid (NHWC, C=1)."""
    pts = np.asarray(points, dtype=np.float64)
    px = (pts + 1) / 2 * size - 0.5  # pixel coordinates
    grid = np.arange(size)
    gy = np.exp(-((grid[None, :] - px[:, 1:2]) ** 2) / (2 * sigma ** 2))
    gx = np.exp(-((grid[None, :] - px[:, 0:1]) ** 2) / (2 * sigma ** 2))
    img = gy[:, :, None] * gx[:, None, :]
    return img.reshape(len(pts), size * size).astype(np.float32)


def make_spiral_images(n=1500, n_classes=3, seed=0, noise=0.1, turns=3.0, size=8):
    """Spiral points rendered as 8x8 single-channel images for conv nets."""
    rng = np.random.default_rng(seed)
    X, y = _spiral_points(n, n_classes, rng, noise, turns)
    return _shuffled(render_points(X, size), y, rng, (size, size, 1), n_classes)


def make_textures(n=1000, n_classes=4, seed=0, size=8, noise=0.3):
    """Oriented sinusoidal gratings with random phase and frequency; class = orientation."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    xs, ys = [], []
    for c, count in enumerate(_per_class(n, n_classes)):
        theta = np.pi * c / n_classes
        freq = rng.uniform(0.6, 1.2, count)
        phase = rng.uniform(0, 2 * np.pi, count)
        proj = np.cos(theta) * xx + np.sin(theta) * yy
        img = np.sin(freq[:, None, None] * proj[None] + phase[:, None, None])
        img += noise * rng.standard_normal(img.shape)
        xs.append(img.reshape(count, -1))
        ys.append(np.full(count, c))
    return _shuffled(np.concatenate(xs), np.concatenate(ys), rng, (size, size, 1), n_classes)


def make_dataset(kind, n, seed=0, n_classes=None):
    if n <= 0:
        raise ValueError(f"sample count must be positive, got {n}")
    makers = {"blobs": (make_blobs, 2), "spirals": (make_spirals, 3),
              "spiral-images": (make_spiral_images, 3), "textures": (make_textures, 4)}
    if kind not in makers:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {', '.join(KINDS)}")
    maker, default_classes = makers[kind]
    return maker(n=n, n_classes=n_classes or default_classes, seed=seed)


def dumps(ds):
    shape = tuple(int(d) for d in ds.feature_shape)
    head = _HEAD.pack(MAGIC, FORMAT_VERSION, len(ds), ds.n_classes, len(shape))
    return b"".join([head, struct.pack(f"<{len(shape)}I", *shape),
                     np.ascontiguousarray(ds.X, dtype="<f4").tobytes(),
                     np.ascontiguousarray(ds.y, dtype="<u2").tobytes()])


def loads(data):
    if len(data) < 4:
        raise TruncatedError("stream shorter than the magic number")
    if data[:4] != MAGIC:
        raise BadMagicError("not a dataset file")
    if len(data) < _HEAD.size:
        raise TruncatedError("dataset header truncated")
    _, version, n, n_classes, ndim = _HEAD.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"dataset version {version}")
    pos = _HEAD.size
    if len(data) < pos + 4 * ndim:
        raise TruncatedError("dataset shape truncated")
    shape = struct.unpack_from(f"<{ndim}I", data, pos)
    pos += 4 * ndim
    feat = int(np.prod(shape))
    end = pos + 4 * n * feat + 2 * n
    if len(data) != end:
        raise TruncatedError(f"dataset payload has {len(data)} bytes, expected {end}")
    X = np.frombuffer(data, dtype="<f4", count=n * feat, offset=pos).reshape(n, feat)
    y = np.frombuffer(data, dtype="<u2", count=n, offset=pos + 4 * n * feat)
    if n and int(y.max()) >= n_classes:
        raise InvariantError("label-range")
    return Dataset(X.astype(np.float32), y.astype(np.int64), tuple(shape), n_classes)


def save(ds, path):
    with open(path, "wb") as f:
        f.write(dumps(ds))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
