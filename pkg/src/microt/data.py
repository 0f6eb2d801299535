"""Datasets: the bundled synthetic image generator, IDX/CSV ingestion,
deterministic 8:1:1 splits and the augmentations used for SSL."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# --------------------------------------------------------------------------
# synthetic stroke images

PRIMITIVES = "hvdaob+xc"

# Cloud classes use single primitives plus a few pairs; local classes are
# unseen pairs of the same primitives.
CLOUD_CLASSES = ("h", "v", "d", "a", "o", "b", "+", "x", "c", "hv", "do", "bc")
LOCAL_CLASSES = ("ho", "vb", "dc", "a+", "xo", "hc")


def _segment(yy, xx, p0, p1, width):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = p1 - p0
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(d @ d, 1e-9)
    t = np.clip(t, 0.0, 1.0)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    return np.clip(1.0 - (dist - width / 2), 0.0, 1.0)


def _primitive(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    c = rng.uniform(0.3 * size, 0.7 * size, size=2)
    r = rng.uniform(0.22, 0.38) * size
    w = rng.uniform(1.0, 2.0)
    if kind == "h":
        return _segment(yy, xx, (c[0], c[1] - r), (c[0], c[1] + r), w)
    if kind == "v":
        return _segment(yy, xx, (c[0] - r, c[1]), (c[0] + r, c[1]), w)
    if kind == "d":
        return _segment(yy, xx, (c[0] - r, c[1] - r), (c[0] + r, c[1] + r), w)
    if kind == "a":
        return _segment(yy, xx, (c[0] - r, c[1] + r), (c[0] + r, c[1] - r), w)
    if kind == "o":
        dist = np.hypot(yy - c[0], xx - c[1])
        return np.clip(1.0 - np.abs(dist - r) + w / 2 - 0.5, 0.0, 1.0)
    if kind == "b":
        return np.exp(-((yy - c[0]) ** 2 + (xx - c[1]) ** 2) / (2 * (0.45 * r) ** 2))
    if kind == "+":
        h = 0.7 * r
        return np.maximum(_segment(yy, xx, (c[0], c[1] - h), (c[0], c[1] + h), w),
                          _segment(yy, xx, (c[0] - h, c[1]), (c[0] + h, c[1]), w))
    if kind == "x":
        h = 0.6 * r
        return np.maximum(_segment(yy, xx, (c[0] - h, c[1] - h), (c[0] + h, c[1] + h), w),
                          _segment(yy, xx, (c[0] - h, c[1] + h), (c[0] + h, c[1] - h), w))
    if kind == "c":
        h = int(round(r))
        cell = max(1, h // 2)
        img = np.zeros((size, size))
        y0, x0 = int(c[0] - h), int(c[1] - h)
        sl = (slice(max(y0, 0), y0 + 2 * h), slice(max(x0, 0), x0 + 2 * h))
        pat = (((yy - y0) // cell + (xx - x0) // cell) % 2 == 0).astype(float)
        img[sl] = pat[sl]
        return img
    raise ValueError(f"unknown primitive {kind!r}")


def synthetic_images(classes: tuple[str, ...], n: int, seed: int, size: int = 16,
                     noise: tuple[float, float] = (0.05, 0.5)) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` grayscale images of shape ``(1, size, size)`` with balanced labels.

    Each class is a string of stroke primitives rendered at random positions.
    Per-sample contrast and noise level vary, so some samples are much harder
    than others.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(classes)
    rng.shuffle(labels)
    x = np.empty((n, 1, size, size))
    for i, lab in enumerate(labels):
        img = np.zeros((size, size))
        for kind in classes[lab]:
            img = np.maximum(img, _primitive(kind, rng, size))
        contrast = rng.uniform(0.4, 1.0)
        sigma = rng.uniform(*noise)
        img = contrast * img + rng.normal(0.0, sigma, size=img.shape)
        x[i, 0] = np.clip(img, 0.0, 1.0)
    return x, labels.astype(np.int64)


def two_blobs(n: int, seed: int, size: int = 12) -> tuple[np.ndarray, np.ndarray]:
    """Blob on the left vs blob on the right; a trivially separable set."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    x = np.empty((n, 1, size, size))
    for i, lab in enumerate(labels):
        cy = rng.uniform(0.3, 0.7) * size
        cx = (0.25 if lab == 0 else 0.75) * size + rng.normal(0, 0.5)
        img = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 2.0**2))
        x[i, 0] = np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1)
    return x, labels.astype(np.int64)


# --------------------------------------------------------------------------
# resizing and augmentation


def crop_resize(x: np.ndarray, boxes: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear crop-and-resize. ``boxes`` rows are ``(y0, x0, h, w)`` in pixels."""
    n, c, h, w = x.shape
    oh, ow = out_hw
    boxes = np.asarray(boxes, dtype=float).reshape(n, 4)
    ys = boxes[:, :1] + (np.arange(oh) + 0.5) * boxes[:, 2:3] / oh - 0.5
    xs = boxes[:, 1:2] + (np.arange(ow) + 0.5) * boxes[:, 3:4] / ow - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, :, None]
    wx = (xs - x0)[:, None, None, :]
    idx = np.arange(n)[:, None, None, None]
    ch = np.arange(c)[None, :, None, None]

    def gather(yi, xi):
        return x[idx, ch, yi[:, None, :, None], xi[:, None, None, :]]

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bot = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bot * wy


def resize(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    n, _, h, w = x.shape
    boxes = np.tile([0.0, 0.0, h, w], (n, 1))
    return crop_resize(x, boxes, out_hw)


@dataclass
class Augmentation:
    crop: tuple[float, float] = (0.6, 1.0)
    flip_prob: float = 0.5
    noise_sigma: float = 0.05

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n, _, h, w = x.shape
        frac = rng.uniform(*self.crop, size=n)
        ch, cw = frac * h, frac * w
        y0 = rng.uniform(0, 1, n) * (h - ch)
        x0 = rng.uniform(0, 1, n) * (w - cw)
        out = crop_resize(x, np.stack([y0, x0, ch, cw], axis=1), (h, w))
        flip = rng.random(n) < self.flip_prob
        out[flip] = out[flip, :, :, ::-1]
        if self.noise_sigma > 0:
            out = out + rng.normal(0.0, self.noise_sigma, size=out.shape)
        return out


# --------------------------------------------------------------------------
# file formats


class DatasetFormatError(ValueError):
    pass


_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _open(path: Path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path: str | Path) -> np.ndarray:
    with _open(Path(path)) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise DatasetFormatError(f"{path}: bad IDX magic")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    count = int(np.prod(dims)) if dims else 0
    body = raw[4 + 4 * ndim :]
    if len(body) != count * dtype.itemsize:
        raise DatasetFormatError(f"{path}: payload size {len(body)} does not match dims {dims}")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {v: k for k, v in _IDX_DTYPES.items()}
    dt = array.dtype.newbyteorder(">").str.replace("|", ">")
    if dt not in codes:
        raise ValueError(f"dtype {array.dtype} not representable in IDX")
    header = bytes([0, 0, codes[dt], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.astype(dt).tobytes())


@dataclass
class DatasetHandle:
    x: np.ndarray
    y: np.ndarray
    train: np.ndarray
    test: np.ndarray
    val: np.ndarray
    preprocessing: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def classes(self) -> int:
        return int(self.y.max()) + 1

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = getattr(self, name)
        return self.x[idx], self.y[idx]


def split_indices(n: int, seed: int, ratios=(8, 1, 1)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    total = sum(ratios)
    n_train = int(round(n * ratios[0] / total))
    n_test = int(round(n * ratios[1] / total))
    return np.sort(perm[:n_train]), np.sort(perm[n_train : n_train + n_test]), np.sort(perm[n_train + n_test :])


def minmax_channels(x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Per-channel (per-feature for vectors) min-max scaling to [0, 1]."""
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    lo = x.min(axis=axes, keepdims=True)
    hi = x.max(axis=axes, keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (x - lo) / span, {"normalize": "per-channel-minmax", "min": lo.ravel().tolist(), "max": hi.ravel().tolist()}


def from_arrays(x: np.ndarray, y: np.ndarray, seed: int, ratios=(8, 1, 1), preprocessing=None) -> DatasetHandle:
    if len(x) != len(y):
        raise DatasetFormatError(f"{len(x)} samples but {len(y)} labels")
    tr, te, va = split_indices(len(y), seed, ratios)
    return DatasetHandle(np.asarray(x, float), np.asarray(y, np.int64), tr, te, va, dict(preprocessing or {}))


def ingest(path: str | Path, format: str, seed: int, labels_path: str | Path | None = None,
           resize_to: tuple[int, int] | None = None, ratios=(8, 1, 1)) -> DatasetHandle:
    """Load an IDX image/label pair or a CSV table into a normalized, split handle."""
    path = Path(path)
    if format == "idx":
        images = read_idx(path).astype(float)
        if labels_path is None:
            labels_path = path.with_name(path.name.replace("images", "labels").replace("-idx3", "-idx1"))
        labels = read_idx(labels_path).astype(np.int64)
        if images.ndim == 3:
            images = images[:, None]
        elif images.ndim != 4:
            raise DatasetFormatError(f"{path}: expected 3-D or 4-D image array, got {images.ndim}-D")
        pre = {"source": "idx"}
        if resize_to is not None and tuple(resize_to) != images.shape[2:]:
            images = resize(images, tuple(resize_to))
            pre["resize"] = f"bilinear {resize_to[0]}x{resize_to[1]}"
    elif format == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise DatasetFormatError(f"{path}: empty CSV")
        header, body = rows[0], rows[1:]
        lab_col = header.index("label") if "label" in header else len(header) - 1
        try:
            table = np.array([[float(v) for v in r] for r in body], dtype=float)
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: non-numeric cell ({exc})") from None
        if table.ndim != 2 or table.shape[1] != len(header):
            raise DatasetFormatError(f"{path}: ragged rows")
        labels = table[:, lab_col].astype(np.int64)
        images = np.delete(table, lab_col, axis=1)
        pre = {"source": "csv"}
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    if len(images) != len(labels):
        raise DatasetFormatError(f"{len(images)} samples but {len(labels)} labels")
    images, norm = minmax_channels(images)
    pre.update(norm)
    return from_arrays(images, labels, seed, ratios, pre)
