"""Synthetic datasets and the binary ``MJPD`` container.

Layout::

    "MJPD" | version u32 | count u32 | H u32 | W u32 | C u32
    count x ( label u32 | H*W*C float32 pixels, row-major H, W, C )

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .jigsaw import STREAM_DATA, make_rng

MAGIC = b"MJPD"
VERSION = 1
_HEADER = struct.Struct("<4s5I")
KINDS = ("layout-classes", "texture-classes")


@dataclass
class Dataset:
    images: np.ndarray   # count x H x W x C, float64 in [0, 1]
    labels: np.ndarray   # count, int

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def save_dataset(path, ds: Dataset) -> None:
    count = len(ds)
    if ds.images.ndim != 4:
        raise FormatError(f"images must be count x H x W x C, got {ds.images.shape}")
    h, w, c = ds.images.shape[1:]
    px = ds.images.astype("<f4")
    if count and (px.min() < 0 or px.max() > 1):
        raise FormatError("pixels must lie in [0, 1]")
    rec = np.dtype([("label", "<u4"), ("px", "<f4", (h * w * c,))])
    arr = np.empty(count, dtype=rec)
    arr["label"] = ds.labels
    arr["px"] = px.reshape(count, h * w * c)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, count, h, w, c))
        fh.write(arr.tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("file shorter than the MJPD header")
    magic, version, count, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    rec = np.dtype([("label", "<u4"), ("px", "<f4", (h * w * c,))])
    payload = raw[_HEADER.size:]
    if len(payload) != count * rec.itemsize:
        raise FormatError(f"header declares {count} records but payload holds {len(payload)} bytes")
    arr = np.frombuffer(payload, dtype=rec, count=count)
    images = arr["px"].astype(np.float64).reshape(count, h, w, c)
    if count and (images.min() < 0 or images.max() > 1):
        raise FormatError("pixels outside [0, 1]")
    return Dataset(images, arr["label"].astype(np.int64))


# ---------------------------------------------------------------------------
# generators


def _layout_image(rng, size: int, channels: int, label: int) -> np.ndarray:
    half = size // 2
    img = rng.uniform(0.0, 0.2, size=(size, size, channels))
    lo, hi = max(2, size // 5), max(3, size // 3)
    for q in range(4):
        bs = int(rng.integers(lo, hi + 1))
        top = (q // 2) * half + int(rng.integers(0, half - bs + 1))
        left = (q % 2) * half + int(rng.integers(0, half - bs + 1))
        level = rng.uniform(0.8, 1.0) if q == label else rng.uniform(0.35, 0.55)
        color = level * rng.uniform(0.85, 1.0, size=channels)
        img[top:top + bs, left:left + bs] = color
    return img


def layout_label(img: np.ndarray) -> int:
    """Reference labeller: the quadrant holding the brightest pixel."""
    half = img.shape[0] // 2
    lum = img.mean(axis=2)
    peaks = [lum[r * half:(r + 1) * half, c * half:(c + 1) * half].max() for r in (0, 1) for c in (0, 1)]
    return int(np.argmax(peaks))


_TEXTURES = 4


def _texture_patch(rng, p: int, channels: int, label: int) -> np.ndarray:
    yy, xx = np.mgrid[0:p, 0:p]
    phase = int(rng.integers(0, 2))
    if label == 0:
        pat = (yy + phase) % 2
    elif label == 1:
        pat = (xx + phase) % 2
    elif label == 2:
        pat = (yy + xx + phase) % 2
    else:
        pat = np.full((p, p), 0.5)
    color = rng.uniform(0.4, 1.0, size=channels)
    base = rng.uniform(0.0, 0.2)
    return base + pat[..., None] * (color - base) * 0.9


def texture_label(img: np.ndarray, p: int) -> int:
    """Reference labeller: stripe orientation read off the top-left patch."""
    patch = img[:p, :p].mean(axis=2)
    rows = np.abs(np.diff(patch, axis=0)).mean() if p > 1 else 0.0
    cols = np.abs(np.diff(patch, axis=1)).mean() if p > 1 else 0.0
    if rows < 1e-9 and cols < 1e-9:
        return 3
    diag = np.abs(patch[1:, 1:] - patch[:-1, :-1]).mean()
    if diag < 1e-9:
        return 2
    return 0 if rows > cols else 1


def _texture_image(rng, size: int, channels: int, label: int, p: int) -> np.ndarray:
    g = size // p
    img = np.empty((size, size, channels))
    for r in range(g):
        for c in range(g):
            img[r * p:(r + 1) * p, c * p:(c + 1) * p] = _texture_patch(rng, p, channels, label)
    return img


def generate_synthetic_dataset(kind: str, count: int, seed: int, size: int = 32, channels: int = 3,
                               patch: int = 4) -> Dataset:
    """Four-class synthetic images.

    ``layout-classes``: every quadrant holds a coloured square, one of them
    bright; the label is that quadrant, so only the global arrangement of
    patches carries the class.  ``texture-classes``: every patch carries the
    same class texture, so any patch permutation preserves the label.
    """
    if kind not in KINDS:
        raise ContractError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if size % 2 or size % patch:
        raise ContractError(f"size {size} must be even and divisible by patch {patch}")
    rng = make_rng(seed, STREAM_DATA)
    labels = rng.integers(0, 4, size=count)
    images = np.empty((count, size, size, channels))
    for i, y in enumerate(labels):
        if kind == "layout-classes":
            images[i] = _layout_image(rng, size, channels, int(y))
        else:
            images[i] = _texture_image(rng, size, channels, int(y), patch)
    # the container stores float32; round now so saved and in-memory sets agree
    images = np.clip(images, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return Dataset(images, labels.astype(np.int64))


# ---------------------------------------------------------------------------
# PPM / PGM


def write_ppm(path, img: np.ndarray) -> None:
    """Binary PPM (3 channels) or PGM (1 channel); values clipped to [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise FormatError(f"PPM/PGM needs 1 or 3 channels, got {c}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval > 255:
        raise FormatError(f"unsupported image header {magic!r} maxval {maxval}")
    c = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * c, offset=pos)
    return data.reshape(h, w, c).astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# raw float64 dumps (attention maps, recovered images)


def write_raw(path, arr: np.ndarray, name: str = "tensor") -> None:
    """One ASCII header line ``MJPR <name> <ndim> <dims...>`` then little-endian float64."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = " ".join(["MJPR", name, str(arr.ndim), *map(str, arr.shape)]) + "\n"
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        fh.write(arr.tobytes())


def read_raw(path) -> tuple[str, np.ndarray]:
    with open(path, "rb") as fh:
        head = fh.readline().decode("ascii").split()
        payload = fh.read()
    if not head or head[0] != "MJPR":
        raise FormatError("not an MJPR dump")
    name, ndim = head[1], int(head[2])
    shape = tuple(int(v) for v in head[3:3 + ndim])
    if len(payload) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise FormatError("raw dump payload does not match its header")
    return name, np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
