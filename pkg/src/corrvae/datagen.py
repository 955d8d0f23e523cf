"""Synthetic shapes dataset with known property structure.

Images are N x N binary renders of a filled square or ellipse. Properties
are size, x, y and the halved diagonal position (x + y) / 2, so x+y is
correlated with both x and y by construction. ``measure`` is the analytic
property oracle used to score generated images.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import Rng

MAGIC = b"CVDS"
VERSION = 1
SHAPES = ("ellipse", "square")
SIZE_RANGE = (0.2, 0.9)
BASE_PROPERTIES = ("size", "x", "y", "x+y")
CORRELATED_PAIRS = frozenset({frozenset(("x", "x+y")), frozenset(("y", "x+y")),
                              frozenset(("x", "y"))})


class RenderError(ValueError):
    pass


class EmptyImageError(ValueError):
    pass


def half_extents(shape_kind: str, size: float, N: int) -> tuple[float, float]:
    """(horizontal, vertical) half extent in pixels."""
    a = size * N / 4.0
    if shape_kind == "square":
        return a, a
    if shape_kind == "ellipse":
        return a, size * N / 6.0
    raise RenderError(f"unknown shape kind {shape_kind!r}")


def position_range(size: float) -> tuple[float, float]:
    """Valid centre coordinates for both axes so every shape fits."""
    return size / 4.0, 1.0 - size / 4.0


def _rasterize(shape_kind: str, size, cx, cy, N: int) -> np.ndarray:
    """Vectorized pixel-centre inclusion; size/cx/cy broadcast over leading dims."""
    size = np.asarray(size, dtype=np.float64)[..., None, None]
    cx = np.asarray(cx, dtype=np.float64)[..., None, None]
    cy = np.asarray(cy, dtype=np.float64)[..., None, None]
    centres = np.arange(N) + 0.5
    dx = centres[None, :] - cx
    dy = centres[:, None] - cy
    a = size * N / 4.0
    if shape_kind == "square":
        return (np.abs(dx) <= a) & (np.abs(dy) <= a)
    b = size * N / 6.0
    return (dx / a) ** 2 + (dy / b) ** 2 <= 1.0


def render(shape_kind: str, size: float, x: float, y: float, N: int = 16) -> np.ndarray:
    """Binary N x N image of a filled shape centred at (x * N, y * N).

    Columns carry x, rows carry y. A pixel is on when its centre lies inside
    the shape; a tiny ellipse that covers no pixel centre lights the pixel
    holding its centre.
    """
    if N < 8:
        raise RenderError("canvas must be at least 8 pixels")
    if not SIZE_RANGE[0] - 1e-12 <= size <= SIZE_RANGE[1] + 1e-12:
        raise RenderError(f"size {size} outside {SIZE_RANGE}")
    hx, hy = half_extents(shape_kind, size, N)
    cx, cy = x * N, y * N
    eps = 1e-9
    if cx - hx < -eps or cx + hx > N + eps or cy - hy < -eps or cy + hy > N + eps:
        raise RenderError(f"{shape_kind} of size {size} at ({x}, {y}) leaves the canvas")
    img = _rasterize(shape_kind, size, cx, cy, N).astype(np.uint8)
    if not img.any():
        img[min(int(cy), N - 1), min(int(cx), N - 1)] = 1
    return img


@dataclass
class Measurement:
    size: float
    x: float
    y: float
    shape: str

    @property
    def xy(self) -> float:
        return (self.x + self.y) / 2.0

    def vector(self, names: Sequence[str] = BASE_PROPERTIES) -> np.ndarray:
        lookup = {"size": self.size, "x": self.x, "y": self.y, "x+y": self.xy,
                  "shape": float(self.shape == "square")}
        return np.array([lookup[n] for n in names])


_SIZE_GRID = np.linspace(SIZE_RANGE[0], SIZE_RANGE[1], 71)
_OFFSETS = np.linspace(-0.5, 0.5, 9)


def measure(image: np.ndarray) -> Measurement:
    """Recover (size, x, y, x+y) from a binary image.

    Position is the normalized pixel centroid. Size inverts the render
    model: every (shape kind, size, sub-pixel centre) on a fine grid around
    the centroid is re-rendered and the sizes of the best-matching renders
    are averaged.
    """
    img = np.asarray(image) > 0
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError("expected a square 2-D image")
    N = img.shape[0]
    if not img.any():
        raise EmptyImageError("cannot measure an empty image")
    rows, cols = np.nonzero(img)
    x = (cols.mean() + 0.5) / N
    y = (rows.mean() + 0.5) / N

    sizes = _SIZE_GRID[:, None, None]
    cx = x * N + _OFFSETS[None, :, None]
    cy = y * N + _OFFSETS[None, None, :]
    mismatch = np.stack([
        (_rasterize(kind, sizes, cx, cy, N) != img).sum(axis=(-2, -1))
        for kind in SHAPES
    ])                                   # kinds x sizes x offsets x offsets
    # tiny shapes can be pixel-identical across kinds: pool every best fit
    best = mismatch == mismatch.min()
    size = float(np.broadcast_to(sizes, best.shape)[best].mean())
    kind = SHAPES[int(np.argmax(best.sum(axis=(1, 2, 3))))]
    return Measurement(size=size, x=float(x), y=float(y), shape=kind)


def property_names(include_shape: bool = False) -> tuple[str, ...]:
    return BASE_PROPERTIES + (("shape",) if include_shape else ())


def property_ranges(names: Sequence[str]) -> dict[str, list[float]]:
    pos = list(position_range(SIZE_RANGE[0]))
    ranges = {"size": list(SIZE_RANGE), "x": pos, "y": pos, "x+y": pos, "shape": [0.0, 1.0]}
    return {n: ranges[n] for n in names}


def ground_truth_mask(names: Sequence[str], l: int = 8) -> np.ndarray:
    """Construction mask: one latent per independent factor plus latents
    shared between x+y and its parents, mirroring the learned structure
    (size alone; x, y, x+y jointly; x with x+y; y with x+y)."""
    idx = {n: j for j, n in enumerate(names)}
    rows = []
    if "shape" in idx:
        rows.append(["shape"])
    rows += [["size"], ["x", "y", "x+y"], ["x", "x+y"], ["y", "x+y"]]
    if l < len(rows):
        raise ValueError(f"need at least {len(rows)} latents for the ground-truth mask")
    M = np.zeros((l, len(names)))
    for i, row in enumerate(rows):
        for n in row:
            M[i, idx[n]] = 1.0
    return M


def truth_pairs(names: Sequence[str]) -> set[tuple[int, int]]:
    idx = {n: j for j, n in enumerate(names)}
    out = set()
    for pair in CORRELATED_PAIRS:
        a, b = sorted(idx[n] for n in pair)
        out.add((a, b))
    return out


@dataclass
class Dataset:
    images: np.ndarray              # n x N x N uint8
    properties: np.ndarray          # n x m float64
    shapes: np.ndarray              # n uint8, index into SHAPES
    property_names: tuple[str, ...]
    N: int = 16
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def m(self) -> int:
        return len(self.property_names)

    def flat_images(self) -> np.ndarray:
        return self.images.reshape(len(self), -1).astype(np.float64)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.properties[idx], self.shapes[idx],
                       self.property_names, self.N, self.seed, dict(self.meta))

    def split(self, n_test: int) -> tuple["Dataset", "Dataset"]:
        if not 0 < n_test < len(self):
            raise ValueError(f"cannot hold out {n_test} of {len(self)} samples")
        cut = len(self) - n_test
        return self.subset(slice(0, cut)), self.subset(slice(cut, None))

    def header(self) -> dict:
        return {
            "N": self.N, "n": len(self), "m": self.m,
            "property_names": list(self.property_names),
            "ranges": property_ranges(self.property_names),
            "shape_kinds": list(SHAPES),
            "seed": self.seed,
            "note": "x+y is stored as (x + y) / 2 so every property lies in [0, 1]",
        }


def sample_parameters(rng: Rng) -> tuple[int, float, float, float]:
    kind = int(rng.integers(0, 2))
    size = float(rng.uniform(1, *SIZE_RANGE)[0])
    lo, hi = position_range(size)
    x, y = (float(v) for v in rng.uniform(2, lo, hi))
    return kind, size, x, y


def make_dataset(n: int, seed: int, N: int = 16, include_shape: bool = False) -> Dataset:
    """n independent samples; sample i draws from the stream Rng(seed, i)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    names = property_names(include_shape)
    images = np.zeros((n, N, N), dtype=np.uint8)
    props = np.zeros((n, len(names)))
    shapes = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        kind, size, x, y = sample_parameters(Rng(seed, i))
        images[i] = render(SHAPES[kind], size, x, y, N)
        row = {"size": size, "x": x, "y": y, "x+y": (x + y) / 2.0, "shape": float(kind)}
        props[i] = [row[k] for k in names]
        shapes[i] = kind
    return Dataset(images, props, shapes, names, N, seed)


def write_dataset(ds: Dataset, path: str | Path) -> Path:
    """Binary layout: magic, u16 version, u32 header length, JSON header, then
    per sample a shape byte, the packed 1-bit image and m little-endian f64."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(ds.header(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(header)))
        fh.write(header)
        props = ds.properties.astype("<f8")
        for i in range(len(ds)):
            fh.write(struct.pack("<B", int(ds.shapes[i])))
            fh.write(np.packbits(ds.images[i].reshape(-1)).tobytes())
            fh.write(props[i].tobytes())
    return path


def read_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a CorrVAE dataset file")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    off = 10
    header = json.loads(raw[off:off + hlen])
    off += hlen
    N, n, m = header["N"], header["n"], header["m"]
    nbytes = (N * N + 7) // 8
    rec = np.dtype([("shape", "u1"), ("bits", "u1", (nbytes,)), ("props", "<f8", (m,))])
    arr = np.frombuffer(raw, dtype=rec, count=n, offset=off)
    images = np.unpackbits(arr["bits"], axis=1)[:, :N * N].reshape(n, N, N)
    return Dataset(images.astype(np.uint8), arr["props"].astype(np.float64),
                   arr["shape"].astype(np.uint8), tuple(header["property_names"]),
                   N, header.get("seed"), header)


def write_pgm(path: str | Path, image: np.ndarray) -> Path:
    """Binary PGM (P5, maxval 255). Accepts {0,1} or [0,1] float images."""
    img = np.asarray(image, dtype=np.float64)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, w, h, rest = raw.split(maxsplit=3)
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    maxval, payload = rest.split(maxsplit=1)[0], rest[rest.index(b"\n") + 1:]
    w, h, maxval = int(w), int(h), int(maxval)
    data = np.frombuffer(payload[:w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval
