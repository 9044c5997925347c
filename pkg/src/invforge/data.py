"""Datasets: IDX I/O, rotated/morphed MNIST variants and a synthetic generator.

Image tensors are float32 in [0, 1] with shape ``(n, 28, 28)`` while being
transformed and are flattened to ``(n, 784)`` inside a :class:`Dataset`.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .autodiff import rng_stream
from .errors import ConfigError, DataError

TRAIN_ANGLES = (0.0, 22.5, -22.5, 45.0, -45.0)
EVAL_ANGLE_SETS = {"55": (55.0, -55.0), "65": (65.0, -65.0)}
DIL_KERNELS = (-2, 2, 3, 4)

_IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}


class Sample(NamedTuple):
    x: np.ndarray
    y: int
    z: Optional[int]


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    z: Optional[np.ndarray] = None
    num_nuisance: Optional[int] = None
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        if self.x.ndim != 2:
            self.x = self.x.reshape(len(self.x), -1)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) == 0:
            raise DataError("dataset is empty")
        if len(self.y) != len(self.x):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} labels")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise DataError(f"labels outside [0, {self.num_classes})")
        if not np.isfinite(self.x).all():
            raise DataError("features contain non-finite values")
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=np.int64)
            if len(self.z) != len(self.x):
                raise DataError("nuisance labels do not cover every sample")
            if self.num_nuisance is None:
                self.num_nuisance = int(self.z.max()) + 1

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.y[i]), None if self.z is None else int(self.z[i]))

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        return replace(
            self,
            x=self.x[idx],
            y=self.y[idx],
            z=None if self.z is None else self.z[idx],
            split=split or self.split,
            meta=dict(self.meta),
        )


def split_dataset(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    perm = rng_stream(seed, "split").permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    return ds.subset(np.sort(perm[n_test:]), "train"), ds.subset(np.sort(perm[:n_test]), "test")


# ---------------------------------------------------------------------------
# IDX container


def read_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file into an array of its declared shape."""
    return parse_idx(Path(path).read_bytes(), path)


def parse_idx(raw: bytes, path="<bytes>") -> np.ndarray:
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES or ndim == 0:
        raise DataError(f"{path}: bad magic 0x{struct.unpack('>I', raw[:4])[0]:08X}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = _IDX_DTYPES[code]
    count = math.prod(dims)
    if count * dtype.itemsize > 2**40:
        raise DataError(f"{path}: dims {dims} overflow")
    if len(raw) - head != count * dtype.itemsize:
        raise DataError(f"{path}: payload has {len(raw) - head} bytes, dims {dims} need {count * dtype.itemsize}")
    arr = np.frombuffer(raw, dtype=dtype, offset=head, count=count).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def write_idx(array, path) -> None:
    """Write a uint8/int8 array as IDX; the file appears atomically."""
    arr = np.asarray(array)
    if arr.ndim == 0 or arr.shape[0] == 0:
        raise DataError("refusing to write an IDX file with zero samples")
    if arr.dtype not in _IDX_CODES:
        raise DataError(f"unsupported IDX dtype {arr.dtype}")
    header = struct.pack(">HBB", 0, _IDX_CODES[arr.dtype], arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    _atomic_write(path, header + np.ascontiguousarray(arr).tobytes())


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def to_unit(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / np.float32(255.0)


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(directory, split: str = "train") -> Dataset:
    """Load the raw MNIST split from ``directory`` (plain or .gz files)."""
    directory = Path(directory)
    arrays = []
    for name in MNIST_FILES[split]:
        p = directory / name
        gz = directory / (name + ".gz")
        if p.exists():
            arrays.append(read_idx(p))
        elif gz.exists():
            arrays.append(parse_idx(gzip.decompress(gz.read_bytes()), gz))
        else:
            raise DataError(f"missing MNIST file {p}")
    images, labels = arrays
    return Dataset(to_unit(images).reshape(len(images), -1), labels, 10, split=split, meta={"source": str(directory)})


# ---------------------------------------------------------------------------
# image transforms


def rotate_images(images: np.ndarray, theta, foreshorten: bool = False) -> np.ndarray:
    """Rotate square images about their centre with bilinear sampling.

    ``theta`` is in degrees, positive = counter-clockwise as displayed, and may
    be a scalar or one angle per image. With ``foreshorten`` the image is
    instead squeezed horizontally by cos(theta), as if turned about the
    vertical axis. Pixels sampled from outside the source are 0.
    """
    imgs = np.asarray(images, dtype=np.float32)
    single = imgs.ndim == 2
    if single:
        imgs = imgs[None]
    n, h, w = imgs.shape
    th = np.deg2rad(np.broadcast_to(np.asarray(theta, dtype=np.float64), (n,)))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = rows - cy, cols - cx
    c, s = np.cos(th)[:, None, None], np.sin(th)[:, None, None]
    if foreshorten:
        src_x = cx + dx / c
        src_y = np.broadcast_to(rows, (n, h, w))
    else:
        # inverse map of a counter-clockwise turn (row axis points down)
        src_x = cx + c * dx - s * dy
        src_y = cy + s * dx + c * dy
    out = _bilinear(imgs, src_y, src_x)
    out[th == 0] = imgs[th == 0]
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def rotate_image(img: np.ndarray, theta: float, foreshorten: bool = False) -> np.ndarray:
    return rotate_images(img, theta, foreshorten)


def _bilinear(imgs: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    n, h, w = imgs.shape
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0).astype(np.float32)
    fx = (sx - x0).astype(np.float32)
    batch = np.arange(n)[:, None, None]
    out = np.zeros(sy.shape, dtype=np.float32)
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + oy, x0 + ox
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = imgs[batch, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(ok, vals * wy * wx, 0.0).astype(np.float32)
    return out


def morph(images: np.ndarray, kernel: int) -> np.ndarray:
    """Grey dilation (kernel > 0) or erosion (kernel < 0) with a square window.

    The window has side ``|kernel|``; for even sides it extends one pixel
    further up/left. Windows are clipped at the border.
    """
    if kernel == 0:
        raise ConfigError("kernel must be non-zero")
    imgs = np.asarray(images, dtype=np.float32)
    single = imgs.ndim == 2
    if single:
        imgs = imgs[None]
    k = abs(kernel)
    if k == 1:
        out = imgs.copy()
        return out[0] if single else out
    before, after = k // 2, k - 1 - k // 2
    # edge replication equals window clipping for max/min filters
    padded = np.pad(imgs, ((0, 0), (before, after), (before, after)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    out = windows.max(axis=(-2, -1)) if kernel > 0 else windows.min(axis=(-2, -1))
    out = np.ascontiguousarray(out, dtype=np.float32)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# dataset builders


@dataclass(frozen=True)
class RotSpec:
    angles: tuple[float, ...] = TRAIN_ANGLES
    foreshorten: bool = False

    def __post_init__(self):
        if not self.angles:
            raise ConfigError("angle set is empty")
        bad = [a for a in self.angles if not -90 < a < 90]
        if bad:
            raise ConfigError(f"angles must lie in (-90, 90): {bad}")


def build_mnist_rot(base: Dataset, spec: RotSpec, seed: int, side: int = 28, stream: str = "mnist-rot") -> Dataset:
    """Rotate every image by one angle drawn uniformly from ``spec.angles``.

    ``z`` is the index of the drawn angle. Per-sample choices come from the
    named stream of ``seed``, so the result is a pure function of its inputs.
    """
    rng = rng_stream(seed, stream)
    z = rng.integers(0, len(spec.angles), size=len(base))
    theta = np.asarray(spec.angles, dtype=np.float64)[z]
    imgs = base.x.reshape(len(base), side, side)
    out = np.empty_like(imgs)
    for start in range(0, len(base), 4096):
        sl = slice(start, start + 4096)
        out[sl] = rotate_images(imgs[sl], theta[sl], spec.foreshorten)
    meta = dict(base.meta, angles=list(spec.angles), seed=seed, foreshorten=spec.foreshorten)
    return Dataset(out.reshape(len(base), -1), base.y, base.num_classes, z, len(spec.angles), base.split, meta)


def build_mnist_dil(base: Dataset, kernels: Sequence[int] = DIL_KERNELS, side: int = 28) -> dict[int, Dataset]:
    """One eroded/dilated copy of ``base`` per kernel size."""
    imgs = base.x.reshape(len(base), side, side)
    out = {}
    for k in kernels:
        m = morph(imgs, int(k)).reshape(len(base), -1)
        out[int(k)] = Dataset(m, base.y, base.num_classes, split=base.split, meta=dict(base.meta, kernel=int(k)))
    return out


@dataclass(frozen=True)
class SyntheticSpec:
    y_classes: int = 10
    z_classes: int = 5
    n: int = 50_000
    noise: float = 0.05
    seed: int = 0
    linear: bool = False
    identity_mixing: bool = False
    max_condition: float = 1e3

    def __post_init__(self):
        if self.y_classes < 2 or self.z_classes < 1 or self.n < 1:
            raise ConfigError(f"bad synthetic spec {self}")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    @property
    def dim(self) -> int:
        return self.y_classes + self.z_classes


def mixing_matrix(spec: SyntheticSpec) -> np.ndarray:
    d = spec.dim
    if spec.identity_mixing:
        return np.eye(d)
    rng = rng_stream(spec.seed, "synthetic-mixing")
    for _ in range(100):
        a = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)) + np.eye(d)
        if np.linalg.cond(a) <= spec.max_condition:
            return a
    raise DataError(f"no mixing matrix with condition <= {spec.max_condition} in 100 draws")


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Two independent categorical factors, one-hot encoded, jittered and mixed.

    ``x = tanh(A [onehot(y); onehot(z)] + jitter) + noise`` with both jitter and
    observation noise scaled by ``spec.noise``; ``linear`` drops the tanh.
    """
    rng = rng_stream(spec.seed, "synthetic-samples")
    y = rng.integers(0, spec.y_classes, size=spec.n)
    z = rng.integers(0, spec.z_classes, size=spec.n)
    f = np.zeros((spec.n, spec.dim))
    f[np.arange(spec.n), y] = 1.0
    f[np.arange(spec.n), spec.y_classes + z] = 1.0
    if spec.noise:
        f += spec.noise * rng.normal(size=f.shape)
    x = f @ mixing_matrix(spec).T
    if not spec.linear:
        x = np.tanh(x)
    if spec.noise:
        x += spec.noise * rng.normal(size=x.shape)
    meta = {"kind": "synthetic", "seed": spec.seed, "noise": spec.noise}
    return Dataset(x.astype(np.float32), y, spec.y_classes, z, spec.z_classes, meta=meta)


def label_mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) between two label vectors."""
    a = np.asarray(a)
    b = np.asarray(b)
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


# ---------------------------------------------------------------------------
# persistence: IDX pairs plus a key=value manifest


def save_dataset(ds: Dataset, directory, stem: str) -> dict[str, str]:
    """Write images/labels(/nuisance) IDX files; returns the file names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    side = int(round(math.sqrt(ds.dim)))
    if side * side == ds.dim and ds.x.min() >= 0 and ds.x.max() <= 1:
        write_idx(to_uint8(ds.x).reshape(len(ds), side, side), directory / f"{stem}-images-idx3-ubyte")
        files["images"] = f"{stem}-images-idx3-ubyte"
    else:
        # non-image features: float32 rows stored as raw .npy
        np.save(directory / f"{stem}-features.npy", ds.x)
        files["features"] = f"{stem}-features.npy"
    write_idx(ds.y.astype(np.uint8), directory / f"{stem}-labels-idx1-ubyte")
    files["labels"] = f"{stem}-labels-idx1-ubyte"
    if ds.z is not None:
        write_idx(ds.z.astype(np.uint8), directory / f"{stem}-nuisance-idx1-ubyte")
        files["nuisance"] = f"{stem}-nuisance-idx1-ubyte"
    return files


def load_saved(directory, files: dict[str, str], num_classes: int, num_nuisance=None, split="test") -> Dataset:
    directory = Path(directory)
    if "images" in files:
        x = to_unit(read_idx(directory / files["images"]))
        x = x.reshape(len(x), -1)
    else:
        x = np.load(directory / files["features"])
    y = read_idx(directory / files["labels"]).astype(np.int64)
    z = read_idx(directory / files["nuisance"]).astype(np.int64) if "nuisance" in files else None
    return Dataset(x, y, num_classes, z, num_nuisance if z is not None else None, split)


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in entries.items()]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_manifest(path) -> dict[str, str]:
    out = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{ln}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def manifest_datasets(path) -> dict[str, Dataset]:
    """Load every ``set.<name>.*`` group listed in a manifest."""
    path = Path(path)
    man = read_manifest(path)
    groups: dict[str, dict[str, str]] = {}
    for k, v in man.items():
        if k.startswith("set."):
            _, name, field_ = k.split(".", 2)
            groups.setdefault(name, {})[field_] = v
    out = {}
    for name, g in groups.items():
        files = {f: g[f] for f in ("images", "features", "labels", "nuisance") if f in g}
        nn = int(g["num_nuisance"]) if "num_nuisance" in g else None
        out[name] = load_saved(path.parent, files, int(g.get("num_classes", "10")), nn, g.get("split", "test"))
    return out
