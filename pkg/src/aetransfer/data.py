"""Dataset splits: CIFAR-10 binary reader and a synthetic stand-in.

CIFAR-10 binary layout: each record is 1 label byte followed by 3072 pixel
bytes (1024 red, 1024 green, 1024 blue; each plane row-major 32x32).
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
CIFAR_SIDE = 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


class DatasetError(ValueError):
    pass


class MalformedFileError(DatasetError):
    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: malformed at byte offset {offset}: {reason}")
        self.path = str(path)
        self.offset = offset


@dataclass
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray
    name: str = "train"
    source: str = "synthetic"
    num_classes: int = 10
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError("image and label counts differ")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 255):
            raise DatasetError("pixel values must lie in [0, 255]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def head(self, n: int) -> "DatasetSplit":
        return DatasetSplit(self.images[:n], self.labels[:n], self.name, self.source,
                            self.num_classes, dict(self.meta))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


# ---- CIFAR-10 --------------------------------------------------------------


def decode_records(raw: bytes, path="<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode concatenated CIFAR-10 records into uint8 images (N, 3, 32, 32) and labels."""
    if len(raw) % RECORD_BYTES:
        whole = len(raw) // RECORD_BYTES
        raise MalformedFileError(path, whole * RECORD_BYTES,
                                 f"truncated record ({len(raw) % RECORD_BYTES} trailing bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise MalformedFileError(path, int(bad[0]) * RECORD_BYTES, f"label byte {labels[bad[0]]} > 9")
    images = arr[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).copy()
    return images, labels


def encode_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    images = np.asarray(images)
    if images.dtype != np.uint8:
        if np.any(images != np.round(images)) or images.min() < 0 or images.max() > 255:
            raise DatasetError("only integral 0-255 pixels can be encoded as CIFAR-10 records")
        images = images.astype(np.uint8)
    n = len(labels)
    out = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = np.asarray(labels, dtype=np.uint8)
    out[:, 1:] = images.reshape(n, -1)
    return out.tobytes()


def read_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing CIFAR-10 file: {path}")
    return decode_records(path.read_bytes(), path)


def stratified_subsample(labels: np.ndarray, n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of an n-element sample with per-class counts as equal as possible."""
    if n > len(labels):
        raise DatasetError(f"cannot subsample {n} from {len(labels)}")
    base, extra = divmod(n, num_classes)
    picks = []
    for k in range(num_classes):
        pool = np.flatnonzero(labels == k)
        want = base + (1 if k < extra else 0)
        if want > len(pool):
            raise DatasetError(f"class {k} has only {len(pool)} examples, need {want}")
        picks.append(rng.choice(pool, size=want, replace=False))
    return np.sort(np.concatenate(picks))


def bilinear_resize(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of (N, C, H, W) to (N, C, size, size), half-pixel centres."""
    n, c, h, w = images.shape

    def axis(src: int):
        pos = (np.arange(size) + 0.5) * (src / size) - 0.5
        pos = np.clip(pos, 0, src - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h)
    c0, c1, fc = axis(w)
    x = images.astype(np.float64)
    top = x[:, :, r0, :] * (1 - fr)[:, None] + x[:, :, r1, :] * fr[:, None]
    return top[:, :, :, c0] * (1 - fc) + top[:, :, :, c1] * fc


def ingest_cifar10(path, subsample: int | None = None, test_subsample: int | None = None,
                   downscale: int | None = None, seed: int = 0) -> dict[str, DatasetSplit]:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory not found: {root}")
    rng = np.random.default_rng(seed)
    parts = [read_cifar_file(root / f) for f in TRAIN_FILES]
    raw = {
        "train": (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])),
        "test": read_cifar_file(root / TEST_FILE),
    }
    wanted = {"train": subsample, "test": test_subsample}
    out = {}
    for name, (imgs, labels) in raw.items():
        if wanted[name] is not None:
            idx = stratified_subsample(labels, wanted[name], 10, rng)
            imgs, labels = imgs[idx], labels[idx]
        x = imgs.astype(np.float64)
        if downscale is not None and downscale != CIFAR_SIDE:
            x = bilinear_resize(x, downscale)
        out[name] = DatasetSplit(x, labels, name=name, source="cifar10-binary", num_classes=10,
                                 meta={"path": str(root), "downscale": downscale, "seed": seed})
    return out


# ---- synthetic -------------------------------------------------------------


def make_synthetic(num_classes: int = 10, per_class: int = 250, image_size: int = 16, seed: int = 0,
                   test_per_class: int | None = None, noise_std: float = 28.0,
                   amplitude: float = 40.0) -> dict[str, DatasetSplit]:
    """Class-structured textures: each class is a distinct pair of oriented colour gratings.

    Gratings have random phase and jittered amplitude and frequency, so the
    class signal is texture energy rather than a fixed template.  A faint
    class-dependent mean colour leaves a weak linear cue.
    """
    if num_classes < 2 or per_class < 1 or image_size < 4:
        raise DatasetError("need num_classes >= 2, per_class >= 1 and image_size >= 4")
    rng = np.random.default_rng(seed)
    bank = 2
    while bank * (bank - 1) // 2 < num_classes:
        bank += 1
    pairs = list(itertools.combinations(range(bank), 2))[:num_classes]
    orient = np.pi * np.arange(bank) / bank
    freq = 1.0 / np.linspace(3.0, 5.5, bank)
    color = rng.normal(size=(bank, 3))
    color /= np.linalg.norm(color, axis=1, keepdims=True)
    tint = rng.normal(scale=4.0, size=(num_classes, 3))
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)

    def render(n: int, k: int) -> np.ndarray:
        imgs = np.full((n, 3, image_size, image_size), 127.5)
        imgs += tint[k][None, :, None, None]
        for g in pairs[k]:
            th = orient[g] + rng.normal(scale=0.08, size=n)
            f = freq[g] * (1 + rng.normal(scale=0.05, size=n))
            ph = rng.uniform(0, 2 * np.pi, size=n)
            amp = amplitude * rng.uniform(0.6, 1.4, size=n)
            proj = xx[None] * np.cos(th)[:, None, None] + yy[None] * np.sin(th)[:, None, None]
            wave = amp[:, None, None] * np.cos(2 * np.pi * f[:, None, None] * proj + ph[:, None, None])
            imgs += color[g][None, :, None, None] * wave[:, None]
        imgs += rng.normal(scale=noise_std, size=imgs.shape)
        return np.clip(imgs, 0.0, 255.0)

    def split(name: str, count: int) -> DatasetSplit:
        xs, ys = [], []
        for k in range(num_classes):
            xs.append(render(count, k))
            ys.append(np.full(count, k))
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = rng.permutation(len(y))
        return DatasetSplit(x[order], y[order], name=name, source="synthetic", num_classes=num_classes,
                            meta={"seed": seed, "per_class": count, "image_size": image_size})

    train = split("train", per_class)
    test = split("test", per_class if test_per_class is None else test_per_class)
    return {"train": train, "test": test}
