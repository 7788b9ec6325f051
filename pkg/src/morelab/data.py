"""Dataset acquisition and bit-exact persistence.

Datasets come from IDX files (the MNIST container format), from the
two-cluster blob generator used by closed-form robustness oracles, or from a
deterministic glyph-digit renderer that stands in for MNIST when the real
files are absent.  Checkpoints use a small integrity-hashed binary container.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .errors import (
    BadMagic,
    CountMismatch,
    HashMismatch,
    InvalidParams,
    TruncatedFile,
    VersionMismatch,
)
from .hashing import Fnv1a, content_hash64, derive_seed

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CHECKPOINT_MAGIC = b"MORE"
CHECKPOINT_VERSION = 1

DATA_DIR_ENV = "MORE_DATA_DIR"


@dataclass
class Dataset:
    """Images in [0,1] with integer labels and a stable content fingerprint."""

    images: np.ndarray  # [N, C, H, W] f32
    labels: np.ndarray  # [N] int64
    name: str = "dataset"
    num_classes: int = 0
    fingerprint: int = field(init=False, default=0)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InvalidParams(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise InvalidParams("pixels must lie in [0,1]")
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise InvalidParams("labels must be < num_classes")
        self.fingerprint = content_hash64(
            np.asarray(self.images.shape, dtype="<u4").tobytes(),
            self.images.astype("<f4").tobytes(),
            self.labels.astype("<i8").tobytes(),
        )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name: str | None = None) -> "Dataset":
        return Dataset(
            self.images[indices],
            self.labels[indices],
            name=name or f"{self.name}[subset]",
            num_classes=self.num_classes,
        )


# ---------------------------------------------------------------------------
# IDX format (big-endian, per the public MNIST container spec)
# ---------------------------------------------------------------------------


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFile(f"unexpected EOF reading {what}")
    return data


def load_idx(images_path, labels_path, name: str | None = None) -> Dataset:
    """Load an image/label IDX pair; pixels are scaled from u8 to [0,1]."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagic(f"image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        payload = _read_exact(f, count * rows * cols, "image payload")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)

    with open(labels_path, "rb") as f:
        magic, lcount = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise BadMagic(f"label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, lcount, "label payload"), dtype=np.uint8)

    if count != lcount:
        raise CountMismatch(f"{count} images vs {lcount} labels")
    return Dataset(
        images.astype(np.float32) / np.float32(255.0),
        labels.astype(np.int64),
        name=name or Path(images_path).stem,
    )


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a dataset as an IDX pair (pixels quantized back to u8)."""
    n, c, h, w = ds.images.shape
    if c != 1:
        raise InvalidParams("IDX export supports single-channel images only")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(np.round(ds.images[:, 0] * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def data_dir() -> Path | None:
    root = os.environ.get(DATA_DIR_ENV)
    return Path(root) if root else None


def find_mnist(split: str = "train") -> tuple[Path, Path] | None:
    """Locate MNIST IDX files under $MORE_DATA_DIR, if present."""
    root = data_dir()
    if root is None:
        return None
    stem = "train" if split == "train" else "t10k"
    candidates = [
        (root / f"{stem}-images-idx3-ubyte", root / f"{stem}-labels-idx1-ubyte"),
        (root / f"{stem}-images.idx3-ubyte", root / f"{stem}-labels.idx1-ubyte"),
    ]
    for images, labels in candidates:
        if images.exists() and labels.exists():
            return images, labels
    return None


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------


def synth_blobs(n: int, margin: float, dim: int, seed: int) -> Dataset:
    """Two Gaussian clusters (sigma=0.1) split along the first axis.

    Cluster centers sit at 0.5 +/- margin/2 inside the unit box, so the
    center separation equals the margin exactly and every pixel lands in
    [0,1] after clipping.
    """
    if n <= 0 or n % 2:
        raise InvalidParams("n must be positive and even")
    if not 0 < margin <= 1.0:
        raise InvalidParams("margin must lie in (0, 1]")
    if dim < 1:
        raise InvalidParams("dim must be >= 1")
    rng = np.random.default_rng(np.random.PCG64(seed))
    half = n // 2
    pts = rng.normal(0.0, 0.1, size=(n, dim))
    pts += 0.5
    pts[:half, 0] -= margin / 2.0
    pts[half:, 0] += margin / 2.0
    labels = np.repeat([0, 1], half)
    images = np.clip(pts, 0.0, 1.0).astype(np.float32).reshape(n, 1, 1, dim)
    return Dataset(images, labels, name=f"blobs(n={n},margin={margin})", num_classes=2)


# 5x7 console-font digit bitmaps, row-major strings
_GLYPHS = [
    "01110 10001 10011 10101 11001 10001 01110",
    "00100 01100 00100 00100 00100 00100 01110",
    "01110 10001 00001 00010 00100 01000 11111",
    "11111 00010 00100 00010 00001 10001 01110",
    "00010 00110 01010 10010 11111 00010 00010",
    "11111 10000 11110 00001 00001 10001 01110",
    "00110 01000 10000 11110 10001 10001 01110",
    "11111 00001 00010 00100 01000 01000 01000",
    "01110 10001 10001 01110 10001 10001 01110",
    "01110 10001 10001 01111 00001 00010 01100",
]


def _glyph_array(digit: int) -> np.ndarray:
    rows = _GLYPHS[digit].split()
    return np.array([[int(ch) for ch in row] for row in rows], dtype=np.float32)


def synth_digits(n: int, seed: int, side: int = 28, noise: float = 0.04) -> Dataset:
    """Deterministic MNIST stand-in: jittered glyph digits on a noisy canvas.

    Each sample scales a 5x7 digit bitmap by a random factor, drops it at a
    random offset, jitters stroke intensity, and adds Gaussian pixel noise.
    Strokes stay near-saturated so the classes keep a healthy margin under
    moderate lp perturbations, mirroring MNIST's contrast profile.
    """
    if n <= 0:
        raise InvalidParams("n must be positive")
    rng = np.random.default_rng(np.random.PCG64(seed))
    images = np.zeros((n, 1, side, side), dtype=np.float32)
    labels = rng.integers(0, 10, size=n)
    glyphs = [_glyph_array(d) for d in range(10)]
    for i in range(n):
        g = glyphs[labels[i]]
        s = rng.uniform(3.0, 3.8)
        gh, gw = int(7 * s), int(5 * s)
        ri = (np.arange(gh) / s).astype(np.int64).clip(0, 6)
        ci = (np.arange(gw) / s).astype(np.int64).clip(0, 4)
        sprite = g[np.ix_(ri, ci)] * rng.uniform(0.85, 1.0)
        r0 = rng.integers(0, side - gh + 1)
        c0 = rng.integers(0, side - gw + 1)
        canvas = images[i, 0]
        canvas[r0 : r0 + gh, c0 : c0 + gw] = sprite
        canvas += rng.normal(0.0, noise, size=(side, side)).astype(np.float32)
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels.astype(np.int64), name=f"glyphs(n={n})", num_classes=10)


def desk_digits(n_train: int, n_test: int, seed: int = 2024) -> tuple[Dataset, Dataset]:
    """The desk benchmark pair: real MNIST when available, glyph digits otherwise."""
    mnist_train = find_mnist("train")
    mnist_test = find_mnist("test")
    if mnist_train and mnist_test:
        train = load_idx(*mnist_train, name="mnist-train")
        test = load_idx(*mnist_test, name="mnist-test")
        return train.subset(slice(0, n_train)), test.subset(slice(0, n_test))
    train = synth_digits(n_train, seed=derive_seed(seed, 0))
    test = synth_digits(n_test, seed=derive_seed(seed, 1))
    return train, test


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFile(f"unexpected EOF reading {what}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        return self.take(self.u32(what), what).decode("utf-8")


def save_checkpoint(path, records: dict[str, np.ndarray], metadata: dict[str, str]) -> None:
    """Write the integrity-hashed container: named f32 tensors plus metadata."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    parts.append(struct.pack("<I", len(metadata)))
    for key in sorted(metadata):
        parts.append(_pack_str(key))
        parts.append(_pack_str(metadata[key]))
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        parts.append(_pack_str(name))
        parts.append(_pack_str("f32"))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    digest = Fnv1a().update(body).digest()
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<Q", digest))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str], int]:
    """Read a container back; returns (records, metadata, fingerprint)."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise TruncatedFile("file shorter than its integrity footer")
    body, footer = blob[:-8], blob[-8:]
    stored = struct.unpack("<Q", footer)[0]
    actual = Fnv1a().update(body).digest()
    if body[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"magic {body[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if actual != stored:
        raise HashMismatch(f"stored 0x{stored:016x} vs computed 0x{actual:016x}")
    r = _Reader(body)
    r.take(4, "magic")
    version = r.u16("version")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"version {version}, expected {CHECKPOINT_VERSION}")
    metadata = {}
    for _ in range(r.u32("metadata count")):
        key = r.string("metadata key")
        metadata[key] = r.string("metadata value")
    records: dict[str, np.ndarray] = {}
    for _ in range(r.u32("record count")):
        name = r.string("record name")
        dtype = r.string("record dtype")
        if dtype != "f32":
            raise VersionMismatch(f"unsupported dtype {dtype!r}")
        ndim = r.u32("record ndim")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "record shape")) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        payload = r.take(4 * count, f"payload of {name}")
        records[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return records, metadata, stored


def save_model(model: nn.Model, path, extra_meta: dict[str, str] | None = None) -> None:
    metadata = {
        "kind": "model",
        "arch": model.arch.to_json(),
        "seed": str(model.seed),
    }
    if extra_meta:
        metadata.update(extra_meta)
    save_checkpoint(path, {n: t.data for n, t in model.named_params()}, metadata)


def load_model(path) -> tuple[nn.Model, dict[str, str]]:
    records, metadata, _ = load_checkpoint(path)
    arch = nn.ArchSpec.from_json(metadata["arch"])
    model = nn.build_classifier(arch, seed=int(metadata.get("seed", "0")))
    for name, tensor in model.named_params():
        if name not in records:
            raise TruncatedFile(f"checkpoint missing parameter {name!r}")
        if records[name].shape != tensor.data.shape:
            raise CountMismatch(f"parameter {name!r} shape mismatch")
        model.params[name] = T.Tensor(records[name], requires_grad=True)
    return model, metadata
