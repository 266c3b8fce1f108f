"""shiftedMNIST: MNIST digits composited over class-correlated or random textures.

Train examples always carry the texture whose index equals the digit; val and
test examples draw the texture uniformly at random.  Splits are stored as
``SMN1`` files (see :func:`write_split`) next to a JSON manifest.
"""

import gzip
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ifmlab.errors import (
    BadHeader,
    BadMagic,
    ChecksumMismatch,
    DimensionMismatch,
    EmptySource,
    InsufficientTextures,
    IoFailure,
    TextureTooSmall,
    TruncatedPayload,
    UnreadableImage,
)

logger = logging.getLogger(__name__)

IMAGE_SIZE = 32
DIGIT_SIZE = 28
PAD = (IMAGE_SIZE - DIGIT_SIZE) // 2
NUM_CLASSES = 10
FOREGROUND_THRESHOLD = 77

SPLIT_MAGIC = b"SMN1"
SPLIT_VERSION = 1
_HEADER = struct.Struct("<4sBIII")
HEADER_SIZE = _HEADER.size  # 17
RECORD_SIZE = 2 + IMAGE_SIZE * IMAGE_SIZE
_CRC = struct.Struct("<I")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

# split ids mixed into the per-example seed
SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


# ---------------------------------------------------------------------------
# MNIST ingestion
# ---------------------------------------------------------------------------


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (n, 28, 28) uint8
    labels: np.ndarray  # (n,) uint8

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DimensionMismatch(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    @property
    def count(self):
        return len(self.labels)


def _maybe_gunzip(raw):
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def parse_idx(raw_bytes):
    """Decode one IDX file (raw or gzip-compressed) holding unsigned bytes."""
    raw = _maybe_gunzip(bytes(raw_bytes))
    if len(raw) < 4:
        raise BadMagic("file shorter than the 4-byte magic number")
    zero, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or dtype_code != 0x08 or ndim == 0:
        raise BadMagic(f"unsupported IDX magic 0x{raw[:4].hex()}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise TruncatedPayload("dimension header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = math.prod(dims)
    available = len(raw) - header_end
    if expected > available:
        raise TruncatedPayload(f"header declares {expected} bytes, {available} present")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_end).reshape(dims)


def parse_idx_pair(image_bytes, label_bytes):
    images = parse_idx(image_bytes)
    labels = parse_idx(label_bytes)
    if images.ndim != 3 or images.shape[1:] != (DIGIT_SIZE, DIGIT_SIZE):
        raise DimensionMismatch(f"expected (n, 28, 28) images, got {images.shape}")
    if labels.ndim != 1:
        raise DimensionMismatch(f"expected 1-D labels, got {labels.shape}")
    if labels.size and labels.max() >= NUM_CLASSES:
        raise DimensionMismatch("label outside 0..9")
    return LabeledImageSet(images.copy(), labels.copy())


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        path = directory / name
        if path.exists():
            return path
    # some mirrors use dots instead of dashes
    for name in (stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        path = directory / name
        if path.exists():
            return path
    raise IoFailure(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, kind="train"):
    """Load ``{kind}-images-idx3-ubyte[.gz]`` and its label file from a directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IoFailure(f"MNIST directory not found: {directory}")
    img = _find(directory, f"{kind}-images-idx3-ubyte")
    lab = _find(directory, f"{kind}-labels-idx1-ubyte")
    return parse_idx_pair(img.read_bytes(), lab.read_bytes())


# ---------------------------------------------------------------------------
# Textures
# ---------------------------------------------------------------------------


@dataclass
class TextureBank:
    textures: list  # 10 uint8 arrays, each >= 32x32
    source_kind: str  # "procedural" | "external_directory"
    seed: int
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.textures) != NUM_CLASSES:
            raise InsufficientTextures(f"need {NUM_CLASSES} textures, got {len(self.textures)}")


def procedural_texture(k, seed, size=96, levels=(40, 200), noise=20):
    """Thresholded sinusoidal grating: orientation k*18 deg, period 3+k px, uniform noise."""
    theta = math.radians(18 * k)
    period = 3 + k
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = np.sin(2 * np.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period)
    base = np.where(wave >= 0, levels[1], levels[0]).astype(np.int16)
    rng = np.random.default_rng([seed, k])
    jitter = rng.integers(-noise, noise + 1, size=(size, size), dtype=np.int16)
    return np.clip(base + jitter, 0, 255).astype(np.uint8)


def _load_gray(path):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise UnreadableImage(f"cannot read texture {path}: {exc}") from exc


def build_texture_bank(source="procedural", seed=0):
    """Ten textures, either synthesized or drawn from an image directory by seeded shuffle."""
    if source == "procedural":
        textures = [procedural_texture(k, seed) for k in range(NUM_CLASSES)]
        return TextureBank(textures, "procedural", seed, ["procedural"] * NUM_CLASSES)

    directory = Path(source)
    if not directory.is_dir():
        raise IoFailure(f"texture directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if len(files) < NUM_CLASSES:
        raise InsufficientTextures(f"{directory} holds {len(files)} images, need {NUM_CLASSES}")
    order = np.random.default_rng(seed).permutation(len(files))[:NUM_CLASSES]
    chosen = [files[i] for i in order]
    textures = [_load_gray(p) for p in chosen]
    for p, t in zip(chosen, textures):
        if t.shape[0] < IMAGE_SIZE or t.shape[1] < IMAGE_SIZE:
            raise TextureTooSmall(f"{p.name} is {t.shape}, need at least 32x32")
    return TextureBank(textures, "external_directory", seed, [p.name for p in chosen])


def crop_texture(bank, texture_id, rng):
    texture = bank.textures[texture_id]
    h, w = texture.shape
    if h < IMAGE_SIZE or w < IMAGE_SIZE:
        raise TextureTooSmall(f"texture {texture_id} is {h}x{w}")
    top = int(rng.integers(0, h - IMAGE_SIZE + 1))
    left = int(rng.integers(0, w - IMAGE_SIZE + 1))
    return texture[top : top + IMAGE_SIZE, left : left + IMAGE_SIZE]


def composite(digit, patch):
    """Zero-pad the digit to 32x32 and keep its pixels wherever they reach the threshold.

    Works on single images or stacked batches ``(..., 28, 28)`` / ``(..., 32, 32)``.
    """
    digit = np.asarray(digit, dtype=np.uint8)
    pad = [(0, 0)] * (digit.ndim - 2) + [(PAD, PAD), (PAD, PAD)]
    padded = np.pad(digit, pad)
    return np.where(padded >= FOREGROUND_THRESHOLD, padded, patch).astype(np.uint8)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


class ShiftedExample(NamedTuple):
    image: np.ndarray
    digit_label: int
    texture_label: int


@dataclass
class Split:
    images: np.ndarray  # (n, 32, 32) uint8
    digit_labels: np.ndarray  # (n,) uint8
    texture_labels: np.ndarray  # (n,) uint8
    source_index: Optional[np.ndarray] = None  # position in the MNIST source, not serialized

    def __len__(self):
        return len(self.digit_labels)

    def __getitem__(self, i):
        if isinstance(i, slice):
            src = None if self.source_index is None else self.source_index[i]
            return Split(self.images[i], self.digit_labels[i], self.texture_labels[i], src)
        return ShiftedExample(self.images[i], int(self.digit_labels[i]), int(self.texture_labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Split):
            return NotImplemented
        return (
            np.array_equal(self.images, other.images)
            and np.array_equal(self.digit_labels, other.digit_labels)
            and np.array_equal(self.texture_labels, other.texture_labels)
        )

    @classmethod
    def from_examples(cls, examples: Sequence[ShiftedExample]):
        if not examples:
            return cls.empty()
        return cls(
            np.stack([np.asarray(e.image, dtype=np.uint8) for e in examples]),
            np.array([e.digit_label for e in examples], dtype=np.uint8),
            np.array([e.texture_label for e in examples], dtype=np.uint8),
        )

    @classmethod
    def empty(cls):
        return cls(
            np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), np.uint8),
            np.zeros(0, np.uint8),
            np.zeros(0, np.uint8),
        )


@dataclass
class DatasetBundle:
    train: Split
    val: Split
    test: Split
    manifest: dict

    def split(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def _render(source, indices, bank, seed, split_name):
    split_id = SPLIT_IDS[split_name]
    n = len(indices)
    patches = np.empty((n, IMAGE_SIZE, IMAGE_SIZE), np.uint8)
    textures = np.empty(n, np.uint8)
    digits = source.labels[indices].astype(np.uint8)
    for pos in range(n):
        # per-example stream: any execution order yields the same example
        rng = np.random.default_rng([seed, split_id, pos])
        tex = int(digits[pos]) if split_name == "train" else int(rng.integers(NUM_CLASSES))
        textures[pos] = tex
        patches[pos] = crop_texture(bank, tex, rng)
    images = composite(source.images[indices], patches)
    return Split(images, digits, textures, np.asarray(indices))


def validation_size(n):
    # round-half-up of n/5
    return (n + 2) // 5


def build_splits(mnist_train, mnist_test, bank, seed, train_limit=None):
    """Partition MNIST train 4/5 : 1/5 into train/val and render all three splits.

    ``train_limit`` keeps only the first ``n`` train examples of the seeded
    shuffle; val and test are unaffected.
    """
    if mnist_train.count == 0 or mnist_test.count == 0:
        raise EmptySource("MNIST source has no examples")
    if len(bank.textures) != NUM_CLASSES:
        raise InsufficientTextures("texture bank must hold 10 textures")
    order = np.random.default_rng([seed, 99]).permutation(mnist_train.count)
    n_val = validation_size(mnist_train.count)
    val_idx = np.sort(order[:n_val])
    train_idx = order[n_val:]
    if train_limit is not None:
        train_idx = train_idx[:train_limit]
    train_idx = np.sort(train_idx)
    test_idx = np.arange(mnist_test.count)

    train = _render(mnist_train, train_idx, bank, seed, "train")
    val = _render(mnist_train, val_idx, bank, seed, "val")
    test = _render(mnist_test, test_idx, bank, seed, "test")
    manifest = {
        "format_version": SPLIT_VERSION,
        "seed": int(seed),
        "source_kind": bank.source_kind,
        "texture_seed": int(bank.seed),
        "textures": list(bank.provenance),
        "mnist_train_count": int(mnist_train.count),
        "mnist_test_count": int(mnist_test.count),
        "train_limit": train_limit,
        "sizes": {"train": len(train), "val": len(val), "test": len(test)},
    }
    return DatasetBundle(train, val, test, manifest)


# ---------------------------------------------------------------------------
# SMN1 split files
# ---------------------------------------------------------------------------


def encode_split(split):
    n = len(split)
    records = np.empty((n, RECORD_SIZE), np.uint8)
    records[:, 0] = split.digit_labels
    records[:, 1] = split.texture_labels
    records[:, 2:] = split.images.reshape(n, IMAGE_SIZE * IMAGE_SIZE)
    payload = records.tobytes()
    header = _HEADER.pack(SPLIT_MAGIC, SPLIT_VERSION, n, IMAGE_SIZE, IMAGE_SIZE)
    return header + payload + _CRC.pack(zlib.crc32(payload))


def decode_split(raw):
    if len(raw) < HEADER_SIZE:
        raise BadHeader("file shorter than the SMN1 header")
    magic, version, count, height, width = _HEADER.unpack_from(raw)
    if magic != SPLIT_MAGIC:
        raise BadHeader(f"bad magic {magic!r}")
    if version != SPLIT_VERSION:
        raise BadHeader(f"unsupported format version {version}")
    if (height, width) != (IMAGE_SIZE, IMAGE_SIZE):
        raise BadHeader(f"unsupported image size {height}x{width}")
    payload_len = count * RECORD_SIZE
    if len(raw) != HEADER_SIZE + payload_len + _CRC.size:
        raise ChecksumMismatch(
            f"expected {HEADER_SIZE + payload_len + _CRC.size} bytes, found {len(raw)}"
        )
    payload = raw[HEADER_SIZE : HEADER_SIZE + payload_len]
    (stored,) = _CRC.unpack_from(raw, HEADER_SIZE + payload_len)
    if zlib.crc32(payload) != stored:
        raise ChecksumMismatch("payload CRC32 does not match")
    records = np.frombuffer(payload, np.uint8).reshape(count, RECORD_SIZE)
    return Split(
        records[:, 2:].reshape(count, IMAGE_SIZE, IMAGE_SIZE).copy(),
        records[:, 0].copy(),
        records[:, 1].copy(),
    )


def write_split(split, path):
    if not isinstance(split, Split):
        split = Split.from_examples(list(split))
    raw = encode_split(split)
    try:
        Path(path).write_bytes(raw)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return len(raw)


def read_split(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return decode_split(raw)


def save_bundle(bundle, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        write_split(bundle.split(name), directory / f"{name}.smn")
    (directory / "manifest.json").write_text(json.dumps(bundle.manifest, indent=2, sort_keys=True) + "\n")


def load_bundle(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except OSError as exc:
        raise IoFailure(f"no manifest in {directory}") from exc
    splits = {name: read_split(directory / f"{name}.smn") for name in ("train", "val", "test")}
    return DatasetBundle(splits["train"], splits["val"], splits["test"], manifest)


def to_tensors(split, dtype=None):
    """Images scaled to [0, 1] as ``(n, 1, 32, 32)`` plus digit and texture label tensors."""
    import torch

    x = torch.from_numpy(split.images.astype(np.float32) / 255.0).unsqueeze(1)
    if dtype is not None:
        x = x.to(dtype)
    digit = torch.from_numpy(split.digit_labels.astype(np.int64))
    texture = torch.from_numpy(split.texture_labels.astype(np.int64))
    return x, digit, texture


def bundled_mnist_dir():
    """Directory of the 10k-digit MNIST sample shipped with the package (8000 train / 2000 test)."""
    return Path(__file__).parent / "mnist_subset"
