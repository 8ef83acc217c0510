"""CIFAR-10/100 binary ingestion, normalization, augmentation and batching.

Binary layouts (one record after another, no header):

* CIFAR-10:  ``[label][1024 R][1024 G][1024 B]``, 3073 bytes
* CIFAR-100: ``[coarse][fine][1024 R][1024 G][1024 B]``, 3074 bytes
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_core import DTYPE, make_rng

PIXELS = 3072
IMAGE_SHAPE = (3, 32, 32)
RECORD_SIZE = {"c10": 3073, "c100": 3074}
NUM_CLASSES = {"c10": 10, "c100": 100}
STD_FLOOR = 1e-6
PAD = 4

_FILES = {
    "c10": ("cifar-10-batches-bin", [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    "c100": ("cifar-100-binary", ["train.bin"], ["test.bin"]),
}


class CifarFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CifarRecord:
    fine_label: int
    pixels: bytes  # 3072 bytes, R plane then G then B, each row-major 32x32
    coarse_label: int = None

    def image(self):
        """Pixels as a (3, 32, 32) float32 array scaled to [0, 1]."""
        return np.frombuffer(self.pixels, np.uint8).reshape(IMAGE_SHAPE).astype(DTYPE) / 255

    def to_bytes(self):
        head = bytes([self.fine_label]) if self.coarse_label is None else bytes([self.coarse_label, self.fine_label])
        return head + self.pixels


def _check_variant(variant):
    if variant not in RECORD_SIZE:
        raise ValueError(f"variant must be 'c10' or 'c100', got {variant!r}")


def parse_cifar_arrays(data, variant):
    """Vectorized parse: (pixels uint8 (n, 3, 32, 32), fine labels, coarse labels or None)."""
    _check_variant(variant)
    size = RECORD_SIZE[variant]
    if len(data) % size:
        raise CifarFormatError(
            f"{len(data)} bytes is not a whole number of {size}-byte {variant} records (truncated file?)"
        )
    raw = np.frombuffer(data, np.uint8).reshape(-1, size)
    if variant == "c10":
        coarse, fine = None, raw[:, 0].copy()
    else:
        coarse, fine = raw[:, 0].copy(), raw[:, 1].copy()
        if coarse.size and coarse.max() >= 20:
            raise CifarFormatError("coarse label out of range [0, 20)")
    if fine.size and fine.max() >= NUM_CLASSES[variant]:
        raise CifarFormatError(f"label out of range [0, {NUM_CLASSES[variant]})")
    pixels = raw[:, size - PIXELS :].reshape(-1, *IMAGE_SHAPE).copy()
    return pixels, fine, coarse


def parse_cifar(data, variant):
    """Records in file order."""
    pixels, fine, coarse = parse_cifar_arrays(data, variant)
    flat = pixels.reshape(len(pixels), PIXELS)
    return [
        CifarRecord(int(fine[i]), flat[i].tobytes(), None if coarse is None else int(coarse[i]))
        for i in range(len(flat))
    ]


def records_to_bytes(records):
    return b"".join(r.to_bytes() for r in records)


# --- normalization -------------------------------------------------------


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple
    std: tuple

    def arrays(self):
        return (np.asarray(self.mean, DTYPE)[:, None, None], np.asarray(self.std, DTYPE)[:, None, None])


def _as_pixel_array(records):
    if isinstance(records, np.ndarray):
        return records.reshape(-1, *IMAGE_SHAPE)
    return np.frombuffer(b"".join(r.pixels for r in records), np.uint8).reshape(-1, *IMAGE_SHAPE)


def compute_channel_stats(records):
    """Population mean/std per channel of pixels scaled to [0, 1].

    Accepts a list of ``CifarRecord`` or a uint8 (n, 3, 32, 32) array. Std is
    floored at ``STD_FLOOR`` so constant channels stay usable.
    """
    pixels = _as_pixel_array(records)
    if len(pixels) == 0:
        raise ValueError("cannot compute statistics of an empty split")
    # Exact integer sums keep the result independent of record order.
    counts = np.stack([np.bincount(pixels[:, c].ravel(), minlength=256) for c in range(3)])
    values = np.arange(256, dtype=np.float64) / 255
    n = counts.sum(axis=1)
    mean = counts @ values / n
    var = counts @ values**2 / n - mean**2
    std = np.maximum(np.sqrt(np.maximum(var, 0)), STD_FLOOR)
    return ChannelStats(tuple(float(m) for m in mean), tuple(float(s) for s in std))


def normalize(pixels, stats):
    """(pixel / 255 - mean_c) / std_c for a record, a (3, 32, 32) or an (n, 3, 32, 32) uint8 array."""
    if isinstance(pixels, CifarRecord):
        pixels = np.frombuffer(pixels.pixels, np.uint8).reshape(IMAGE_SHAPE)
    mean, std = stats.arrays()
    return ((pixels.astype(DTYPE) / DTYPE(255)) - mean) / std


def denormalize(image, stats):
    """Inverse of ``normalize``, back to [0, 1] scale."""
    mean, std = stats.arrays()
    return image * std + mean


# --- augmentation --------------------------------------------------------


def crop_and_flip(image, dy, dx, flip):
    """Crop a 32x32 window at offset (dy, dx) of the zero-padded 40x40 image."""
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * PAD, w + 2 * PAD), image.dtype)
    padded[:, PAD : PAD + h, PAD : PAD + w] = image
    out = padded[:, dy : dy + h, dx : dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(image, rng):
    """Pad 4 with zeros, random 32x32 crop, horizontal flip with probability 1/2."""
    dy, dx = rng.integers(0, 2 * PAD + 1, size=2)
    flip = bool(rng.integers(0, 2))
    return crop_and_flip(image, int(dy), int(dx), flip)


def _augment_batch(x, offsets, flips):
    n, c, h, w = x.shape
    padded = np.zeros((n, c, h + 2 * PAD, w + 2 * PAD), x.dtype)
    padded[:, :, PAD : PAD + h, PAD : PAD + w] = x
    out = np.empty_like(x)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# --- splits and batching -------------------------------------------------


@dataclass
class Split:
    pixels: np.ndarray  # uint8 (n, 3, 32, 32)
    labels: np.ndarray  # int64 (n,)
    stats: ChannelStats = None

    def __len__(self):
        return len(self.labels)

    def images(self):
        return normalize(self.pixels, self.stats)

    def with_stats(self, stats):
        return Split(self.pixels, self.labels, stats)

    def head(self, n):
        return Split(self.pixels[:n], self.labels[:n], self.stats)


def make_batches(split, batch_size, seed=0, epoch=0, augment=False, shuffle=True):
    """Yield normalized ``(images, labels)`` batches.

    With ``shuffle`` the order is a seeded permutation for ``(seed, epoch)``.
    Crop offsets and flips are drawn per record index, so a record's
    augmentation does not depend on which batch it lands in. The final
    partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = len(split)
    order = make_rng(seed, epoch, 0).permutation(n) if shuffle else np.arange(n)
    if augment:
        aug_rng = make_rng(seed, epoch, 1)
        offsets = aug_rng.integers(0, 2 * PAD + 1, size=(n, 2))
        flips = aug_rng.integers(0, 2, size=n).astype(bool)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = normalize(split.pixels[idx], split.stats)
        if augment:
            x = _augment_batch(x, offsets[idx], flips[idx])
        yield x, split.labels[idx]


# --- files ---------------------------------------------------------------


def find_cifar_files(data_dir, variant, which):
    """Paths of the standard binary archive files for ``which`` in {train, test}."""
    _check_variant(variant)
    folder, train_files, test_files = _FILES[variant]
    names = train_files if which == "train" else test_files
    root = Path(data_dir)
    for base in (root, root / folder):
        paths = [base / name for name in names]
        if all(p.is_file() for p in paths):
            return paths
    raise FileNotFoundError(f"no {variant} {which} files ({', '.join(names)}) under {root}")


def load_cifar(data_dir, variant, which="train", limit=None):
    """Read a split from the extracted binary archive; ``limit`` caps records read."""
    size = RECORD_SIZE[variant]
    chunks, remaining = [], limit
    for path in find_cifar_files(data_dir, variant, which):
        with open(path, "rb") as f:
            chunks.append(f.read() if remaining is None else f.read(remaining * size))
        if remaining is not None:
            remaining -= len(chunks[-1]) // size
            if remaining <= 0:
                break
    pixels, fine, _ = parse_cifar_arrays(b"".join(chunks), variant)
    return Split(pixels, fine.astype(np.int64))
