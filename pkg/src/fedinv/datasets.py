"""Toy shape dataset generation and the binary dataset file format.

Images are a class-determined foreground pattern drawn in a contiguous
block of patches, over an otherwise pure-noise background. That makes the
foreground/background token split of the method literal: some patches carry
all the label signal, the rest carry none.
"""

from __future__ import annotations

import struct

import numpy as np

from .federation import LabeledDataset
from .tensor import Tensor

MAGIC = b"FMTR"
FORMAT_VERSION = 1

# pattern painters draw into a square foreground block, values in {0, amp}
_AMPLITUDE = 1.8


def _pattern(kind: int, side: int) -> np.ndarray:
    """One of 8 binary shape templates on a side x side block."""
    p = np.zeros((side, side))
    mid = side // 2
    band = max(1, side // 4)
    if kind == 0:                                   # horizontal bar
        p[mid - band // 2: mid + (band + 1) // 2, :] = 1.0
    elif kind == 1:                                 # vertical bar
        p[:, mid - band // 2: mid + (band + 1) // 2] = 1.0
    elif kind == 2:                                 # main diagonal
        for i in range(side):
            p[i, max(0, i - band // 2): min(side, i + (band + 1) // 2)] = 1.0
    elif kind == 3:                                 # anti-diagonal
        for i in range(side):
            j = side - 1 - i
            p[i, max(0, j - band // 2): min(side, j + (band + 1) // 2)] = 1.0
    elif kind == 4:                                 # four corners
        c = max(1, side // 3)
        p[:c, :c] = p[:c, -c:] = p[-c:, :c] = p[-c:, -c:] = 1.0
    elif kind == 5:                                 # cross
        p[mid - band // 2: mid + (band + 1) // 2, :] = 1.0
        p[:, mid - band // 2: mid + (band + 1) // 2] = 1.0
    elif kind == 6:                                 # ring
        p[:band, :] = p[-band:, :] = 1.0
        p[:, :band] = p[:, -band:] = 1.0
    elif kind == 7:                                 # solid center square
        q = side // 4
        p[q:-q or None, q:-q or None] = 1.0
    else:
        raise ValueError(f"no shape template for class {kind}")
    return p * _AMPLITUDE


NUM_TEMPLATES = 8


def generate_toyshapes(num_classes: int, n_per_class: int, image_size: int = 16,
                       noise_std: float = 0.3, seed: int = 0,
                       patch_size: int = 4, channels: int = 1
                       ) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic labeled shape images with an 80/20 train/test split.

    The class pattern fills a centered block of 2x2 patches; everything
    outside the block is N(0, noise_std^2) noise (exactly zero when
    noise_std is 0). Returns (train, test), stratified per class.
    """
    if num_classes > NUM_TEMPLATES:
        raise ValueError(
            f"only {NUM_TEMPLATES} shape templates, requested {num_classes} classes")
    rng = np.random.default_rng(seed)
    side = 2 * patch_size
    start = (image_size - side) // 2
    # align the block to the patch grid so foreground patches are clean
    start -= start % patch_size

    train_imgs, train_labels, test_imgs, test_labels = [], [], [], []
    n_test = max(1, n_per_class // 5)
    for cls in range(num_classes):
        pattern = _pattern(cls, side)
        for i in range(n_per_class):
            img = rng.normal(0.0, noise_std, (image_size, image_size, channels)) \
                if noise_std > 0 else np.zeros((image_size, image_size, channels))
            img[start:start + side, start:start + side, :] = pattern[:, :, None]
            if i < n_test:
                test_imgs.append(Tensor(img))
                test_labels.append(cls)
            else:
                train_imgs.append(Tensor(img))
                train_labels.append(cls)
    train = LabeledDataset(train_imgs, train_labels, num_classes, split="train")
    test = LabeledDataset(test_imgs, test_labels, num_classes, split="test")
    return train, test


def foreground_patches(image_size: int = 16, patch_size: int = 4) -> np.ndarray:
    """Boolean per-patch map of the block the generator draws patterns into."""
    grid = image_size // patch_size
    side = 2 * patch_size
    start = (image_size - side) // 2
    start -= start % patch_size
    g0 = start // patch_size
    fg = np.zeros((grid, grid), dtype=bool)
    fg[g0:g0 + 2, g0:g0 + 2] = True
    return fg.reshape(-1)


# -- binary dataset files -------------------------------------------------------


class DatasetFormatError(ValueError):
    """Malformed header (bad magic, version, or counts)."""


class DatasetTruncatedError(ValueError):
    """File ends before the declared payload."""


class DatasetLabelError(ValueError):
    """A record's label is outside [0, K)."""


def save_dataset(dataset: LabeledDataset, path):
    """Magic 'FMTR', u32 version/count/K/H/W/C, then u32 label + f64 pixels."""
    first = dataset.images[0].data if dataset.images else np.zeros((0, 0, 0))
    h, w, c = first.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", FORMAT_VERSION, len(dataset),
                             dataset.num_classes, h, w))
        fh.write(struct.pack("<I", c))
        for img, label in zip(dataset.images, dataset.labels):
            fh.write(struct.pack("<I", label))
            fh.write(np.ascontiguousarray(img.data, dtype="<f8").tobytes())


def load_dataset(path, split: str = "train") -> LabeledDataset:
    """Parse a dataset file, validating header, payload length, and labels."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic, not a dataset file")
    if len(buf) < 28:
        raise DatasetFormatError(f"{path}: header truncated")
    version, count, k, h, w, c = struct.unpack_from("<6I", buf, 4)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    if k == 0 or h == 0 or w == 0 or c == 0:
        raise DatasetFormatError(f"{path}: degenerate dimensions {k}/{h}/{w}/{c}")
    record = 4 + 8 * h * w * c
    need = 28 + count * record
    if len(buf) < need:
        raise DatasetTruncatedError(
            f"{path}: expected {need} bytes for {count} records, got {len(buf)}")
    images, labels = [], []
    off = 28
    for _ in range(count):
        (label,) = struct.unpack_from("<I", buf, off)
        off += 4
        if label >= k:
            raise DatasetLabelError(f"{path}: label {label} out of range [0, {k})")
        pix = np.frombuffer(buf, dtype="<f8", count=h * w * c, offset=off)
        off += 8 * h * w * c
        images.append(Tensor(pix.reshape(h, w, c).astype(np.float64)))
        labels.append(int(label))
    return LabeledDataset(images, labels, k, split=split)
