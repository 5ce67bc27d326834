"""Dense activation tensors, labeled activation sets, and bit-exact file I/O.

Activation dumps are stored row-major as [N, C, W, H] float32 so that slicing
one channel out of a layer dump is a cheap strided view. All on-disk formats
are little-endian and versioned; loaders reject anything they cannot prove
well-formed (bad magic, wrong version, truncation, non-finite values) instead
of propagating garbage into the scoring code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

TENSOR_MAGIC = b"PTSR"
LABEL_MAGIC = b"PLBL"
FORMAT_VERSION = 1
DTYPE_F32 = 1


class FormatError(ValueError):
    """A tensor or label file is malformed."""


def _expect(f, nbytes, what):
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise FormatError(f"truncated payload: expected {nbytes} bytes for {what}, got {len(buf)}")
    return buf


def save_tensor(path, array) -> None:
    """Write `array` as a float32 tensor file. Refuses non-finite values."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.isfinite(arr).all():
        raise FormatError("non-finite value in tensor data")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", TENSOR_MAGIC, FORMAT_VERSION, DTYPE_F32, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    """Read a tensor file back into a C-contiguous float32 array.

    Round-trips bit-exactly with save_tensor. Raises FormatError with a
    distinct message for each failure class (magic, version, dtype,
    truncation, non-finite payload).
    """
    with open(path, "rb") as f:
        magic, version, dtype, ndim = struct.unpack("<4sIII", _expect(f, 16, "header"))
        if magic != TENSOR_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        if dtype != DTYPE_F32:
            raise FormatError(f"unsupported dtype code {dtype}")
        if ndim == 0 or ndim > 8:
            raise FormatError(f"implausible ndim {ndim}")
        dims = struct.unpack(f"<{ndim}Q", _expect(f, 8 * ndim, "dims"))
        if any(d == 0 for d in dims):
            raise FormatError(f"zero-sized dimension in {dims}")
        count = int(np.prod(dims, dtype=np.int64))
        payload = _expect(f, 4 * count, "tensor payload")
        if f.read(1):
            raise FormatError("trailing bytes after tensor payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if not np.isfinite(arr).all():
        raise FormatError("non-finite value in tensor data")
    return np.ascontiguousarray(arr)


def save_labels(path, labels) -> None:
    """Write class labels as a u32 label file."""
    lab = np.asarray(labels)
    if lab.ndim != 1:
        raise FormatError("labels must be one-dimensional")
    if lab.size and (lab.min() < 0 or lab.max() > 0xFFFFFFFF):
        raise FormatError("label out of u32 range")
    lab = lab.astype("<u4")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIQ", LABEL_MAGIC, FORMAT_VERSION, lab.size))
        f.write(lab.tobytes(order="C"))


def load_labels(path) -> np.ndarray:
    """Read a label file, returning int64 class indices."""
    with open(path, "rb") as f:
        magic, version, count = struct.unpack("<4sIQ", _expect(f, 16, "label header"))
        if magic != LABEL_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {LABEL_MAGIC!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        payload = _expect(f, 4 * count, "label payload")
        if f.read(1):
            raise FormatError("trailing bytes after label payload")
    return np.frombuffer(payload, dtype="<u4").astype(np.int64)


@dataclass(frozen=True)
class ActivationSet:
    """Per-channel feature maps with class labels.

    maps: [N, W, H] float32 activations of one channel (W = H = 1 for dense
    units), labels: N class indices in [0, num_classes). Immutable after
    construction; every scoring metric consumes this.
    """

    maps: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.maps.ndim != 3:
            raise ValueError(f"maps must be [N, W, H], got ndim={self.maps.ndim}")
        n = self.maps.shape[0]
        if n < 2:
            raise ValueError(f"need at least 2 samples, got {n}")
        if self.labels.shape != (n,):
            raise ValueError(f"labels shape {self.labels.shape} does not match {n} maps")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label outside [0, num_classes)")

    @property
    def num_samples(self) -> int:
        return self.maps.shape[0]

    def class_members(self, c: int) -> np.ndarray:
        """Maps of samples labeled `c`."""
        return self.maps[self.labels == c]


def slice_channel(activations_4d, channel, labels, num_classes) -> ActivationSet:
    """Extract one channel of a [N, C, W, H] layer dump as an ActivationSet."""
    arr = np.asarray(activations_4d)
    if arr.ndim != 4:
        raise ValueError(f"expected [N, C, W, H] activations, got ndim={arr.ndim}")
    n, c_layer = arr.shape[0], arr.shape[1]
    if not 0 <= channel < c_layer:
        raise ValueError(f"channel {channel} out of range for {c_layer}-channel layer")
    lab = np.asarray(labels)
    if lab.shape != (n,):
        raise ValueError(f"label count {lab.shape} does not match {n} samples")
    return ActivationSet(np.ascontiguousarray(arr[:, channel]), lab, num_classes)
