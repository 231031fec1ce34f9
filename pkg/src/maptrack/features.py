"""Binary descriptors and keypoints.

Descriptors are packed bit vectors held in ``uint8`` arrays; a stack of
descriptors is an array of shape ``(N, nbytes)``. Bit ``i`` of a descriptor
lives in byte ``i // 8`` at position ``i % 8`` counted from the least
significant bit, which is also the on-disk order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SUPPORTED_LENGTHS = (256, 512)


class DescriptorLengthError(ValueError):
    """Descriptors from incompatible families (different bit lengths)."""


def check_length(bits: int) -> int:
    if bits not in SUPPORTED_LENGTHS:
        raise DescriptorLengthError(
            f"descriptor length {bits} not supported; expected one of {SUPPORTED_LENGTHS}")
    return bits


def nbytes_for(bits: int) -> int:
    return (bits + 7) // 8


def as_descriptor(d) -> np.ndarray:
    return np.ascontiguousarray(d, dtype=np.uint8)


def from_int(value: int, bits: int) -> np.ndarray:
    """Descriptor whose bit i equals bit i of ``value``."""
    return np.frombuffer(int(value).to_bytes(nbytes_for(bits), "little"), dtype=np.uint8).copy()


def to_int(d: np.ndarray) -> int:
    return int.from_bytes(as_descriptor(d).tobytes(), "little")


def to_bits(d: np.ndarray, bits: int | None = None) -> np.ndarray:
    """Unpack to an array of 0/1 with one entry per bit along the last axis."""
    out = np.unpackbits(as_descriptor(d), axis=-1, bitorder="little")
    return out if bits is None else out[..., :bits]


def from_bits(b: np.ndarray) -> np.ndarray:
    return np.packbits(np.asarray(b, dtype=np.uint8), axis=-1, bitorder="little")


def random_descriptors(rng: np.random.Generator, n: int, bits: int) -> np.ndarray:
    return rng.integers(0, 256, size=(n, nbytes_for(bits)), dtype=np.uint8)


def flip_bits(rng: np.random.Generator, d: np.ndarray, rate: float) -> np.ndarray:
    """Flip every bit independently with probability ``rate``."""
    d = as_descriptor(d)
    if rate <= 0.0:
        return d.copy()
    mask = rng.random(d.shape[:-1] + (d.shape[-1] * 8,)) < rate
    return d ^ from_bits(mask)


def invert(d: np.ndarray) -> np.ndarray:
    return np.bitwise_not(as_descriptor(d))


def _words(d: np.ndarray) -> np.ndarray:
    if d.shape[-1] % 8 == 0 and d.flags.c_contiguous:
        return d.view(np.uint64)
    return d


def hamming(a, b) -> np.ndarray | int:
    """Number of differing bits; broadcasts over leading axes."""
    a = as_descriptor(a)
    b = as_descriptor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DescriptorLengthError(
            f"descriptor lengths differ: {a.shape[-1] * 8} vs {b.shape[-1] * 8} bits")
    x = np.bitwise_xor(_words(a), _words(b))
    out = np.bitwise_count(x).sum(axis=-1, dtype=np.int64)
    return int(out) if np.ndim(out) == 0 else out


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs distances between stacks ``a`` (N, B) and ``b`` (M, B)."""
    a = as_descriptor(a)
    b = as_descriptor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DescriptorLengthError(
            f"descriptor lengths differ: {a.shape[-1] * 8} vs {b.shape[-1] * 8} bits")
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int64)
    wa, wb = _words(a), _words(b)
    out = np.empty((len(a), len(b)), dtype=np.int64)
    step = max(1, 2_000_000 // max(1, len(b) * wa.shape[-1]))
    for i in range(0, len(a), step):
        x = np.bitwise_xor(wa[i:i + step, None, :], wb[None, :, :])
        out[i:i + step] = np.bitwise_count(x).sum(axis=-1)
    return out


def median_descriptor(ds: Sequence[np.ndarray] | np.ndarray, bits: int | None = None) -> np.ndarray:
    """Per-bit majority vote; ties resolve to 0.

    The result minimises the summed Hamming distance to the inputs.
    """
    ds = np.asarray(ds, dtype=np.uint8)
    if ds.ndim == 1:
        ds = ds[None]
    if len(ds) == 0:
        raise ValueError("median of an empty descriptor list")
    counts = to_bits(ds).sum(axis=0, dtype=np.int64)
    maj = (2 * counts > len(ds)).astype(np.uint8)
    if bits is not None:
        maj[bits:] = 0
    return from_bits(maj)


@dataclass(frozen=True, eq=False)
class Keypoint:
    camera_index: int
    position: np.ndarray
    descriptor: np.ndarray


@dataclass
class KeypointSet:
    """All keypoints of one camera image, stored column-wise."""

    positions: np.ndarray            # (N, 2) px
    descriptors: np.ndarray          # (N, nbytes) uint8
    point_ids: np.ndarray | None = None  # simulator truth, -1 for clutter

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if len(self.positions):
            self.descriptors = as_descriptor(self.descriptors).reshape(len(self.positions), -1)
        else:
            d = np.asarray(self.descriptors, dtype=np.uint8)
            self.descriptors = d.reshape(0, d.shape[-1] if d.ndim == 2 else 0)
        if self.point_ids is not None:
            self.point_ids = np.asarray(self.point_ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.positions)

    def keypoints(self, camera_index: int) -> list[Keypoint]:
        return [Keypoint(camera_index, p, d) for p, d in zip(self.positions, self.descriptors)]
