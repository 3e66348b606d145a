"""Fixed-length serialization of index stacks, plus rate accounting.

The wire format carries a 32-bit header (14-bit height, 14-bit width, 4-bit
rate parameter q, MSB-first) followed by the indices of every quantizer in
a fixed order: hyper first, then the four groups in coding order.  Within a
quantizer, stages are written in codebook order, positions row-major, and
each index occupies exactly log2 K bits MSB-first.  A single zero-pad to a
byte boundary closes the stream, so the payload length equals the
fixed-length rate formula to within 7 bits.  No probability tables, no
entropy coder: the stream length is known before the first index is coded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .grids import HYPER_DOWNSAMPLE, LATENT_DOWNSAMPLE
from .quantizers import IndexStack, QuantizerSet

__all__ = [
    "StreamHeader",
    "PackedBitstream",
    "BppConfig",
    "pack",
    "unpack",
    "compute_bpp",
    "write_bitstream_file",
    "read_bitstream_file",
]

_BITSTREAM_MAGIC = b"EFBS"
_BITSTREAM_VERSION = 1
_HEADER_BITS = 32


@dataclass(frozen=True)
class StreamHeader:
    """32-bit stream header: height and width of the coded image in pixels
    (the latent grid times the downsampling factor) and the rate parameter
    q, which is the decoded stage count m."""

    height: int
    width: int
    q: int

    def __post_init__(self):
        if not 1 <= self.height <= 16383:
            raise ValueError(f"header height {self.height} outside [1, 16383]")
        if not 1 <= self.width <= 16383:
            raise ValueError(f"header width {self.width} outside [1, 16383]")
        if not 0 <= self.q <= 15:
            raise ValueError(f"header q {self.q} outside [0, 15]")

    def to_bytes(self) -> bytes:
        word = (self.height << 18) | (self.width << 4) | self.q
        return word.to_bytes(4, "big")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "StreamHeader":
        if len(raw) < 4:
            raise ValueError(f"header needs 4 bytes, got {len(raw)}")
        word = int.from_bytes(raw[:4], "big")
        return cls(height=(word >> 18) & 0x3FFF, width=(word >> 4) & 0x3FFF, q=word & 0xF)


@dataclass(frozen=True)
class PackedBitstream:
    header: StreamHeader
    payload: bytes

    @property
    def bits(self) -> int:
        return _HEADER_BITS + 8 * len(self.payload)


def _index_bits(k: int) -> int:
    if k < 1 or (k & (k - 1)) != 0:
        raise ValueError(f"codebook size {k} is not a power of two")
    return k.bit_length() - 1


def _fields_to_bits(indices: np.ndarray, width: int) -> np.ndarray:
    """MSB-first bit planes of a batch of fixed-width fields, flattened."""
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    return ((indices[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def _bits_to_fields(bits: np.ndarray, width: int) -> np.ndarray:
    weights = np.left_shift(np.int64(1), np.arange(width - 1, -1, -1, dtype=np.int64))
    return bits.reshape(-1, width).astype(np.int64) @ weights


def _geometry(header: StreamHeader, with_hyper: bool) -> tuple[int, int | None]:
    """Positions per group and per hyper grid implied by the header dims."""
    f = LATENT_DOWNSAMPLE
    if header.height % (2 * f) or header.width % (2 * f):
        raise ValueError(
            f"header {header.height}x{header.width} is not a multiple of {2 * f};"
            f" the latent grid must split into four phase groups"
        )
    h, w = header.height // f, header.width // f
    n_group = (h // 2) * (w // 2)
    n_hyper = None
    if with_hyper:
        fz = HYPER_DOWNSAMPLE
        if header.height % fz or header.width % fz:
            raise ValueError(
                f"header {header.height}x{header.width} is not a multiple of {fz};"
                f" hyper positions would not form a whole grid"
            )
        n_hyper = (header.height // fz) * (header.width // fz)
    return n_group, n_hyper


def pack(
    header: StreamHeader,
    hyper_stack: IndexStack | None,
    group_stacks: tuple[IndexStack, ...],
    qset: QuantizerSet,
) -> PackedBitstream:
    """Serialize index stacks in the fixed quantizer order.

    Every index costs exactly log2 K bits, so the total payload length is
    checked against the rate formula before padding: the stream IS its own
    rate bookkeeping.
    """
    m = header.q
    if m < 1:
        raise ValueError("header q must encode at least one stage")
    if len(group_stacks) != 4:
        raise ValueError(f"need exactly 4 group stacks, got {len(group_stacks)}")
    if (qset.hyper is None) != (hyper_stack is None):
        raise ValueError(
            "hyper quantizer and hyper stack must be given together or not at all"
        )
    n_group, n_hyper = _geometry(header, with_hyper=hyper_stack is not None)

    seq = []
    if hyper_stack is not None:
        seq.append((hyper_stack, qset.hyper, n_hyper))
    seq.extend((s, rvq, n_group) for s, rvq in zip(group_stacks, qset.groups))

    expected_bits = 0
    for stack, rvq, n_exp in seq:
        if stack.stages != m:
            raise ValueError(f"stack has {stack.stages} stages, header q={m}")
        if stack.count != n_exp:
            raise ValueError(
                f"stack holds {stack.count} positions, header geometry implies {n_exp}"
            )
        for idx, cb in zip(stack.indices, rvq.stage_codebooks[:m]):
            if idx.size and int(idx.max()) >= cb.size:
                raise ValueError(
                    f"index {int(idx.max())} out of range for codebook size {cb.size}"
                )
            expected_bits += stack.count * _index_bits(cb.size)

    runs = []
    for stack, rvq, _ in seq:
        for idx, cb in zip(stack.indices, rvq.stage_codebooks[:m]):
            width = _index_bits(cb.size)
            if width:
                runs.append(_fields_to_bits(idx, width))
    bits = np.concatenate(runs) if runs else np.zeros(0, dtype=np.uint8)

    if bits.size != expected_bits:
        raise AssertionError(
            f"packed {bits.size} bits, rate formula says {expected_bits}"
        )
    # np.packbits zero-fills the trailing partial byte: the terminal padding.
    return PackedBitstream(header=header, payload=np.packbits(bits).tobytes())


def unpack(
    stream: PackedBitstream, qset: QuantizerSet
) -> tuple[StreamHeader, IndexStack | None, tuple[IndexStack, ...]]:
    """Exact inverse of pack; geometry is derived from the header alone."""
    header = stream.header
    m = header.q
    with_hyper = qset.hyper is not None
    n_group, n_hyper = _geometry(header, with_hyper)
    if m < 1 or m > qset.stages:
        raise ValueError(f"header q={m} outside [1, {qset.stages}]")

    quantizers = ([qset.hyper] if with_hyper else []) + list(qset.groups)
    counts = ([n_hyper] if with_hyper else []) + [n_group] * 4
    need_bits = sum(
        n * _index_bits(cb.size)
        for n, rvq in zip(counts, quantizers)
        for cb in rvq.stage_codebooks[:m]
    )
    have_bits = 8 * len(stream.payload)
    if have_bits < need_bits:
        raise ValueError(
            f"payload holds {have_bits} bits, geometry requires {need_bits}"
            f" ({need_bits - have_bits} missing)"
        )

    bits = np.unpackbits(np.frombuffer(stream.payload, dtype=np.uint8))
    cursor = 0
    stacks = []
    for n, rvq in zip(counts, quantizers):
        stage_rows = []
        for cb in rvq.stage_codebooks[:m]:
            width = _index_bits(cb.size)
            if width == 0:
                stage_rows.append(np.zeros(n, dtype=np.int64))
                continue
            stage_rows.append(_bits_to_fields(bits[cursor : cursor + n * width], width))
            cursor += n * width
        stacks.append(IndexStack(indices=tuple(stage_rows)))

    hyper_stack = stacks[0] if with_hyper else None
    group_stacks = tuple(stacks[1:]) if with_hyper else tuple(stacks)
    return header, hyper_stack, group_stacks


@dataclass(frozen=True)
class BppConfig:
    """Constants of the rate formula: per-group codebook sizes, the hyper
    codebook size (None when the hyperprior is off), and the downsampling
    factors between image, latent, and hyper grids."""

    group_sizes: tuple[int, ...]
    hyper_size: int | None = None
    f_y: int = LATENT_DOWNSAMPLE
    f_z: int = HYPER_DOWNSAMPLE

    def __post_init__(self):
        if len(self.group_sizes) != 4:
            raise ValueError(
                f"need one size per quadtree group (4), got {len(self.group_sizes)}"
            )
        for k in self.group_sizes:
            _index_bits(int(k))
        if self.hyper_size is not None:
            _index_bits(int(self.hyper_size))
        if self.f_y < 1 or self.f_z < 1:
            raise ValueError("downsampling factors must be positive")


def compute_bpp(config: BppConfig, m: int) -> float:
    """Bits per pixel of the fixed-length stream at stage count m.

    Per conditioning pixel the hyper grid costs log2(K_z)/f_z^2 and the
    groups average their per-index cost over the latent grid, all scaled
    by m; with the hyperprior disabled the hyper term is dropped.
    """
    if m < 0:
        raise ValueError("m must be non-negative")
    group_term = sum(_index_bits(int(k)) for k in config.group_sizes) / 4.0
    hyper_term = 0.0
    if config.hyper_size is not None:
        hyper_term = (config.f_y**2 / config.f_z**2) * _index_bits(int(config.hyper_size))
    return (m / config.f_y**2) * (hyper_term + group_term)


def write_bitstream_file(path, stream: PackedBitstream) -> None:
    with open(path, "wb") as f:
        f.write(_BITSTREAM_MAGIC)
        f.write(struct.pack("<B", _BITSTREAM_VERSION))
        f.write(stream.header.to_bytes())
        f.write(stream.payload)


def read_bitstream_file(path) -> PackedBitstream:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 9 or raw[:4] != _BITSTREAM_MAGIC:
        raise ValueError(f"{path}: not a bitstream file (bad magic)")
    (version,) = struct.unpack("<B", raw[4:5])
    if version != _BITSTREAM_VERSION:
        raise ValueError(f"{path}: unsupported bitstream version {version}")
    header = StreamHeader.from_bytes(raw[5:9])
    return PackedBitstream(header=header, payload=raw[9:])
