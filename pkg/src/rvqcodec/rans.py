"""Asymmetric numeral system coder with per-symbol frequency tables.

The coder keeps a 32-bit state with lower bound 2**16 and renormalizes one
byte at a time.  Symbols are pushed in reverse order so the decoder pops
them first-in-first-out; the serialized stream is a little-endian 32-bit
symbol count, the 32-bit final state, then the renormalization bytes in
decoder reading order.

Tables quantize probabilities to ``2**precision`` total mass with every
in-support symbol at frequency >= 1, so any symbol in range stays codable.
The Gaussian table builder uses a pinned complementary-error-function
implementation (power series below 1.5, Laplace continued fraction above,
both at fixed iteration counts) rather than the platform libm, keeping the
integer tables reproducible across machines.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FrequencyTable",
    "RansStream",
    "RANS_LOWER_BOUND",
    "normalize_frequencies",
    "rans_encode",
    "rans_decode",
    "gaussian_cdf",
    "discretized_gaussian_table",
    "gaussian_table_batch",
]

RANS_LOWER_BOUND = 1 << 16
_MIN_PRECISION = 8
_MAX_PRECISION = 16


@dataclass(frozen=True)
class FrequencyTable:
    """Integer symbol frequencies summing exactly to ``2**precision``."""

    frequencies: np.ndarray
    precision: int

    def __post_init__(self):
        f = np.ascontiguousarray(np.asarray(self.frequencies, dtype=np.int64))
        if not _MIN_PRECISION <= self.precision <= _MAX_PRECISION:
            raise ValueError(f"precision must be in [8, 16], got {self.precision}")
        if f.ndim != 1 or f.size < 1:
            raise ValueError("frequencies must be a non-empty 1-D array")
        if f.min() < 1:
            raise ValueError("every in-support symbol needs frequency >= 1")
        total = int(f.sum())
        if total != 1 << self.precision:
            raise ValueError(
                f"frequencies sum to {total}, expected {1 << self.precision}"
            )
        object.__setattr__(self, "frequencies", f)

    @property
    def size(self) -> int:
        return self.frequencies.shape[0]

    def cumulative(self) -> np.ndarray:
        """Exclusive prefix sums: cum[s] = sum of frequencies below s."""
        cum = np.zeros(self.size + 1, dtype=np.int64)
        np.cumsum(self.frequencies, out=cum[1:])
        return cum


@dataclass(frozen=True)
class RansStream:
    """One coded symbol sequence: count, final state, renorm payload."""

    count: int
    state: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return struct.pack("<II", self.count, self.state) + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RansStream":
        if len(raw) < 8:
            raise ValueError("stream shorter than its 8-byte header")
        count, state = struct.unpack("<II", raw[:8])
        return cls(count=count, state=state, payload=raw[8:])

    @property
    def bits(self) -> int:
        """Coded size in bits: payload plus the 32-bit state."""
        return 8 * len(self.payload) + 32


def normalize_frequencies(raw, precision: int) -> np.ndarray:
    """Quantize non-negative weights onto exactly ``2**precision`` mass.

    Proportional scaling with largest-remainder rounding (remainder ties go
    to the lowest index); entries that land on zero are promoted to 1 with
    the mass taken from the largest bin.
    """
    if not _MIN_PRECISION <= precision <= _MAX_PRECISION:
        raise ValueError(f"precision must be in [8, 16], got {precision}")
    w = np.asarray(raw, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ValueError("raw weights must be a non-empty 1-D array")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("raw weights must be finite and non-negative")
    total = w.sum()
    if total <= 0.0:
        raise ValueError("raw weights must have positive total mass")
    budget = 1 << precision
    if w.size > budget:
        raise ValueError(f"{w.size} symbols cannot all get mass >= 1 of {budget}")

    target = w * (budget / total)
    freq = np.floor(target).astype(np.int64)
    remainder = int(budget - freq.sum())
    if remainder > 0:
        frac = target - freq
        order = np.lexsort((np.arange(w.size), -frac))
        freq[order[:remainder]] += 1

    zeros = freq == 0
    deficit = int(zeros.sum())
    if deficit:
        freq[zeros] = 1
        while deficit > 0:
            j = int(np.argmax(freq))
            take = min(deficit, int(freq[j]) - 1)
            if take <= 0:
                raise ValueError("cannot redistribute mass: all bins at minimum")
            freq[j] -= take
            deficit -= take
    return freq


def _coerce_tables(symbols, tables, n):
    if isinstance(tables, FrequencyTable):
        tables = [tables] * n
    if len(tables) != n:
        raise ValueError(f"need one table per symbol: {len(tables)} tables, {n} symbols")
    if n:
        precisions = {t.precision for t in tables}
        if len(precisions) != 1:
            raise ValueError(f"tables must share one precision, got {sorted(precisions)}")
    return tables


def rans_encode(symbols, tables) -> RansStream:
    """Encode ``symbols[i]`` under ``tables[i]`` (or one shared table)."""
    syms = [int(s) for s in symbols]
    n = len(syms)
    tables = _coerce_tables(syms, tables, n)
    freqs = []
    cums = []
    for s, t in zip(syms, tables):
        if not 0 <= s < t.size:
            raise ValueError(f"symbol {s} outside table of size {t.size}")
        cum = t.cumulative()
        freqs.append(int(t.frequencies[s]))
        cums.append(int(cum[s]))
    precision = tables[0].precision if n else _MAX_PRECISION
    state, payload = _encode_core(freqs, cums, precision)
    return RansStream(count=n, state=state, payload=payload)


def _encode_core(freqs: list, cums: list, precision: int) -> tuple[int, bytes]:
    """Push (freq, cum) pairs in reverse; returns final state and payload."""
    lower = RANS_LOWER_BOUND
    renorm_unit = (lower >> precision) << 8
    x = lower
    emitted = bytearray()
    for f, c in zip(reversed(freqs), reversed(cums)):
        limit = renorm_unit * f
        while x >= limit:
            emitted.append(x & 0xFF)
            x >>= 8
        x = ((x // f) << precision) + (x % f) + c
    emitted.reverse()
    return x, bytes(emitted)


def rans_decode(stream: RansStream, tables) -> list[int]:
    """Recover the symbol sequence; validates the final coder state."""
    n = stream.count
    tables = _coerce_tables(None, tables, n)
    cum_rows = [t.cumulative().tolist() for t in tables]
    freq_rows = [t.frequencies.tolist() for t in tables]
    precision = tables[0].precision if n else _MAX_PRECISION
    return _decode_core(stream, freq_rows, cum_rows, precision)


def _decode_core(stream: RansStream, freq_rows, cum_rows, precision: int) -> list[int]:
    from bisect import bisect_right

    lower = RANS_LOWER_BOUND
    mask = (1 << precision) - 1
    x = stream.state
    payload = stream.payload
    pos = 0
    end = len(payload)
    out = []
    for i in range(stream.count):
        cf = x & mask
        cum = cum_rows[i]
        s = bisect_right(cum, cf) - 1
        x = freq_rows[i][s] * (x >> precision) + cf - cum[s]
        while x < lower:
            if pos >= end:
                raise ValueError("stream exhausted before all symbols decoded")
            x = (x << 8) | payload[pos]
            pos += 1
        out.append(s)
    if x != lower:
        raise ValueError(f"final state {x} != {lower}: corrupt or mismatched stream")
    if pos != end:
        raise ValueError(f"{end - pos} unread payload bytes: mismatched stream")
    return out


# ---------------------------------------------------------------------------
# Pinned Gaussian CDF.

_ERF_SERIES_CUTOFF = 1.5
_ERF_SERIES_TERMS = 48
_ERFC_CONTFRAC_DEPTH = 64
_ERFC_ZERO_CUTOFF = 30.0
_INV_SQRT_PI = 1.0 / np.sqrt(np.pi)


def _erf_series(x: np.ndarray) -> np.ndarray:
    """erf on |x| <= 1.5 via the Maclaurin-type series with exp damping."""
    x2 = x * x
    acc = np.zeros_like(x)
    term = np.full_like(x, 2.0)
    for k in range(_ERF_SERIES_TERMS):
        acc = acc + term
        term = term * (2.0 * x2 / (2.0 * k + 3.0))
    return x * np.exp(-x2) * _INV_SQRT_PI * acc


def _erfc_contfrac(x: np.ndarray) -> np.ndarray:
    """erfc on x >= 1.5 via the Laplace continued fraction, fixed depth."""
    b = x.copy()
    for k in range(_ERFC_CONTFRAC_DEPTH, 0, -1):
        b = x + (0.5 * k) / b
    out = np.exp(-x * x) * _INV_SQRT_PI / b
    return np.where(x >= _ERFC_ZERO_CUTOFF, 0.0, out)


def _erfc(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.empty_like(x)
    small = ax < _ERF_SERIES_CUTOFF
    if small.any():
        out[small] = 1.0 - _erf_series(x[small])
    big = ~small
    if big.any():
        tail = _erfc_contfrac(ax[big])
        out[big] = np.where(x[big] > 0, tail, 2.0 - tail)
    return out


def gaussian_cdf(t) -> np.ndarray:
    """Standard normal CDF from the pinned erfc; accurate to ~1e-14."""
    t = np.asarray(t, dtype=np.float64)
    return 0.5 * _erfc(-t / np.sqrt(2.0))


def discretized_gaussian_table(
    mu_offset: float,
    sigma: float,
    delta: float,
    support_radius: int = 255,
    precision: int = 16,
) -> FrequencyTable:
    """Frequency table of a rounded Gaussian on k in [-S, S].

    Symbol ``s`` of the table corresponds to integer offset ``k = s - S``.
    The bin mass is the Gaussian CDF increment over [k-0.5, k+0.5) scaled by
    delta/sigma, with the tails beyond +-S folded into the edge bins; masses
    are normalized by largest remainder with a floor of 1 per symbol.  A
    single row of :func:`gaussian_table_batch`, so the scalar and batched
    paths produce identical tables.
    """
    freq, _ = gaussian_table_batch(
        np.asarray([mu_offset]),
        np.asarray([sigma]),
        delta,
        support_radius=support_radius,
        precision=precision,
    )
    return FrequencyTable(frequencies=freq[0], precision=precision)


def gaussian_table_batch(
    mu_offset: np.ndarray,
    sigma: np.ndarray,
    delta: float,
    support_radius: int = 255,
    precision: int = 16,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized table construction for one (mu_offset, sigma) pair per row.

    Returns ``(freqs, cums)`` with shapes (n, 2S+1) and (n, 2S+2); row ``i``
    is exactly ``discretized_gaussian_table(mu_offset[i], sigma[i], ...)``.
    Bin masses outside an active window of ``+-(8*sigma/delta + 2)`` bins
    around the mean are exact zeros by construction of the folded CDF, so
    only the window is evaluated; the normalization is identical.
    """
    mu_offset = np.asarray(mu_offset, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if mu_offset.shape != sigma.shape:
        raise ValueError("mu_offset and sigma must have matching shapes")
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise ValueError("sigma entries must be positive and finite")
    if delta <= 0.0 or not np.isfinite(delta):
        raise ValueError(f"delta must be positive and finite, got {delta}")
    if support_radius < 1:
        raise ValueError("support radius must be >= 1")
    if not _MIN_PRECISION <= precision <= _MAX_PRECISION:
        raise ValueError(f"precision must be in [8, 16], got {precision}")
    n = sigma.shape[0]
    size = 2 * support_radius + 1
    budget = 1 << precision
    if size > budget:
        raise ValueError(f"support {size} exceeds 2**precision = {budget}")

    # Active window (shared across rows): bins that can hold visible mass.
    reach = 8.0 * sigma.max() / delta + np.abs(mu_offset).max() + 2.0
    half = int(min(support_radius, np.ceil(reach)))
    width = 2 * half + 1
    # width - 1 cut points at k + 0.5 for k = -half .. half-1; the mass
    # outside the outermost cuts folds into the window's edge bins.
    edges_k = np.arange(-half, half, dtype=np.float64) + 0.5
    z = (edges_k[None, :] - mu_offset[:, None]) * (delta / sigma[:, None])
    cdf = gaussian_cdf(z)
    window = np.empty((n, width), dtype=np.float64)
    window[:, 0] = cdf[:, 0]
    window[:, 1:-1] = np.diff(cdf, axis=1)
    window[:, -1] = 1.0 - cdf[:, -1]
    np.clip(window, 0.0, None, out=window)

    masses = np.zeros((n, size), dtype=np.float64)
    lo = support_radius - half
    masses[:, lo : lo + width] = window

    totals = masses.sum(axis=1)
    target = masses * (budget / totals)[:, None]
    freq = np.floor(target).astype(np.int64)
    remainder = (budget - freq.sum(axis=1)).astype(np.int64)
    frac = target - freq
    # Largest-remainder per row, remainder ties to the lowest index.
    cols = np.broadcast_to(np.arange(size), (n, size))
    order = np.lexsort((cols, -frac), axis=1)
    take = np.arange(size)[None, :] < remainder[:, None]
    rows = np.broadcast_to(np.arange(n)[:, None], (n, size))
    np.add.at(freq, (rows[take], order[take]), 1)

    zeros = freq == 0
    deficit = zeros.sum(axis=1)
    freq[zeros] = 1
    needs = np.nonzero(deficit > 0)[0]
    for i in needs:
        d = int(deficit[i])
        row = freq[i]
        while d > 0:
            j = int(np.argmax(row))
            take_i = min(d, int(row[j]) - 1)
            if take_i <= 0:
                raise ValueError("cannot redistribute mass: all bins at minimum")
            row[j] -= take_i
            d -= take_i

    cums = np.zeros((n, size + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cums[:, 1:])
    return freq, cums
