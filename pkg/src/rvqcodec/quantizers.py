"""Vector quantizers: nearest-neighbor codebooks and residual stages.

A residual quantizer applies its stage codebooks to a running residual and
reconstructs as the sum of the selected codewords.  Index 0 of every stage
holds the zero vector, so emitting index 0 is a no-op: using more stages can
never increase the reconstruction error of any input vector, which makes
distortion monotone in the stage count.

Distances are computed in float64 with a fixed summation order
(``scipy.spatial.distance.cdist`` with explicit per-coordinate
accumulation), so assignments are reproducible across runs and platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .grids import rng_for

__all__ = [
    "Codebook",
    "ResidualVQ",
    "IndexStack",
    "QuantizerSet",
    "nn_quantize",
    "dequantize",
    "rvq_quantize",
    "train_codebook",
    "train_rvq",
    "codebook_report",
    "write_codebook_file",
    "read_codebook_file",
]

_CODEBOOK_MAGIC = b"EFCB"
_CODEBOOK_VERSION = 1

# A codeword whose EMA usage count falls below ``_DEAD_FRACTION * n / K``
# is considered dead and reseeded onto a random training vector.
_DEAD_FRACTION = 1e-3
_EMA_DECAY = 0.99

# cdist chunk: bounds the (chunk x K) distance buffer to a few MB.
_CHUNK = 8192


@dataclass(frozen=True)
class Codebook:
    """K codewords of dimension C, row-major float64."""

    codewords: np.ndarray

    def __post_init__(self):
        cw = np.ascontiguousarray(np.asarray(self.codewords, dtype=np.float64))
        if cw.ndim != 2 or cw.shape[0] < 1 or cw.shape[1] < 1:
            raise ValueError(f"codewords must be (K, C) with K,C >= 1, got {cw.shape}")
        if not np.all(np.isfinite(cw)):
            raise ValueError("codewords must be finite")
        object.__setattr__(self, "codewords", cw)

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]


@dataclass(frozen=True)
class ResidualVQ:
    """Ordered stage codebooks over a common vector dimension."""

    stage_codebooks: tuple[Codebook, ...]

    def __post_init__(self):
        if not self.stage_codebooks:
            raise ValueError("at least one stage required")
        dims = {cb.dim for cb in self.stage_codebooks}
        if len(dims) != 1:
            raise ValueError(f"stage dimensions differ: {sorted(dims)}")

    @property
    def stages(self) -> int:
        return len(self.stage_codebooks)

    @property
    def dim(self) -> int:
        return self.stage_codebooks[0].dim

    @property
    def stage_sizes(self) -> tuple[int, ...]:
        return tuple(cb.size for cb in self.stage_codebooks)


@dataclass(frozen=True)
class IndexStack:
    """Per-stage index arrays for one quantized vector batch."""

    indices: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.indices:
            raise ValueError("index stack must have at least one stage")
        arrays = []
        n = None
        for a in self.indices:
            a = np.ascontiguousarray(np.asarray(a, dtype=np.int64))
            if a.ndim != 1:
                raise ValueError("stage indices must be 1-D")
            if n is None:
                n = a.shape[0]
            elif a.shape[0] != n:
                raise ValueError("stage index arrays must share one length")
            if a.size and a.min() < 0:
                raise ValueError("indices must be non-negative")
            arrays.append(a)
        object.__setattr__(self, "indices", tuple(arrays))

    @property
    def stages(self) -> int:
        return len(self.indices)

    @property
    def count(self) -> int:
        return self.indices[0].shape[0]


@dataclass(frozen=True)
class QuantizerSet:
    """The four per-group residual quantizers plus the optional hyper one."""

    groups: tuple[ResidualVQ, ResidualVQ, ResidualVQ, ResidualVQ]
    hyper: ResidualVQ | None = None

    def __post_init__(self):
        if len(self.groups) != 4:
            raise ValueError("exactly four group quantizers expected")
        stages = {q.stages for q in self.groups}
        if self.hyper is not None:
            stages.add(self.hyper.stages)
        if len(stages) != 1:
            raise ValueError(f"all quantizers must share a stage count, got {sorted(stages)}")

    @property
    def stages(self) -> int:
        return self.groups[0].stages


def _sq_distances(vectors: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    return cdist(vectors, codewords, metric="sqeuclidean")


def nn_quantize(codebook: Codebook, vectors: np.ndarray) -> np.ndarray:
    """Exact nearest codeword per vector; ties break to the lowest index."""
    v = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64))
    if v.ndim != 2 or v.shape[1] != codebook.dim:
        raise ValueError(f"vectors must be (n, {codebook.dim}), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vectors must be finite")
    out = np.empty(v.shape[0], dtype=np.int64)
    for lo in range(0, v.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, v.shape[0])
        out[lo:hi] = np.argmin(_sq_distances(v[lo:hi], codebook.codewords), axis=1)
    return out


def dequantize(codebook: Codebook, indices: np.ndarray) -> np.ndarray:
    """Map indices back to codewords; out-of-range indices are an error."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= codebook.size):
        raise ValueError(
            f"index out of range for codebook of size {codebook.size}: "
            f"[{idx.min()}, {idx.max()}]"
        )
    return codebook.codewords[idx]


def rvq_quantize(rvq: ResidualVQ, vectors: np.ndarray, m: int) -> tuple[IndexStack, np.ndarray]:
    """Apply the first ``m`` stages to a vector batch.

    Returns the per-stage indices and the reconstruction (sum of selected
    codewords).  ``m`` selects the operating rate; it must not exceed the
    trained stage count.
    """
    if not 1 <= m <= rvq.stages:
        raise ValueError(f"m must be in [1, {rvq.stages}], got {m}")
    v = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64))
    residual = v.copy()
    recon = np.zeros_like(v)
    stage_indices = []
    for cb in rvq.stage_codebooks[:m]:
        idx = nn_quantize(cb, residual)
        chosen = cb.codewords[idx]
        recon += chosen
        residual -= chosen
        stage_indices.append(idx)
    return IndexStack(indices=tuple(stage_indices)), recon


def _kmeanspp_seed(vectors: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ initialization: spread starts by squared-distance sampling."""
    n = vectors.shape[0]
    centers = np.empty((k, vectors.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = vectors[first]
    d2 = _sq_distances(vectors, centers[:1])[:, 0]
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # All remaining mass sits on existing centers; duplicate uniformly.
            pick = int(rng.integers(n))
        else:
            r = rng.random() * total
            pick = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            pick = min(pick, n - 1)
        centers[i] = vectors[pick]
        d2 = np.minimum(d2, _sq_distances(vectors, centers[i : i + 1])[:, 0])
    return centers


def train_codebook(
    samples: np.ndarray,
    k: int,
    iterations: int = 25,
    seed: int = 0,
    ema_decay: float = _EMA_DECAY,
    pin_zero: bool = False,
) -> tuple[Codebook, dict]:
    """Fit K codewords by Lloyd iteration with EMA codeword updates.

    Codewords move along the segment from their previous position towards
    the current cluster mean (an EMA over assigned mass), so the training
    MSE measured at each assignment never increases.  Dead codewords, ones
    with EMA usage below ``1e-3 * n / K`` and no vectors assigned in the
    current iteration, are reseeded onto random training vectors; requiring
    zero current usage keeps the reseed from detaching live vectors, which
    preserves the monotone-MSE property.

    With ``pin_zero`` index 0 is the zero vector and never moves; the K-1
    free codewords train against it, competing for the mass it does not
    claim.  Residual stages use this so the reserved index is a real Lloyd
    partner (training K-1 codewords alone and prepending zero afterwards
    wastes index 0 whenever the free codewords already cover the origin).

    Returns the codebook and a report with the per-iteration MSE trace.
    """
    x = np.ascontiguousarray(np.asarray(samples, dtype=np.float64))
    if x.ndim != 2:
        raise ValueError(f"samples must be (n, C), got {x.shape}")
    n, c = x.shape
    if k < 1 or n < k:
        raise ValueError(f"need at least K={k} samples, got {n}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = rng_for(seed, stream=1)

    if pin_zero:
        centers = np.zeros((k, c), dtype=np.float64)
        if k > 1:
            centers[1:] = _kmeanspp_seed(x, k - 1, rng)
    else:
        centers = _kmeanspp_seed(x, k, rng)
    init_codebook = Codebook(codewords=centers.copy())
    ema_counts = None
    ema_sums = None
    dead_threshold = _DEAD_FRACTION * (n / k)
    mse_trace = []

    for _ in range(iterations):
        labels = np.empty(n, dtype=np.int64)
        sse = 0.0
        for lo in range(0, n, _CHUNK):
            hi = min(lo + _CHUNK, n)
            d = _sq_distances(x[lo:hi], centers)
            lab = np.argmin(d, axis=1)
            labels[lo:hi] = lab
            sse += d[np.arange(hi - lo), lab].sum()
        mse_trace.append(sse / (n * c))

        counts = np.bincount(labels, minlength=k).astype(np.float64)
        sums = np.zeros((k, c), dtype=np.float64)
        np.add.at(sums, labels, x)

        if ema_counts is None:
            ema_counts = counts.copy()
            ema_sums = sums.copy()
        else:
            ema_counts = ema_decay * ema_counts + (1.0 - ema_decay) * counts
            ema_sums = ema_decay * ema_sums + (1.0 - ema_decay) * sums

        live = ema_counts > 0.0
        if pin_zero:
            live[0] = False
        centers = np.where(
            live[:, None], ema_sums / np.maximum(ema_counts, 1e-300)[:, None], centers
        )

        dead = (ema_counts < dead_threshold) & (counts == 0)
        if pin_zero:
            dead[0] = False
        if dead.any():
            replacements = rng.integers(n, size=int(dead.sum()))
            centers[dead] = x[replacements]
            ema_counts[dead] = counts.mean()
            ema_sums[dead] = centers[dead] * counts.mean()

    # Final assignment pass so the reported MSE matches the returned centers.
    final_sse = 0.0
    final_labels = np.empty(n, dtype=np.int64)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        d = _sq_distances(x[lo:hi], centers)
        lab = np.argmin(d, axis=1)
        final_labels[lo:hi] = lab
        final_sse += d[np.arange(hi - lo), lab].sum()
    mse_trace.append(final_sse / (n * c))

    report = {
        "mse_trace": mse_trace,
        "final_mse": mse_trace[-1],
        "ema_counts": ema_counts,
        "init_codebook": init_codebook,
    }
    return Codebook(codewords=centers), report


def train_rvq(
    samples: np.ndarray,
    stage_sizes: tuple[int, ...] | list[int],
    iterations: int = 25,
    seed: int = 0,
) -> ResidualVQ:
    """Train residual stages on successive residuals.

    Every stage reserves index 0 for the zero vector (pinned during Lloyd
    training, see train_codebook): a stage can always opt out of changing
    the reconstruction, which makes held-out MSE non-increasing in the
    decoded stage count.  ``K_t = 1`` degenerates to the zero codeword
    alone, a stage that transmits nothing, so per-group rate allocations
    can assign zero bits to a group.

    Stages train with exact-mean Lloyd updates (ema_decay=0): with
    full-batch passes the streaming-style EMA smoothing only slows
    convergence, and small stages need the exact fixed point.
    """
    x = np.ascontiguousarray(np.asarray(samples, dtype=np.float64))
    if x.ndim != 2:
        raise ValueError(f"samples must be (n, C), got {x.shape}")
    if not stage_sizes:
        raise ValueError("at least one stage size required")
    residual = x.copy()
    books = []
    for t, k in enumerate(stage_sizes):
        if k < 1:
            raise ValueError("stage sizes must be >= 1")
        if k == 1:
            cb = Codebook(np.zeros((1, x.shape[1])))
        else:
            cb, _ = train_codebook(
                residual, int(k), iterations=iterations, seed=seed + t,
                ema_decay=0.0, pin_zero=True,
            )
        idx = nn_quantize(cb, residual)
        residual = residual - cb.codewords[idx]
        books.append(cb)
    return ResidualVQ(stage_codebooks=tuple(books))


def codebook_report(codebook: Codebook, samples: np.ndarray) -> dict:
    """Usage statistics of a codebook on a sample batch.

    Under hard nearest-neighbor assignment the commitment error (distance of
    inputs to their selected codeword) and the quantization error coincide;
    both are reported for symmetry with soft-assignment training schemes.
    """
    x = np.ascontiguousarray(np.asarray(samples, dtype=np.float64))
    idx = nn_quantize(codebook, x)
    diff = x - codebook.codewords[idx]
    mse = float(np.mean(diff * diff))
    counts = np.bincount(idx, minlength=codebook.size).astype(np.float64)
    probs = counts / counts.sum()
    nz = probs[probs > 0.0]
    entropy = float(-(nz * np.log2(nz)).sum())
    return {
        "quantization_mse": mse,
        "commitment_mse": mse,
        "utilization": float((counts > 0).mean()),
        "index_entropy_bits": entropy,
        "histogram": counts,
    }


def write_codebook_file(path, rvq: ResidualVQ) -> None:
    """Serialize stages: magic, version, stage count, then (K, C, float32 data)."""
    with open(path, "wb") as f:
        f.write(_CODEBOOK_MAGIC)
        f.write(struct.pack("<BI", _CODEBOOK_VERSION, rvq.stages))
        for cb in rvq.stage_codebooks:
            f.write(struct.pack("<II", cb.size, cb.dim))
            f.write(cb.codewords.astype("<f4").tobytes(order="C"))


def read_codebook_file(path) -> ResidualVQ:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 9 or raw[:4] != _CODEBOOK_MAGIC:
        raise ValueError(f"{path}: not a codebook file (bad magic)")
    version, stages = struct.unpack("<BI", raw[4:9])
    if version != _CODEBOOK_VERSION:
        raise ValueError(f"{path}: unsupported codebook version {version}")
    off = 9
    books = []
    for _ in range(stages):
        if off + 8 > len(raw):
            raise ValueError(f"{path}: truncated stage header")
        k, c = struct.unpack("<II", raw[off : off + 8])
        off += 8
        nbytes = 4 * k * c
        if off + nbytes > len(raw):
            raise ValueError(f"{path}: truncated stage payload")
        cw = np.frombuffer(raw[off : off + nbytes], dtype="<f4").reshape(k, c)
        off += nbytes
        books.append(Codebook(codewords=cw.astype(np.float64)))
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return ResidualVQ(stage_codebooks=tuple(books))
