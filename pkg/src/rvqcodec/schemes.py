"""The three coding schemes: decorrelated fixed-length (RD), independent
fixed-length (IQ), and entropy-coded scalar quantization (CM).

RD codes the four phase groups sequentially.  For group i the context
``psi_i`` is the channel concatenation of the already-decoded groups at the
co-located position, the nearest-neighbor-upsampled hyper grid ``phi`` when
enabled, and a bias.  A per-group affine head predicts (mu, log sigma) per
position; the group is standardized as (y - mu)/sigma, residual-quantized,
and decoded back through the same affine map.  The decoder runs the exact
same loop on the transmitted indices, so encoder and decoder reconstructions
are bit-identical: prediction uses an explicit fixed-order accumulation
rather than BLAS, and quantizer decisions have positive margin almost
surely, which is what makes the fixed-length path robust where entropy-coded
pipelines desynchronize on last-ulp drift.  The CM path, by contrast,
inherits the usual sensitivity: its integer tables depend on libm exp/log,
which is documented rather than fought.

IQ is RD with no context at all, the ablation anchor.  CM replaces the
vector quantizer with uniform scalar rounding plus a conditional-Gaussian
range coder: same predictor interface, rate paid in actual coded bits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .grids import (
    GroupedLatent,
    HyperContext,
    LatentGrid,
    block_means,
    extract_hyper_context,
    merge_groups,
    partition_quadtree,
)
from .quantizers import (
    IndexStack,
    QuantizerSet,
    ResidualVQ,
    nn_quantize,
    rvq_quantize,
    train_codebook,
    train_rvq,
)
from .rans import RansStream, gaussian_table_batch, _decode_core, _encode_core
from .timing import PhaseTimer

__all__ = [
    "SIGMA_FLOOR",
    "CM_SUPPORT_RADIUS",
    "ContextPredictor",
    "SchemeConfig",
    "CodedLatent",
    "fit_context_predictor",
    "rd_encode",
    "rd_decode",
    "iq_encode",
    "iq_decode",
    "cm_encode",
    "cm_decode",
    "train_rd_model",
    "train_iq_model",
    "train_cm_model",
    "fixed_length_bits",
    "write_predictor_file",
    "read_predictor_file",
]

SIGMA_FLOOR = 1e-3
CM_SUPPORT_RADIUS = 255

# Predicted sigmas are snapped to a geometric grid of this many levels per
# group before table construction, so a batch needs at most this many
# distinct tables.  Both sides derive the grid from the same predicted
# sigmas, so it is decoder-reproducible.
_CM_SIGMA_LEVELS = 256

_SIGMA_BUCKETS = 16
_PREDICTOR_MAGIC = b"EFPR"
_PREDICTOR_VERSION = 1


@dataclass(frozen=True)
class ContextPredictor:
    """Per-group affine maps from flattened context to (mu, log sigma).

    ``weights[i]`` has shape (d_i, 2C): the first C output columns are mu,
    the last C are log sigma.  ``d_i`` counts the context channels: C per
    previously decoded group, plus C for phi when the hyper grid is used.
    Group 1 sees only phi (or nothing but the bias without a hyper grid).
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    channels: int
    uses_hyper: bool
    sigma_min: float = SIGMA_FLOOR

    def __post_init__(self):
        if len(self.weights) != 4 or len(self.biases) != 4:
            raise ValueError("predictor needs maps for exactly four groups")
        if self.sigma_min <= 0.0:
            raise ValueError("sigma_min must be positive")
        c = self.channels
        ws, bs = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.ascontiguousarray(np.asarray(w, dtype=np.float64))
            b = np.ascontiguousarray(np.asarray(b, dtype=np.float64))
            d_exp = c * (i + (1 if self.uses_hyper else 0))
            if w.shape != (d_exp, 2 * c):
                raise ValueError(
                    f"group {i + 1} weight shape {w.shape} != ({d_exp}, {2 * c})"
                )
            if b.shape != (2 * c,):
                raise ValueError(f"group {i + 1} bias shape {b.shape} != ({2 * c},)")
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    def predict(self, group: int, context: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(mu, sigma) per position, each (n, C); sigma is floored.

        The matrix product is an explicit loop over context dimensions so
        the summation order is fixed on every platform.
        """
        w = self.weights[group]
        b = self.biases[group]
        n = context.shape[0]
        if context.shape != (n, w.shape[0]):
            raise ValueError(f"context shape {context.shape} != (n, {w.shape[0]})")
        out = np.tile(b, (n, 1))
        for d in range(w.shape[0]):
            out += context[:, d : d + 1] * w[d : d + 1, :]
        c = self.channels
        mu = out[:, :c]
        sigma = np.maximum(np.exp(out[:, c:]), self.sigma_min)
        return mu, sigma


@dataclass(frozen=True)
class SchemeConfig:
    """Operating point of one scheme."""

    scheme: str
    quantizers: QuantizerSet | None = None
    m: int | None = None
    delta: float | None = None
    precision: int = 16
    use_hyper: bool = False

    def __post_init__(self):
        if self.scheme not in ("rd", "iq", "cm"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "cm":
            if self.delta is None or self.delta <= 0.0:
                raise ValueError("cm requires delta > 0")
        elif self.m is not None:
            if self.quantizers is not None and not 1 <= self.m <= self.quantizers.stages:
                raise ValueError(
                    f"m={self.m} outside [1, {self.quantizers.stages}]"
                )
            elif self.m < 1:
                raise ValueError("m must be >= 1")


@dataclass(frozen=True)
class CodedLatent:
    """Everything one encode produced: indices or coded bytes, plus the
    reconstruction and the measured rate in bits."""

    scheme: str
    shape: tuple[int, int, int]
    reconstruction: LatentGrid
    rate_bits: float
    m: int | None = None
    delta: float | None = None
    group_stacks: tuple[IndexStack, ...] | None = None
    group_streams: tuple[RansStream, ...] | None = None
    hyper_stack: IndexStack | None = None
    clamp_count: int = 0
    self_information_bits: float | None = None


def _group_vectors(grid: LatentGrid) -> np.ndarray:
    """(C, gh, gw) -> (n, C) with positions row-major."""
    c = grid.channels
    return grid.data.reshape(c, -1).T.copy()


def _vectors_to_grid(vectors: np.ndarray, shape: tuple[int, int, int]) -> LatentGrid:
    c, gh, gw = shape
    return LatentGrid(vectors.T.reshape(c, gh, gw))


def _upsampled_phi_vectors(phi: LatentGrid, group_shape: tuple[int, int, int]) -> np.ndarray:
    """Nearest-neighbor upsample phi to the group grid, as (n, C) vectors."""
    up = np.repeat(np.repeat(phi.data, 2, axis=1), 2, axis=2)
    if up.shape != group_shape:
        raise ValueError(f"phi shape {phi.shape} does not upsample to {group_shape}")
    return up.reshape(group_shape[0], -1).T.copy()


def _context_for(group: int, decoded: list[np.ndarray], phi_vec, n: int) -> np.ndarray:
    """Context rows for one group: decoded groups in coding order, then phi."""
    parts = decoded[:group]
    if phi_vec is not None:
        parts = parts + [phi_vec]
    if not parts:
        return np.empty((n, 0), dtype=np.float64)
    return np.concatenate(parts, axis=1)


def fixed_length_bits(
    qset: QuantizerSet, m: int, group_positions: int, hyper_positions: int | None
) -> float:
    """Fixed-length rate in bits: every index costs log2 of its stage size."""
    bits = 0.0
    for q in qset.groups:
        for cb in q.stage_codebooks[:m]:
            bits += group_positions * np.log2(cb.size)
    if hyper_positions is not None:
        if qset.hyper is None:
            raise ValueError("hyper positions given but no hyper quantizer")
        for cb in qset.hyper.stage_codebooks[:m]:
            bits += hyper_positions * np.log2(cb.size)
    return float(bits)


def _check_geometry(latent: LatentGrid, use_hyper: bool) -> None:
    mult = 4 if use_hyper else 2
    if latent.height % mult or latent.width % mult:
        raise ValueError(
            f"latent {latent.height}x{latent.width} must be a multiple of {mult}"
            f" (replicate-pad first; see grids.replicate_pad)"
        )


def _hyper_for_encode(
    latent: LatentGrid, qset: QuantizerSet | None, m: int | None, use_hyper: bool
) -> HyperContext | None:
    if not use_hyper:
        return None
    if qset is None or qset.hyper is None:
        raise ValueError("predictor uses a hyper grid but quantizer set has none")
    return extract_hyper_context(latent, qset.hyper, m=m)


def rd_encode(
    latent: LatentGrid,
    predictor: ContextPredictor,
    qset: QuantizerSet,
    m: int,
    timer: PhaseTimer | None = None,
) -> CodedLatent:
    """Sequentially standardize and residual-quantize the four groups."""
    if not 1 <= m <= qset.stages:
        raise ValueError(f"m={m} outside [1, {qset.stages}]")
    if latent.channels != predictor.channels:
        raise ValueError(
            f"latent has {latent.channels} channels, predictor {predictor.channels}"
        )
    _check_geometry(latent, predictor.uses_hyper)
    timer = timer or PhaseTimer()

    hyper = _hyper_for_encode(latent, qset, m, predictor.uses_hyper)
    grouped = partition_quadtree(latent)
    gshape = grouped.groups[0].shape
    n = gshape[1] * gshape[2]
    phi_vec = _upsampled_phi_vectors(hyper.phi, gshape) if hyper else None

    decoded: list[np.ndarray] = []
    stacks: list[IndexStack] = []
    for i, grid in enumerate(grouped.groups):
        y = _group_vectors(grid)
        with timer.phase("autoregressive"):
            psi = _context_for(i, decoded, phi_vec, n)
            mu, sigma = predictor.predict(i, psi)
        with timer.phase("quantize"):
            std = (y - mu) / sigma
            stack, rec = rvq_quantize(qset.groups[i], std, m)
        decoded.append(sigma * rec + mu)
        stacks.append(stack)

    recon = merge_groups(
        replace(grouped, groups=tuple(_vectors_to_grid(d, gshape) for d in decoded))
    )
    n_hyper = None
    if hyper is not None:
        n_hyper = (latent.height // 4) * (latent.width // 4)
    rate = fixed_length_bits(qset, m, n, n_hyper)
    return CodedLatent(
        scheme="rd",
        shape=latent.shape,
        reconstruction=recon,
        rate_bits=rate,
        m=m,
        group_stacks=tuple(stacks),
        hyper_stack=hyper.indices if hyper else None,
    )


def rd_decode(
    coded: CodedLatent,
    predictor: ContextPredictor,
    qset: QuantizerSet,
    timer: PhaseTimer | None = None,
) -> LatentGrid:
    """Rebuild the reconstruction from transmitted indices; bit-exact."""
    if coded.scheme != "rd":
        raise ValueError(f"expected an rd-coded latent, got {coded.scheme!r}")
    if coded.group_stacks is None:
        raise ValueError("coded latent carries no index stacks")
    m = coded.m
    if m is None or not 1 <= m <= qset.stages:
        raise ValueError(f"coded m={m} outside [1, {qset.stages}]")
    for s in coded.group_stacks:
        if s.stages != m:
            raise ValueError(f"stack has {s.stages} stages, coded m={m}")
    timer = timer or PhaseTimer()

    c, h, w = coded.shape
    gshape = (c, h // 2, w // 2)
    n = gshape[1] * gshape[2]

    phi_vec = None
    if predictor.uses_hyper:
        if qset.hyper is None:
            raise ValueError("predictor uses a hyper grid but quantizer set has none")
        if coded.hyper_stack is None:
            raise ValueError("coded latent carries no hyper indices")
        hvecs = _rvq_reconstruct(qset.hyper, coded.hyper_stack)
        phi = LatentGrid(hvecs.T.reshape(c, h // 4, w // 4))
        phi_vec = _upsampled_phi_vectors(phi, gshape)

    decoded: list[np.ndarray] = []
    for i, stack in enumerate(coded.group_stacks):
        if stack.count != n:
            raise ValueError(f"group {i + 1} stack has {stack.count} entries, expected {n}")
        with timer.phase("autoregressive"):
            psi = _context_for(i, decoded, phi_vec, n)
            mu, sigma = predictor.predict(i, psi)
        with timer.phase("quantize"):
            rec = _rvq_reconstruct(qset.groups[i], stack)
        decoded.append(sigma * rec + mu)

    groups = tuple(_vectors_to_grid(d, gshape) for d in decoded)
    return merge_groups(GroupedLatent(groups=groups, source_shape=(c, h, w)))


def _rvq_reconstruct(rvq: ResidualVQ, stack: IndexStack) -> np.ndarray:
    """Sum stage codewords in stage order: the encoder's exact accumulation."""
    if stack.stages > rvq.stages:
        raise ValueError(f"stack has {stack.stages} stages, quantizer {rvq.stages}")
    rec = np.zeros((stack.count, rvq.dim), dtype=np.float64)
    for cb, idx in zip(rvq.stage_codebooks, stack.indices):
        if idx.size and idx.max() >= cb.size:
            raise ValueError(f"index {int(idx.max())} out of range for K={cb.size}")
        rec += cb.codewords[idx]
    return rec


def iq_encode(
    latent: LatentGrid, qset: QuantizerSet, m: int, timer: PhaseTimer | None = None
) -> CodedLatent:
    """Quantize each group independently: no context, no hyper grid."""
    if not 1 <= m <= qset.stages:
        raise ValueError(f"m={m} outside [1, {qset.stages}]")
    _check_geometry(latent, use_hyper=False)
    timer = timer or PhaseTimer()
    grouped = partition_quadtree(latent)
    gshape = grouped.groups[0].shape
    n = gshape[1] * gshape[2]
    stacks = []
    decoded = []
    for i, grid in enumerate(grouped.groups):
        with timer.phase("quantize"):
            stack, rec = rvq_quantize(qset.groups[i], _group_vectors(grid), m)
        stacks.append(stack)
        decoded.append(rec)
    recon = merge_groups(
        replace(grouped, groups=tuple(_vectors_to_grid(d, gshape) for d in decoded))
    )
    return CodedLatent(
        scheme="iq",
        shape=latent.shape,
        reconstruction=recon,
        rate_bits=fixed_length_bits(qset, m, n, None),
        m=m,
        group_stacks=tuple(stacks),
    )


def iq_decode(coded: CodedLatent, qset: QuantizerSet, timer: PhaseTimer | None = None) -> LatentGrid:
    if coded.scheme != "iq":
        raise ValueError(f"expected an iq-coded latent, got {coded.scheme!r}")
    if coded.group_stacks is None:
        raise ValueError("coded latent carries no index stacks")
    timer = timer or PhaseTimer()
    c, h, w = coded.shape
    gshape = (c, h // 2, w // 2)
    decoded = []
    for i, stack in enumerate(coded.group_stacks):
        with timer.phase("quantize"):
            decoded.append(_rvq_reconstruct(qset.groups[i], stack))
    groups = tuple(_vectors_to_grid(d, gshape) for d in decoded)
    return merge_groups(GroupedLatent(groups=groups, source_shape=(c, h, w)))


# ---------------------------------------------------------------------------
# CM: uniform scalar quantization + conditional-Gaussian range coding.


def _sigma_grid(sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Snap sigmas to a geometric grid; returns (levels, level index per entry).

    A pure function of the predicted sigma field, so encoder and decoder
    derive identical tables.
    """
    lo = float(sigma.min())
    hi = float(sigma.max())
    if hi <= lo * (1.0 + 1e-12):
        return np.asarray([lo]), np.zeros(sigma.size, dtype=np.int64)
    levels = np.geomspace(lo, hi, _CM_SIGMA_LEVELS)
    step = np.log(hi / lo) / (_CM_SIGMA_LEVELS - 1)
    idx = np.rint(np.log(sigma.ravel() / lo) / step).astype(np.int64)
    np.clip(idx, 0, _CM_SIGMA_LEVELS - 1, out=idx)
    return levels, idx


def _cm_group_tables(sigma: np.ndarray, delta: float, precision: int):
    levels, level_idx = _sigma_grid(sigma)
    freq, cum = gaussian_table_batch(
        np.zeros_like(levels), levels, delta,
        support_radius=CM_SUPPORT_RADIUS, precision=precision,
    )
    return freq, cum, level_idx


def cm_encode(
    latent: LatentGrid,
    predictor: ContextPredictor,
    config: SchemeConfig,
    timer: PhaseTimer | None = None,
) -> CodedLatent:
    """Round (y - mu)/delta per element and range-code it conditionally.

    Symbols falling outside [-255, 255] are clamped before coding and
    counted; the reconstruction uses the clamped symbol on both sides.
    """
    if config.scheme != "cm":
        raise ValueError("config.scheme must be 'cm'")
    delta = float(config.delta)
    precision = config.precision
    if latent.channels != predictor.channels:
        raise ValueError(
            f"latent has {latent.channels} channels, predictor {predictor.channels}"
        )
    _check_geometry(latent, predictor.uses_hyper)
    timer = timer or PhaseTimer()
    s_radius = CM_SUPPORT_RADIUS

    hyper = None
    hyper_bits = 0.0
    if predictor.uses_hyper:
        qset = config.quantizers
        m_h = config.m if config.m is not None else (qset.hyper.stages if qset and qset.hyper else None)
        hyper = _hyper_for_encode(latent, qset, m_h, True)
        n_hyper = (latent.height // 4) * (latent.width // 4)
        for cb in qset.hyper.stage_codebooks[:m_h]:
            hyper_bits += n_hyper * np.log2(cb.size)

    grouped = partition_quadtree(latent)
    gshape = grouped.groups[0].shape
    n = gshape[1] * gshape[2]
    phi_vec = _upsampled_phi_vectors(hyper.phi, gshape) if hyper else None

    decoded: list[np.ndarray] = []
    streams: list[RansStream] = []
    clamps = 0
    self_info = 0.0
    for i, grid in enumerate(grouped.groups):
        y = _group_vectors(grid)
        with timer.phase("autoregressive"):
            psi = _context_for(i, decoded, phi_vec, n)
            mu, sigma = predictor.predict(i, psi)
        with timer.phase("quantize"):
            k = np.rint((y - mu) / delta)
            clamps += int(np.count_nonzero(np.abs(k) > s_radius))
            np.clip(k, -s_radius, s_radius, out=k)
            k = k.astype(np.int64)
            decoded.append(mu + delta * k)
        with timer.phase("entropy_code"):
            freq, cum, level_idx = _cm_group_tables(sigma, delta, precision)
            syms = (k.ravel() + s_radius).astype(np.int64)
            f_sel = freq[level_idx, syms]
            c_sel = cum[level_idx, syms]
            state, payload = _encode_core(f_sel.tolist(), c_sel.tolist(), precision)
            streams.append(RansStream(count=syms.size, state=state, payload=payload))
            self_info += float((precision - np.log2(f_sel)).sum())

    recon = merge_groups(
        replace(grouped, groups=tuple(_vectors_to_grid(d, gshape) for d in decoded))
    )
    rate = float(sum(s.bits for s in streams)) + hyper_bits
    return CodedLatent(
        scheme="cm",
        shape=latent.shape,
        reconstruction=recon,
        rate_bits=rate,
        delta=delta,
        group_streams=tuple(streams),
        hyper_stack=hyper.indices if hyper else None,
        clamp_count=clamps,
        self_information_bits=self_info,
    )


def cm_decode(
    coded: CodedLatent,
    predictor: ContextPredictor,
    config: SchemeConfig,
    timer: PhaseTimer | None = None,
) -> LatentGrid:
    """Rebuild tables from decoded context and range-decode each group."""
    if coded.scheme != "cm" or config.scheme != "cm":
        raise ValueError("cm_decode needs a cm-coded latent and a cm config")
    if coded.group_streams is None:
        raise ValueError("coded latent carries no byte streams")
    delta = float(config.delta)
    if coded.delta is not None and coded.delta != delta:
        raise ValueError(f"coded delta {coded.delta} != config delta {delta}")
    precision = config.precision
    timer = timer or PhaseTimer()
    s_radius = CM_SUPPORT_RADIUS

    c, h, w = coded.shape
    gshape = (c, h // 2, w // 2)
    n = gshape[1] * gshape[2]

    phi_vec = None
    if predictor.uses_hyper:
        qset = config.quantizers
        if qset is None or qset.hyper is None:
            raise ValueError("predictor uses a hyper grid but quantizer set has none")
        if coded.hyper_stack is None:
            raise ValueError("coded latent carries no hyper indices")
        hvecs = _rvq_reconstruct(qset.hyper, coded.hyper_stack)
        phi = LatentGrid(hvecs.T.reshape(c, h // 4, w // 4))
        phi_vec = _upsampled_phi_vectors(phi, gshape)

    decoded: list[np.ndarray] = []
    for i, stream in enumerate(coded.group_streams):
        with timer.phase("autoregressive"):
            psi = _context_for(i, decoded, phi_vec, n)
            mu, sigma = predictor.predict(i, psi)
        with timer.phase("entropy_code"):
            if stream.count != n * c:
                raise ValueError(
                    f"group {i + 1} stream holds {stream.count} symbols, expected {n * c}"
                )
            freq, cum, level_idx = _cm_group_tables(sigma, delta, precision)
            freq_rows = freq.tolist()
            cum_rows = cum.tolist()
            lv = level_idx.tolist()
            syms = _decode_core(
                stream,
                _RowView(freq_rows, lv),
                _RowView(cum_rows, lv),
                precision,
            )
        with timer.phase("quantize"):
            k = np.asarray(syms, dtype=np.int64).reshape(n, c) - s_radius
            decoded.append(mu + delta * k)

    groups = tuple(_vectors_to_grid(d, gshape) for d in decoded)
    return merge_groups(GroupedLatent(groups=groups, source_shape=(c, h, w)))


class _RowView:
    """Per-symbol table rows backed by shared level tables."""

    def __init__(self, rows, level_of):
        self._rows = rows
        self._level_of = level_of

    def __getitem__(self, i):
        return self._rows[self._level_of[i]]


# ---------------------------------------------------------------------------
# Fitting.


def _ridge_fit(design: np.ndarray, targets: np.ndarray, lam: float) -> np.ndarray:
    """Least squares with an L2 penalty; returns (d+1, k) with bias last.

    Normal equations are accumulated with non-BLAS einsum so refits are
    reproducible across platforms.
    """
    n = design.shape[0]
    a = np.concatenate([design, np.ones((n, 1))], axis=1)
    gram = np.einsum("nd,ne->de", a, a, optimize=False)
    gram[np.diag_indices_from(gram)] += lam
    rhs = np.einsum("nd,nk->dk", a, targets, optimize=False)
    return np.linalg.solve(gram, rhs)


def _fit_group_heads(
    psi: np.ndarray, y: np.ndarray, lam: float, sigma_min: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Fit mu by ridge and log sigma by ridge onto bucket residual RMS.

    Positions are bucketed by a small codebook over the context; each
    position's sigma target is the log residual RMS of its bucket and
    channel, so heteroscedastic contexts get context-dependent scales while
    homoscedastic sources collapse to a constant head.
    """
    n, c = y.shape
    d = psi.shape[1]
    sol_mu = _ridge_fit(psi, y, lam)
    resid = y - (psi @ sol_mu[:-1] + sol_mu[-1])

    if d == 0:
        # Bias-only group: mu is the mean, sigma the per-channel residual RMS.
        rms = np.sqrt(np.maximum(np.mean(resid * resid, axis=0), sigma_min**2))
        return np.zeros((0, 2 * c)), np.concatenate([sol_mu[-1], np.log(rms)])

    buckets = min(_SIGMA_BUCKETS, max(1, n // 64))
    if buckets > 1:
        cb, _ = train_codebook(psi, buckets, iterations=8, seed=seed)
        labels = nn_quantize(cb, psi)
    else:
        labels = np.zeros(n, dtype=np.int64)
        buckets = 1
    sq = resid * resid
    sums = np.zeros((buckets, c))
    np.add.at(sums, labels, sq)
    counts = np.bincount(labels, minlength=buckets).astype(np.float64)
    rms = np.sqrt(np.maximum(sums / np.maximum(counts, 1.0)[:, None], sigma_min**2))
    targets = np.log(rms)[labels]
    sol_sig = _ridge_fit(psi, targets, lam)

    wmat = np.concatenate([sol_mu[:-1], sol_sig[:-1]], axis=1)
    bias = np.concatenate([sol_mu[-1], sol_sig[-1]])
    return wmat, bias


def _close_group_rd(qset_group, m, mu, sigma, y):
    if qset_group is None:
        return y.copy(), None
    std = (y - mu) / sigma
    stack, rec = rvq_quantize(qset_group, std, m)
    return sigma * rec + mu, stack


def _close_group_cm(delta, mu, sigma, y):
    k = np.rint((y - mu) / delta)
    np.clip(k, -CM_SUPPORT_RADIUS, CM_SUPPORT_RADIUS, out=k)
    return mu + delta * k


def _phi_vectors_for_training(
    latents: list[LatentGrid], use_hyper: bool, hyper_q, m: int | None
) -> list[np.ndarray | None]:
    out = []
    for lat in latents:
        if not use_hyper:
            out.append(None)
            continue
        hc = extract_hyper_context(lat, hyper_q, m=m)
        gshape = (lat.channels, lat.height // 2, lat.width // 2)
        out.append(_upsampled_phi_vectors(hc.phi, gshape))
    return out


def _predict_with(w, b, c, sigma_min, psi):
    out = np.tile(b, (psi.shape[0], 1))
    for d in range(w.shape[0]):
        out += psi[:, d : d + 1] * w[d : d + 1, :]
    return out[:, :c], np.maximum(np.exp(out[:, c:]), sigma_min)


def fit_context_predictor(
    training_latents: list[LatentGrid],
    config: SchemeConfig,
    ridge_lambda: float = 1e-3,
    seed: int = 0,
) -> ContextPredictor:
    """Fit the per-group affine heads on closed-loop decoded context.

    The loop is closed with the configured scheme: RD decodes each group
    through the quantizer set (or losslessly when the config carries none),
    CM through uniform rounding at the configured delta.  IQ has no
    predictor, so asking for one is an error.
    """
    if not training_latents:
        raise ValueError("no training latents")
    if config.scheme == "iq":
        raise ValueError("iq uses no context predictor")
    c = training_latents[0].channels
    for lat in training_latents:
        if lat.channels != c:
            raise ValueError("training latents must share a channel count")
        _check_geometry(lat, config.use_hyper)

    hyper_q = config.quantizers.hyper if (config.use_hyper and config.quantizers) else None
    if config.use_hyper and hyper_q is None:
        raise ValueError("use_hyper requires a quantizer set with a hyper quantizer")
    phi_vecs = _phi_vectors_for_training(training_latents, config.use_hyper, hyper_q, config.m)

    if config.scheme == "rd":
        def close_group(i, mu, sigma, y):
            q = config.quantizers.groups[i] if config.quantizers else None
            m = config.m if config.m is not None else (q.stages if q else None)
            out, _ = _close_group_rd(q, m, mu, sigma, y)
            return out
    else:
        def close_group(i, mu, sigma, y):
            return _close_group_cm(config.delta, mu, sigma, y)

    weights, biases = _run_sequential_fit(
        training_latents, config.use_hyper, phi_vecs, close_group, ridge_lambda, seed
    )
    return ContextPredictor(
        weights=tuple(weights),
        biases=tuple(biases),
        channels=c,
        uses_hyper=config.use_hyper,
        sigma_min=SIGMA_FLOOR,
    )


def _run_sequential_fit(latents, use_hyper, phi_vecs, close_group, lam, seed):
    c = latents[0].channels
    grouped = [partition_quadtree(lat) for lat in latents]
    y_all = [[_group_vectors(g.groups[i]) for g in grouped] for i in range(4)]
    counts = [y.shape[0] for y in y_all[0]]

    decoded: list[list[np.ndarray]] = [[] for _ in latents]
    weights, biases = [], []
    for i in range(4):
        psi_rows = [
            _context_for(i, decoded[j], phi_vecs[j], counts[j]) for j in range(len(latents))
        ]
        psi = np.concatenate(psi_rows, axis=0)
        y = np.concatenate(y_all[i], axis=0)
        params = (psi.shape[1] + 1) * 2 * c
        if psi.shape[0] < 10 * params:
            raise ValueError(
                f"group {i + 1}: {psi.shape[0]} training positions < 10x {params} parameters"
            )
        w, b = _fit_group_heads(psi, y, lam, SIGMA_FLOOR, seed=seed * 7 + i)
        weights.append(w)
        biases.append(b)
        for j in range(len(latents)):
            mu, sigma = _predict_with(w, b, c, SIGMA_FLOOR, psi_rows[j])
            decoded[j].append(close_group(i, mu, sigma, y_all[i][j]))
    return weights, biases


def train_rd_model(
    latents: list[LatentGrid],
    stage_sizes: tuple[int, ...],
    hyper_stage_sizes: tuple[int, ...] | None = None,
    m: int | None = None,
    iterations: int = 20,
    seed: int = 0,
    ridge_lambda: float = 1e-3,
    group_stage_sizes: tuple[tuple[int, ...], ...] | None = None,
) -> tuple[ContextPredictor, QuantizerSet]:
    """Interleaved training of predictor heads and residual quantizers.

    The quantizer of group i must be trained on standardized residuals,
    which need group i's fitted head, which needs groups < i decoded through
    *their* quantizers; so heads and quantizers are fit in one sequential
    pass.  ``stage_sizes`` applies to every group unless per-group ladders
    are given via ``group_stage_sizes``.
    """
    if not latents:
        raise ValueError("no training latents")
    c = latents[0].channels
    per_group = group_stage_sizes or tuple([tuple(stage_sizes)] * 4)
    if len(per_group) != 4:
        raise ValueError("need stage sizes for exactly four groups")
    use_hyper = hyper_stage_sizes is not None
    for lat in latents:
        _check_geometry(lat, use_hyper)

    hyper_q = None
    if use_hyper:
        z_rows = [_group_vectors(block_means(lat)) for lat in latents]
        hyper_q = train_rvq(
            np.concatenate(z_rows, axis=0), hyper_stage_sizes, iterations=iterations,
            seed=seed * 7 + 11,
        )
    m_eff = m
    phi_vecs = _phi_vectors_for_training(latents, use_hyper, hyper_q, m_eff)

    trained: list[ResidualVQ] = []
    grouped = [partition_quadtree(lat) for lat in latents]
    y_all = [[_group_vectors(g.groups[i]) for g in grouped] for i in range(4)]
    counts = [y.shape[0] for y in y_all[0]]
    decoded: list[list[np.ndarray]] = [[] for _ in latents]
    weights, biases = [], []
    for i in range(4):
        psi_rows = [
            _context_for(i, decoded[j], phi_vecs[j], counts[j]) for j in range(len(latents))
        ]
        psi = np.concatenate(psi_rows, axis=0)
        y = np.concatenate(y_all[i], axis=0)
        params = (psi.shape[1] + 1) * 2 * c
        if psi.shape[0] < 10 * params:
            raise ValueError(
                f"group {i + 1}: {psi.shape[0]} training positions < 10x {params} parameters"
            )
        w, b = _fit_group_heads(psi, y, ridge_lambda, SIGMA_FLOOR, seed=seed * 7 + i)
        weights.append(w)
        biases.append(b)
        mu_all, sigma_all = _predict_with(w, b, c, SIGMA_FLOOR, psi)
        std_all = (y - mu_all) / sigma_all
        rvq_i = train_rvq(std_all, per_group[i], iterations=iterations, seed=seed * 7 + 30 + i)
        trained.append(rvq_i)
        mm = m_eff if m_eff is not None else rvq_i.stages
        for j in range(len(latents)):
            mu, sigma = _predict_with(w, b, c, SIGMA_FLOOR, psi_rows[j])
            std = (y_all[i][j] - mu) / sigma
            _, rec = rvq_quantize(rvq_i, std, mm)
            decoded[j].append(sigma * rec + mu)

    predictor = ContextPredictor(
        weights=tuple(weights), biases=tuple(biases), channels=c,
        uses_hyper=use_hyper, sigma_min=SIGMA_FLOOR,
    )
    qset = QuantizerSet(groups=tuple(trained), hyper=hyper_q)
    return predictor, qset


def train_iq_model(
    latents: list[LatentGrid],
    stage_sizes: tuple[int, ...],
    iterations: int = 20,
    seed: int = 0,
    group_stage_sizes: tuple[tuple[int, ...], ...] | None = None,
) -> QuantizerSet:
    """Train one residual quantizer per group on the raw group vectors."""
    if not latents:
        raise ValueError("no training latents")
    per_group = group_stage_sizes or tuple([tuple(stage_sizes)] * 4)
    grouped = [partition_quadtree(lat) for lat in latents]
    books = []
    for i in range(4):
        pool = np.concatenate([_group_vectors(g.groups[i]) for g in grouped], axis=0)
        books.append(train_rvq(pool, per_group[i], iterations=iterations, seed=seed * 7 + 50 + i))
    return QuantizerSet(groups=tuple(books), hyper=None)


def train_cm_model(
    latents: list[LatentGrid],
    delta: float,
    ridge_lambda: float = 1e-3,
    seed: int = 0,
) -> ContextPredictor:
    """Fit the CM predictor closed-loop through uniform rounding at delta."""
    config = SchemeConfig(scheme="cm", delta=delta, use_hyper=False)
    return fit_context_predictor(latents, config, ridge_lambda=ridge_lambda, seed=seed)


# ---------------------------------------------------------------------------
# Predictor file format.


def write_predictor_file(path, predictor: ContextPredictor) -> None:
    with open(path, "wb") as f:
        f.write(_PREDICTOR_MAGIC)
        f.write(
            struct.pack(
                "<BIIB",
                _PREDICTOR_VERSION,
                len(predictor.weights),
                predictor.channels,
                1 if predictor.uses_hyper else 0,
            )
        )
        for w, b in zip(predictor.weights, predictor.biases):
            f.write(struct.pack("<II", w.shape[0], w.shape[1]))
            f.write(w.astype("<f8").tobytes(order="C"))
            f.write(b.astype("<f8").tobytes(order="C"))
        f.write(struct.pack("<d", predictor.sigma_min))


def read_predictor_file(path) -> ContextPredictor:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 14 or raw[:4] != _PREDICTOR_MAGIC:
        raise ValueError(f"{path}: not a predictor file (bad magic)")
    version, groups, channels, uses_hyper = struct.unpack("<BIIB", raw[4:14])
    if version != _PREDICTOR_VERSION:
        raise ValueError(f"{path}: unsupported predictor version {version}")
    off = 14
    weights, biases = [], []
    for _ in range(groups):
        if off + 8 > len(raw):
            raise ValueError(f"{path}: truncated group header")
        d, two_c = struct.unpack("<II", raw[off : off + 8])
        off += 8
        wb = 8 * d * two_c
        bb = 8 * two_c
        if off + wb + bb > len(raw):
            raise ValueError(f"{path}: truncated group payload")
        weights.append(np.frombuffer(raw[off : off + wb], dtype="<f8").reshape(d, two_c).copy())
        off += wb
        biases.append(np.frombuffer(raw[off : off + bb], dtype="<f8").copy())
        off += bb
    if off + 8 > len(raw):
        raise ValueError(f"{path}: truncated sigma_min field")
    if off + 8 < len(raw):
        raise ValueError(f"{path}: {len(raw) - off - 8} unexpected trailing bytes")
    (sigma_min,) = struct.unpack("<d", raw[off : off + 8])
    return ContextPredictor(
        weights=tuple(weights),
        biases=tuple(biases),
        channels=channels,
        uses_hyper=bool(uses_hyper),
        sigma_min=sigma_min,
    )
