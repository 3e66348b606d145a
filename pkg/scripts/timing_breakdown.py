#!/usr/bin/env python3
"""Per-phase runtime table for the fixed-length and entropy-coded paths.

Codes the same holdout latents at matched operating-point counts and
prints milliseconds spent in quantization, context prediction, packing,
and entropy coding for each path.  The point is the shape of the table,
not the absolute numbers: the fixed-length path has an empty
entropy-coding column by construction.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from rvqcodec.bitstream import StreamHeader, pack, unpack
from rvqcodec.grids import LATENT_DOWNSAMPLE, SourceConfig, gauss_markov_sample
from rvqcodec.schemes import (
    CodedLatent,
    SchemeConfig,
    cm_decode,
    cm_encode,
    rd_decode,
    rd_encode,
    train_cm_model,
    train_rd_model,
)
from rvqcodec.timing import PhaseTimer

PHASES = ("quantize", "autoregressive", "entropy_code", "pack")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--shape", default="1,128,128", help="latent C,H,W")
    ap.add_argument("--rho", type=float, default=0.9)
    ap.add_argument("--ms", default="1,2,3")
    ap.add_argument("--deltas", default="1.0,0.5,0.25")
    ap.add_argument("--K", type=int, default=64, help="codebook size per stage")
    ap.add_argument("--holdout-count", type=int, default=4)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    c, h, w = (int(v) for v in args.shape.split(","))
    source = SourceConfig(channels=c, height=h, width=w, rho=args.rho,
                          variance=1.0, seed=33)
    ms = [int(v) for v in args.ms.split(",")]
    deltas = [float(v) for v in args.deltas.split(",")]
    if len(deltas) != len(ms):
        ap.error("--ms and --deltas must list the same number of points")

    train = [gauss_markov_sample(source, index=i) for i in range(8)]
    hold = [gauss_markov_sample(source, index=1000 + i)
            for i in range(args.holdout_count)]

    pred_rd, qset = train_rd_model(
        train, (), m=None, iterations=10, seed=args.seed,
        group_stage_sizes=((args.K,) * max(ms),) * 4,
    )

    rd_enc, rd_dec = PhaseTimer(), PhaseTimer()
    rd_wall = 0.0
    for m in ms:
        for x in hold:
            coded = rd_encode(x, pred_rd, qset, m, timer=rd_enc)
            header = StreamHeader(height=x.height * LATENT_DOWNSAMPLE,
                                  width=x.width * LATENT_DOWNSAMPLE, q=m)
            with rd_enc.phase("pack"):
                stream = pack(header, coded.hyper_stack, coded.group_stacks, qset)
            start = time.perf_counter()
            with rd_dec.phase("pack"):
                _, hyper_stack, group_stacks = unpack(stream, qset)
            rebuilt = CodedLatent(scheme="rd", shape=coded.shape,
                                  reconstruction=None, rate_bits=coded.rate_bits,
                                  m=m, group_stacks=group_stacks,
                                  hyper_stack=hyper_stack)
            rd_decode(rebuilt, pred_rd, qset, timer=rd_dec)
            rd_wall += time.perf_counter() - start

    cm_enc, cm_dec = PhaseTimer(), PhaseTimer()
    cm_wall = 0.0
    for delta in deltas:
        pred_cm = train_cm_model(train, delta=delta, seed=args.seed)
        config = SchemeConfig(scheme="cm", delta=delta)
        for x in hold:
            coded = cm_encode(x, pred_cm, config, timer=cm_enc)
            start = time.perf_counter()
            cm_decode(coded, pred_cm, config, timer=cm_dec)
            cm_wall += time.perf_counter() - start

    n_points = len(ms) * args.holdout_count
    print(f"{n_points} coded latents per path, shape {args.shape}, rho {args.rho}")
    print(f"{'path':<22}" + "".join(f"{p:>16}" for p in PHASES))
    for label, timer in (("fixed-length encode", rd_enc),
                         ("fixed-length decode", rd_dec),
                         ("entropy-coded encode", cm_enc),
                         ("entropy-coded decode", cm_dec)):
        row = timer.as_dict()
        print(f"{label:<22}" + "".join(f"{row[p]:>14.1f}ms" for p in PHASES))
    print(f"decode wall time: fixed-length {rd_wall * 1e3:.1f}ms,"
          f" entropy-coded {cm_wall * 1e3:.1f}ms")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
