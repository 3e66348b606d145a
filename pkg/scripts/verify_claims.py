#!/usr/bin/env python3
"""Run the analytical claim battery and print every row.

Same experiments as `rvqcodec verify-props`, but with the full per-point
tables on stdout instead of a JSON report.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from rvqcodec.analysis import (
    decorrelation_gain_experiment,
    density_law_experiment,
    index_shaping_experiment,
    pipeline_entropy_experiment,
    rate_dominance_experiment,
)

CLAIMS = ("shaping", "decorrelation", "dominance", "entropy")


def run_shaping(seed: int) -> bool:
    rep = index_shaping_experiment(seed=seed)
    print(f"  entropy gap: init {rep['initial_gap']:.4f} -> final {rep['final_gap']:.4f}"
          f" (threshold {rep['threshold']})")
    dens = density_law_experiment(rep["codebook"], seed=seed + 1)
    print(f"  index pmf vs flattened density: TV {dens['tv_distance']:.4f}"
          f" (tolerance {dens['tolerance']})")
    return rep["passed"] and dens["passed"]


def run_decorrelation(seed: int) -> bool:
    rep = decorrelation_gain_experiment(seed=seed)
    for r in rep["rows"]:
        print(f"  m={r['m']}  mse rd {r['mse_rd']:.3e}  iq {r['mse_iq']:.3e}"
              f"  ratio {r['ratio']:.3f}")
    return rep["passed"]


def run_dominance(seed: int) -> bool:
    rep = rate_dominance_experiment(seed=seed)
    for r in rep["rows"]:
        if r["sizes"] is None:
            print(f"  delta={r['delta']:<6g} no candidate under cap {r['rate_cap']:.3f}")
            continue
        print(f"  delta={r['delta']:<6g} cm ({r['cm_rate']:.3f} b, {r['cm_mse']:.5f})"
              f" <- sizes {r['sizes']} ({r['rd_rate']:.3f} b, {r['rd_mse']:.5f})"
              f" {'ok' if r['passed'] else 'MISS'}")
    return rep["passed"]


def run_entropy(seed: int) -> bool:
    rep = pipeline_entropy_experiment(seed=seed)
    note = ", sparse contexts" if rep["sparse_warning"] else ""
    print(f"  conditional entropy gap {rep['gap']:.4f}"
          f" (threshold {rep['threshold']}{note})")
    for row in rep["report"].rows:
        print(f"  {row.quantizer} stage {row.stage}: utilization {row.utilization:.3f}"
              f"  delta_h {row.delta_h:.4f}")
    return rep["passed"]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--only", choices=CLAIMS, default=None)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    runners = {
        "shaping": lambda: run_shaping(1 if args.seed == 5 else args.seed),
        "decorrelation": lambda: run_decorrelation(args.seed),
        "dominance": lambda: run_dominance(args.seed),
        "entropy": lambda: run_entropy(args.seed),
    }
    failed = []
    for name in CLAIMS:
        if args.only is not None and name != args.only:
            continue
        print(f"[{name}]")
        start = time.perf_counter()
        ok = runners[name]()
        print(f"  {'PASS' if ok else 'FAIL'} ({time.perf_counter() - start:.0f}s)")
        if not ok:
            failed.append(name)
    if failed:
        print(f"failed: {', '.join(failed)}")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
