#!/usr/bin/env python3
"""Sweep the time order N and frequency order N_omega for the pi/2 transfer over omega in [-1, 1]."""

import argparse
import time
from pathlib import Path

from ensemblectl import studies
from ensemblectl.bloch import BlochParams
from ensemblectl.studies import StudySpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/convergence")
    ap.add_argument("--N", type=int, nargs="+", default=[8, 16, 24, 32, 40])
    ap.add_argument("--N-omega", type=int, nargs="+", default=[2, 4, 8, 12])
    args = ap.parse_args()

    spec = StudySpec("convergence", BlochParams(B=1.0, delta=0.0, amplitude_bound=10.0, duration=1.0),
                     sweep={"N": args.N, "N_omega": args.N_omega})
    t0 = time.perf_counter()
    cells = studies.run_convergence(spec)
    secs = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    studies.write_convergence_csv(out / "convergence.csv", cells)

    print(f"{'N':>4s} {'N_omega':>8s} {'avg M_x':>10s} {'gap':>9s}  status")
    for c in cells:
        print(f"{c.N:4d} {c.N_omega:8d} {c.avg_Mx:10.6f} {c.oracle_gap:9.2e}  {c.status}")
    print(f"{len(cells)} cells in {secs:.0f} s; table in {out / 'convergence.csv'}")


if __name__ == "__main__":
    main()
