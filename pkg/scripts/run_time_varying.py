#!/usr/bin/env python3
"""Single-spin z -> x transfer under omega(t) = sin(t) for the three running-cost choices."""

import argparse
import time
from pathlib import Path

import numpy as np

from ensemblectl import studies
from ensemblectl.bloch import BlochParams
from ensemblectl.studies import StudySpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/time_varying")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = BlochParams(B=0.0, delta=0.0, amplitude_bound=2.0, duration=1.0, frequency_profile=np.sin)
    print(f"{'cost':14s} {'M_x(T)':>10s} {'T':>8s} {'energy':>8s} {'secs':>6s}")
    for choice in studies.COST_CHOICES:
        spec = StudySpec("time_varying", params, orders=(32, 1, 1), cost_weights=(10.0, 0.1, 0.1),
                         cost_choice=choice)
        t0 = time.perf_counter()
        sol, mx = studies.run_time_varying(spec)
        secs = time.perf_counter() - t0
        studies.write_pulse_csv(out / f"pulse_{choice}.csv", sol)
        print(f"{choice:14s} {mx:10.6f} {sol.horizon:8.4f} {studies.control_energy(sol):8.4f} {secs:6.1f}")


if __name__ == "__main__":
    main()
