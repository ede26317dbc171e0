#!/usr/bin/env python3
"""Run the particle-vs-SPDE convergence-rate study and print the fitted slope.

Usage:
    python3 scripts/run_rate_study.py [--config configs/study.toml]
                                      [--out results/rate_study]

Writes rows.csv, summary.json, and manifest.json to --out, then prints a
per-N table of mean sup-t L1^2 errors with standard errors.
"""
import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from chaoslab.harness import StudyConfig, run_study  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None, help="TOML study config")
    ap.add_argument("--out", default="results/rate_study")
    args = ap.parse_args()

    cfg = StudyConfig.from_toml(args.config) if args.config else StudyConfig()
    print(f"config hash {cfg.config_hash}, N in {list(cfg.n_list)}, "
          f"M={cfg.replicates}, steps={cfg.steps}")
    t0 = time.monotonic()
    res = run_study(cfg, out_dir=args.out)
    print(f"done in {time.monotonic() - t0:.1f}s, "
          f"failed fraction {res.failed_fraction:.3f}")
    print(f"{'N':>6}  {'mean sup L1^2':>14}  {'stderr':>10}")
    for N, s in res.per_n.items():
        print(f"{N:>6}  {s['mean']:>14.6f}  {s['stderr']:>10.6f}")
    if res.fit is not None:
        print(f"slope {res.fit.slope:.4f}, jackknife band "
              f"({res.fit.band[0]:.4f}, {res.fit.band[1]:.4f})")
    print(f"outputs written to {args.out}/")
    return 0 if res.valid else 1


if __name__ == "__main__":
    raise SystemExit(main())
