"""Desk-scale SSL-fused separator vs. the no-SSL baseline, over several seeds."""
import argparse
import json
from dataclasses import asdict, replace

from csskit.experiments import DeskExperimentConfig, run_desk_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--out", help="write per-seed results as JSON lines")
    args = p.parse_args()
    rows = []
    for seed in args.seeds:
        res = run_desk_experiment(replace(DeskExperimentConfig(), seed=seed))
        rows.append({"seed": seed, **asdict(res)})
        print(f"seed {seed}: ssl {res.ssl_si_sdr:6.2f} dB  baseline {res.baseline_si_sdr:6.2f} dB  "
              f"gap {res.ssl_si_sdr - res.baseline_si_sdr:+.2f} dB  ({res.seconds:.0f}s)", flush=True)
    if args.out:
        with open(args.out, "w") as f:
            for r in rows:
                f.write(json.dumps(r) + "\n")


if __name__ == "__main__":
    main()
