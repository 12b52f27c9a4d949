"""RTF sweep over encoder layer truncation and frame shift at desk dims."""
import argparse
import json
from dataclasses import replace

from csskit.bench import SweepEntry, cost_sweep
from csskit.separator import SeparatorConfig
from csskit.ssl_encoder import EncoderConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--layers", type=int, nargs="+", default=[24, 16, 12, 8, 4])
    p.add_argument("--shifts", type=int, nargs="+", default=[20, 30, 40])
    p.add_argument("--encoder-dim", type=int, default=128)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--out", help="write records as JSON")
    args = p.parse_args()
    sep = SeparatorConfig(n_layers=2, n_heads=2, model_dim=32, ff_dim=64)
    enc = EncoderConfig(n_layers=max(args.layers), n_heads=4, model_dim=args.encoder_dim, ff_dim=4 * args.encoder_dim)
    entries = [SweepEntry("baseline", sep)] + [SweepEntry(f"ssl-L{k}", sep, enc, k) for k in args.layers]
    records, table = cost_sweep(entries, runs=args.runs, rounds=args.rounds)
    print(table, end="\n\n")
    shift_entries = [SweepEntry(f"enc-{f}ms", None, replace(enc, frame_shift_ms=f)) for f in args.shifts]
    shift_records, shift_table = cost_sweep(shift_entries, runs=args.runs, rounds=args.rounds)
    print(shift_table)
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"layers": records, "frame_shift": shift_records}, f, indent=2)


if __name__ == "__main__":
    main()
