"""Write a synthetic speaker corpus (WAVs, manifest, noise) for the CLI to consume."""
import argparse

from csskit.toy import write_toy_corpus


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out_dir")
    p.add_argument("--per-family", type=int, default=20, help="utterances per synthetic speaker family")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-seconds", type=float, default=10.0)
    args = p.parse_args()
    manifest = write_toy_corpus(args.out_dir, args.per_family, args.seed, noise_seconds=args.noise_seconds)
    print(f"manifest: {manifest}")
    print(f"noise dir: {manifest.parent / 'noise'}")


if __name__ == "__main__":
    main()
