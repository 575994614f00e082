"""Sifted Z-Z rate of the single-detector electrical delay against a passive two-path analyser."""
import argparse

from eqkd.config import parse_config
from eqkd.experiments import sifting_gain


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--mu", default="1e-3")
    ap.add_argument("--duration", type=float, default=20.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg, _ = parse_config(args.config, {"mu": args.mu})
    r = sifting_gain(cfg, args.duration, args.seed)
    print(f"electrical {r.electrical.rate:.1f} bps, passive {r.passive.rate:.1f} bps, gain {r.ratio:.3f}")


if __name__ == "__main__":
    main()
