"""End-to-end run of both nodes on one simulated link, compared with the rate model."""
import argparse

from eqkd.config import parse_config, replace
from eqkd.experiments import loopback_run
from eqkd.skr_model import optimize_mu


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--duration", type=float, default=60.0)
    ap.add_argument("--k", type=int, default=100, help="raw blocks per privacy-amplification period")
    ap.add_argument("--mu", type=float, help="pair probability (default: model optimum)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg, _ = parse_config(args.config, {"k": str(args.k)})
    mu = args.mu if args.mu is not None else optimize_mu(cfg)[0]
    r = loopback_run(replace(cfg, **{"source.mu": mu}), args.duration, args.seed)
    a = r.result.alice
    print(f"mu = {mu:.5g}, {len(a.keys)} keys, identical on both sides: {r.keys_match}")
    print(f"pipeline SKR {r.pipeline_skr:.1f} bps, model {r.model_skr:.1f} bps, ratio {r.skr_ratio:.3f}")
    print(f"sifted {a.sifted_bits} bits, {r.raw_in_progress} in progress, "
          f"{r.audit.announcements} announcements with {r.audit.surplus_bytes} surplus bytes")
    print(f"runtime {r.runtime_s:.1f} s")


if __name__ == "__main__":
    main()
