"""X-basis error versus phase, then closed-loop feedback from a random start."""
import argparse
import math

import numpy as np

from eqkd.config import parse_config, replace
from eqkd.experiments import feedback_run, lossless, xbasis_point


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--mu", type=float, default=1e-5)
    ap.add_argument("--lossy", action="store_true", help="keep the configured losses")
    ap.add_argument("--duration", type=float, default=40.0)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()
    cfg, _ = parse_config(args.config)
    cfg = replace(cfg if args.lossy else lossless(cfg), **{"source.mu": args.mu})
    for k, phi in enumerate(np.linspace(0, math.pi, 5)):
        p = xbasis_point(cfg, float(phi), 5.0, seed=k)
        print(f"phase {phi:.3f}: QBERx {p.qber_x:.4f} expected {p.expected:.4f} ({p.z_score:+.2f} sigma, n={p.n})")
    fb = feedback_run(cfg, args.duration, args.seed)
    print(f"feedback from {fb.start_phase:+.3f} rad: below 7% from block {fb.converged_block}, "
          f"held {fb.held_blocks} blocks, final QBERx {fb.final_qber:.4f}")
    for block, q, cmd in fb.steps[:: max(1, len(fb.steps) // 20)]:
        print(f"  block {block:4d}  QBERx {q:.4f}  command {cmd:+.4f}")


if __name__ == "__main__":
    main()
