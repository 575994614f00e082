"""Command-line entry point: ``eqkd <subcommand> [options]``.

Errors end the process with a single JSON line on stderr, for example
``{"error": "UnknownKey", "exit": 2, "message": "..."}``.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ALIASES, Config, format_provenance, parse_config
from .distill import KeyStore, MetricsLog
from .nodes import PeerAborted
from .protocol import ProtocolError, write_tag_file

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_SECURITY = 4

log = logging.getLogger("eqkd")


class SecurityAbort(RuntimeError):
    pass


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": message}), file=sys.stderr)
    return code


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for alias in ALIASES:
        v = getattr(args, f"opt_{alias}", None)
        if v is not None:
            out[alias] = v
    return out


def _header(cfg: Config, **extra) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, **extra}


def _metrics(cfg: Config, path) -> MetricsLog:
    m = MetricsLog(path)
    if path:
        Path(path).write_text("")
    m.write(kind="header", **_header(cfg))
    return m


def _key_store(cfg: Config, path) -> KeyStore | None:
    if not path:
        return None
    p = Path(path)
    for f in (p, p.with_suffix(p.suffix + ".idx")):
        if f.exists():
            f.unlink()
    return KeyStore(p, cfg.config_hash(), cfg.seed)


# ---------------------------------------------------------------- subcommands


def cmd_simulate(cfg: Config, args) -> int:
    from .sim_link import PS_PER_S, LinkSimulator

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = LinkSimulator(cfg, cfg.seed, args.duration, block_s=cfg.network.block_s)
    blocks = {"alice": [], "bob": []}
    for side, blk in sim.blocks():
        blocks[side].append(blk)
    for side in blocks:
        n = write_tag_file(out / f"{side}.tags", blocks[side], _header(cfg, side=side, duration_s=args.duration))
        print(f"{side}: {n} tags -> {out / f'{side}.tags'}")
    t = np.arange(0.0, args.duration + 1e-9, 0.01)
    off = sim.truth_offset_ps(t * PS_PER_S)
    skew = [sim.clock.skew_at(x * PS_PER_S) for x in t]
    with open(out / "truth.csv", "w") as f:
        f.write(f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n")
        f.write("t_s,offset_ps,skew_ps_per_s\n")
        for row in zip(t, off, skew):
            f.write(f"{row[0]:.2f},{row[1]:.3f},{row[2]:.6f}\n")
    print(f"truth -> {out / 'truth.csv'}")
    return EXIT_OK


def _source(cfg: Config, args, side: str):
    from .nodes import FileSource, simulated_source

    if args.tags:
        return FileSource(args.tags, side, cfg.network.block_s)
    return simulated_source(cfg, side, args.duration)


def _security_exit(keys, discarded) -> int:
    if not keys and any("security" in why or "confirmation" in why for _, why in discarded):
        raise SecurityAbort("; ".join(why for _, why in discarded))
    return EXIT_OK


def cmd_run_alice(cfg: Config, args) -> int:
    from .nodes import run_alice

    node = run_alice(cfg, _source(cfg, args, "alice"), _metrics(cfg, args.metrics), _key_store(cfg, args.keys))
    print(f"alice: {len(node.keys)} keys, {sum(k.length for k in node.keys)} bits")
    return _security_exit(node.keys, node.discarded)


def cmd_run_bob(cfg: Config, args) -> int:
    from .nodes import run_bob

    node = run_bob(cfg, _source(cfg, args, "bob"), _metrics(cfg, args.metrics), _key_store(cfg, args.keys))
    print(f"bob: {len(node.keys)} keys, {sum(k.length for k in node.keys)} bits")
    return _security_exit(node.keys, node.discarded)


def cmd_run_loopback(cfg: Config, args) -> int:
    from .nodes import run_loopback
    from .skr_model import predict

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stores = (_key_store(cfg, out / "alice.keys"), _key_store(cfg, out / "bob.keys"))
    res = run_loopback(cfg, args.duration, metrics=_metrics(cfg, out / "metrics.jsonl"), key_stores=stores)
    a = res.alice
    print(f"periods committed: {len(a.keys)}  keys identical: {res.keys_match}")
    print(f"secret bits: {res.secret_bits}  pipeline SKR: {res.pipeline_skr():.1f} bps  "
          f"model SKR: {predict(cfg.source.mu, cfg).secret_rate:.1f} bps")
    print(f"sifted bits: {a.sifted_bits}  raw bits in progress: {a.acc.pending}  wall: {res.wall_s:.1f} s")
    for rec in a.metrics.records:
        if rec.get("kind") == "period":
            print(f"  period {rec['period']}: l={rec['l']} phi_x={rec['phi_x']:.4f} phi_u={rec['phi_u']:.4f} "
                  f"lambda_ec={rec['lambda_ec']} committed={rec['committed']}")
    return _security_exit(a.keys, a.discarded + res.bob.discarded)


def cmd_model_skr(cfg: Config, args) -> int:
    from .skr_model import export_scan, optimize_mu

    grid = np.geomspace(args.mu_min, args.mu_max, args.points)
    export_scan(cfg, grid, args.out, header_comment=f"config_hash={cfg.config_hash()} seed={cfg.seed}")
    mu, p = optimize_mu(cfg, (args.mu_min, args.mu_max))
    print(f"scan -> {args.out} ({args.points} points)")
    print(f"mu*={mu:.5g}  QBERz={p.qber_z:.4f}  QBERx={p.qber_x:.4f}  raw={p.raw_rate:.1f} bps  SKR={p.secret_rate:.1f} bps")
    return EXIT_OK


def cmd_bench_correlate(cfg: Config, args) -> int:
    from . import timetag as tt
    from .experiments import synthetic_tags, throughput_bench

    r = throughput_bench(args.tags, cfg.seed, args.repeats)
    print(f"tags per side: {r.n_tags}  histogram: {r.histogram_s:.3f} s  matching: {r.match_s:.3f} s  "
          f"coincidences: {r.coincidences}")
    print(f"throughput: {r.tags_per_s:.3e} tags/s/side")
    if args.histogram_csv:
        ta, tb = synthetic_tags(min(args.tags, 1_000_000), seed=cfg.seed)
        h = tt.correlation_histogram(ta, tb, 1_000_000, tt.STAGE3_HALF_RANGE_PS, tt.STAGE3_BIN_PS)
        with open(args.histogram_csv, "w") as f:
            f.write(f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n" + h.to_csv())
        print(f"histogram -> {args.histogram_csv}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "run-alice": cmd_run_alice,
    "run-bob": cmd_run_bob,
    "run-loopback": cmd_run_loopback,
    "model-skr": cmd_model_skr,
    "bench-correlate": cmd_bench_correlate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    for alias, dotted in ALIASES.items():
        common.add_argument(f"--{alias}", dest=f"opt_{alias}", metavar="V", help=f"shorthand for {dotted}")
    common.add_argument("--quiet", action="store_true", help="do not print the configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="eqkd", description="Energy-time entanglement QKD link twin")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write Alice/Bob tag files and a truth file")
    s.add_argument("--duration", type=float, default=10.0)
    s.add_argument("--out-dir", default="sim_out")

    for name in ("run-alice", "run-bob"):
        s = sub.add_parser(name, parents=[common], help=f"live {name[4:]} node over TCP")
        s.add_argument("--tags", help="tag file to replay (default: simulate this side)")
        s.add_argument("--duration", type=float, default=60.0, help="simulated duration without --tags")
        s.add_argument("--keys", help="key store path")
        s.add_argument("--metrics", help="JSONL metrics path")

    s = sub.add_parser("run-loopback", parents=[common], help="both nodes in-process")
    s.add_argument("--duration", type=float, default=60.0)
    s.add_argument("--out-dir", default="loopback_out")

    s = sub.add_parser("model-skr", parents=[common], help="SKR and QBER scan over mu")
    s.add_argument("--out", default="skr_scan.csv")
    s.add_argument("--points", type=int, default=200)
    s.add_argument("--mu-min", type=float, default=1e-4)
    s.add_argument("--mu-max", type=float, default=0.5)

    s = sub.add_parser("bench-correlate", parents=[common], help="correlation and matching throughput")
    s.add_argument("--tags", type=int, default=10_000_000)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--histogram-csv", help="also dump a +-40 ns correlation histogram")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, prov = parse_config(args.config, _overrides(args))
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, EXIT_CONFIG, str(exc))
    if not args.quiet:
        print(format_provenance(cfg, prov), file=sys.stderr)
    try:
        return COMMANDS[args.command](cfg, args)
    except SecurityAbort as exc:
        return _fail("SecurityAbort", EXIT_SECURITY, str(exc))
    except PeerAborted as exc:
        code = EXIT_SECURITY if exc.code == EXIT_SECURITY else EXIT_PROTOCOL
        return _fail("PeerAborted", code, str(exc))
    except (ProtocolError, ConnectionError, asyncio.IncompleteReadError, asyncio.TimeoutError) as exc:
        return _fail(type(exc).__name__, EXIT_PROTOCOL, str(exc))


if __name__ == "__main__":
    sys.exit(main())
