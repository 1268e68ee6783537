"""Command-line entry point: ``ndncec {calibrate,run,sweep,privacy,report}``.

Exit status: 0 on success, 1 on configuration or usage errors, 2 when a
trial breaks a timing constraint.
"""

from __future__ import annotations

import argparse
import random
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import harness
from .config import ConfigError, load_config, resolve_seed, spec_from_config
from .covert import Message, Technique
from .engine import MS, derive_seed
from .harness import (POINT_COLUMNS, RTT_COLUMNS, ConstraintViolation, PrivacyPreconditionError,
                      emit_csv)
from .netsim import PRESETS, TopologyError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CONSTRAINT = 2

REPORT_COLUMNS = ["technique", "m", "t_send_ns", "t_recv_ns", "t_thresh_ns", "bits", "bitrate",
                  "sender_bitrate", "receiver_bitrate", "error_rate", "binary_error_rate"]
TRACE_COLUMNS = ["time", "node", "packet_kind", "name", "outcome", "faces"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse would exit with 2, which is reserved for constraint violations
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML experiment config")
    p.add_argument("--seed", metavar="U64", help="master seed (overrides $NDN_CEC_SEED)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="topology preset")
    p.add_argument("--technique", metavar="NAME", help="sbtc, sbtp, tdp, matrix or cpc")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--m", type=int, help="bits per word (matrix, cpc)")
    p.add_argument("--n", type=int, help="message length in bits")
    p.add_argument("--trials", type=int, help="trials per sweep point")
    p.add_argument("--bits", type=int, help="covert bits per sweep point (sets trials)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ndncec", description="Covert ephemeral communication over a simulated NDN router.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("calibrate", help="estimate the hit/miss RTT threshold")
    _common(p)

    p = sub.add_parser("run", help="run and describe one trial")
    _common(p)
    p.add_argument("--trace", action="store_true", help="also write the packet trace CSV")

    p = sub.add_parser("sweep", help="sweep (t, t_thresh) and write CSVs")
    _common(p)

    p = sub.add_parser("privacy", help="play the retroactive privacy game")
    _common(p)
    p.add_argument("--pairs", type=int, default=1, help="random (M0, M1) pairs")

    p = sub.add_parser("report", help="summarize a sweep CSV as a bitrate-vs-error table")
    p.add_argument("csv", nargs="+", help="points CSV(s) written by sweep")
    p.add_argument("--out", metavar="DIR", help="write report.csv and PNG figures here")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    return parser


def _spec(args):
    cfg = load_config(args.config) if args.config else {}
    seed = resolve_seed(args.seed, cfg.get("seed"))
    overrides = {"seed": seed, "m": args.m, "n": args.n, "trials": args.trials}
    if args.technique is not None:
        try:
            overrides["technique"] = Technique.parse(args.technique)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    if args.preset is not None:
        topo = cfg.get("topology")
        if isinstance(topo, dict):
            topo = dict(topo, preset=args.preset)
        else:
            topo = args.preset
        overrides["topology"] = topo
    spec = spec_from_config(cfg, **overrides)
    if args.bits is not None:
        if args.bits < 1:
            raise ConfigError("--bits must be >= 1")
        spec = spec.with_bits(args.bits)
    return spec


def _outdir(args) -> Path:
    out = Path(args.out or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from None
    return out


def _ms(ns) -> str:
    return f"{ns / MS:.4f} ms"


def cmd_calibrate(args, out) -> int:
    spec = _spec(args)
    for t in spec.t_values:
        cal = harness.calibrate(spec, t)
        print(f"t={_ms(t)}  t_thresh={_ms(cal.t_thresh)}  hit_mean={_ms(cal.rtt_hit_mean)}  "
              f"miss_mean={_ms(cal.rtt_miss_mean)}  overlap={cal.overlap:.4f}  "
              f"separated={'yes' if cal.separated else 'no'}", file=out)
        for label, xs in (("hit", cal.hits), ("miss", cal.misses)):
            xs = sorted(xs)
            q = [xs[int(f * (len(xs) - 1))] for f in (0.0, 0.05, 0.5, 0.95, 1.0)]
            print(f"  {label:4s} n={len(xs)}  min/p5/p50/p95/max = " + " / ".join(_ms(v) for v in q), file=out)
        if args.out:
            d = _outdir(args)
            rows = [{"kind": "hit", "rtt_ns": h} for h in cal.hits] + [{"kind": "miss", "rtt_ns": m} for m in cal.misses]
            tag = f"{spec.technique.value}_t{t}"
            emit_csv(rows, d / f"calibration_{tag}.csv", ["kind", "rtt_ns"])
            from . import plotting
            plotting.rtt_histogram(cal.hits, cal.misses, cal.t_thresh, d / f"calibration_{tag}.png")
    return EXIT_OK


def cmd_run(args, out) -> int:
    spec = _spec(args)
    t = spec.t_values[0]
    thr = spec.t_thresh_values[0]
    cal = None
    if thr is None and spec.technique is not Technique.CPC:
        cal = harness.calibrate(spec, t)
    run = harness.simulate_trial(spec, t, 0, thr, cal, trace=args.trace)
    rep = run.report()
    print(f"technique={rep.technique} m={run.codebook.m} n={rep.n} t_send={_ms(rep.t_send)} "
          f"t_recv={_ms(rep.t_recv)} t_thresh={'-' if rep.t_thresh is None else _ms(rep.t_thresh)}", file=out)
    print(f"sent     {''.join(map(str, rep.sent[:64]))}{'...' if rep.n > 64 else ''}", file=out)
    shown = "".join("E" if d is None else str(d) for d in rep.decoded[:64])
    print(f"decoded  {shown}{'...' if rep.n > 64 else ''}", file=out)
    print(f"correct={rep.correct} write_errors={rep.write_errors} read_errors={rep.read_errors} "
          f"erasures={rep.erasures} error_rate={rep.error_rate:.4%} binary_error_rate={rep.binary_errors / rep.n:.4%}",
          file=out)
    print(f"sender: {rep.sender_interests} interests, {rep.sender_bytes} bytes; "
          f"receiver: {rep.receiver_interests} interests, {rep.receiver_bytes} bytes; "
          f"sim duration {_ms(rep.duration)}", file=out)
    if args.out:
        d = _outdir(args)
        emit_csv(run.rtt_rows(0), d / "rtts.csv", RTT_COLUMNS)
        if args.trace:
            emit_csv(run.net.trace, d / "trace.csv", TRACE_COLUMNS)
    return EXIT_OK


def cmd_sweep(args, out) -> int:
    spec = _spec(args)
    result = harness.sweep(spec)
    d = _outdir(args)
    emit_csv(result.rows(), d / "points.csv", POINT_COLUMNS)
    emit_csv(result.rtt_rows, d / "rtts.csv", RTT_COLUMNS)
    for p in result.points:
        print(f"t={_ms(p.t_send)} t_thresh={'-' if p.t_thresh is None else _ms(p.t_thresh)} "
              f"error={p.error_rate:.4%} bitrate={p.bitrate:.1f} b/s", file=out)
    print(f"wrote {d / 'points.csv'} and {d / 'rtts.csv'}", file=out)
    return EXIT_OK


def cmd_privacy(args, out) -> int:
    spec = _spec(args)
    if not spec.background:
        spec = replace(spec, background={"rate_hz": 200, "popular": 40})
    if args.n is None:
        spec = replace(spec, n=64)
    if args.pairs < 1:
        raise ConfigError("--pairs must be >= 1")
    rng = random.Random(derive_seed(spec.seed, "privacy-pairs"))
    rows = []
    for k in range(args.pairs):
        m0 = Message.random(spec.n, rng)
        m1 = Message.random(spec.n, rng)
        after = harness.privacy_game(spec, m0, m1, "expired", seed=derive_seed(spec.seed, k))
        before = harness.privacy_game(spec, m0, m1, "before", seed=derive_seed(spec.seed, k))
        rows.append({"pair": k, "technique": spec.technique.value, "n": spec.n,
                     "identical_after_expiry": int(after.indistinguishable),
                     "identical_before_expiry": int(before.indistinguishable),
                     "compared_at_ns": after.compared_at})
        print(f"pair {k}: after expiry {'indistinguishable' if after.indistinguishable else 'DISTINGUISHABLE'}; "
              f"before expiry {'identical' if before.indistinguishable else 'differs'}", file=out)
    if args.out:
        emit_csv(rows, _outdir(args) / "privacy.csv", list(rows[0]))
    return EXIT_OK


def summarize(rows: Sequence[dict]) -> List[dict]:
    """Best threshold per (technique, m, t): one bitrate-vs-error point each."""
    best = {}
    for r in rows:
        key = (r["technique"], int(r["m"]), int(r["t_send_ns"]), int(r["t_recv_ns"]))
        cur = best.get(key)
        if cur is None or float(r["error_rate"]) < float(cur["error_rate"]):
            best[key] = r
    table = []
    for key in sorted(best):
        r = best[key]
        table.append({c: r[c] for c in REPORT_COLUMNS})
    return table


def cmd_report(args, out) -> int:
    rows = []
    for path in args.csv:
        try:
            got = harness.read_csv(path)
        except OSError as e:
            raise ConfigError(f"cannot read {path}: {e}") from None
        if got and not set(REPORT_COLUMNS) <= set(got[0]):
            raise ConfigError(f"{path} is not a sweep points CSV")
        rows.extend(got)
    table = summarize(rows)
    print(f"{'technique':9s} {'m':>2s} {'t (ms)':>9s} {'bitrate (b/s)':>14s} {'error':>9s} {'binary':>9s}", file=out)
    for r in table:
        print(f"{r['technique']:9s} {int(r['m']):2d} {int(r['t_send_ns']) / MS:9.4f} {float(r['bitrate']):14.1f} "
              f"{float(r['error_rate']):9.4%} {float(r['binary_error_rate']):9.4%}", file=out)
    if args.out:
        d = _outdir(args)
        emit_csv(table, d / "report.csv", REPORT_COLUMNS)
        if not args.no_figures and rows:
            from . import plotting
            plotting.bitrate_vs_error(table, d / "bitrate_vs_error.png")
            plotting.error_vs_t(rows, d / "error_vs_t.png")
            plotting.error_vs_threshold(rows, d / "error_vs_threshold.png")
    return EXIT_OK


COMMANDS = {"calibrate": cmd_calibrate, "run": cmd_run, "sweep": cmd_sweep,
            "privacy": cmd_privacy, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args, out)
    except UsageError as e:
        print(f"ndncec: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, TopologyError) as e:
        print(f"ndncec: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConstraintViolation, PrivacyPreconditionError) as e:
        print(f"ndncec: constraint violation: {e}", file=sys.stderr)
        return EXIT_CONSTRAINT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
