"""Command line entry point.

Exit codes: 0 ok, 2 usage or configuration error, 3 runtime or data error.
Every subcommand writes only inside its output directory.
"""

from __future__ import annotations

import argparse
import asyncio
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import analysis, envelope, sensing, sim
from .relay.broker import Broker
from .relay.server import run_relay

log = logging.getLogger("breathsync")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

DEFAULT_SCENARIO = {
    "duration_ms": 90_000,
    "pattern": "coupled",
    "leader": dataclasses.asdict(sim.BreatherParams()),
    "follower": dataclasses.asdict(sim.FollowerParams()),
    "analysis": {"tail_ms": 60_000, "lag_compensated": False, "column": "az_raw"},
}


class ConfigError(Exception):
    pass


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_scenario(path: Optional[str], overrides: dict) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_SCENARIO))
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = _merge(cfg, json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    return _merge(cfg, overrides)


def _write_trace(path: Path, samples) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        sensing.write_respiration_csv(fh, samples)


def cmd_simulate(args: argparse.Namespace) -> int:
    overrides: dict = {}
    if args.duration_ms is not None:
        overrides["duration_ms"] = args.duration_ms
    if args.pattern is not None:
        overrides["pattern"] = args.pattern
    if args.coupling is not None:
        overrides["follower"] = {"coupling_gain": args.coupling}
    if args.leader_seed is not None:
        overrides.setdefault("leader", {})["rng_seed"] = args.leader_seed
    if args.follower_seed is not None:
        overrides.setdefault("follower", {})["rng_seed"] = args.follower_seed
    try:
        cfg = load_scenario(args.config, overrides)
        duration = cfg["duration_ms"]
        if not isinstance(duration, int) or duration <= 0:
            raise ConfigError("duration_ms must be a positive integer")
        pattern = envelope.Pattern.from_name(cfg["pattern"])
        leader = sim.BreatherParams(**cfg["leader"])
        follower = sim.FollowerParams(**cfg["follower"])
        acfg = cfg["analysis"]
    except (ConfigError, ValueError, TypeError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG

    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        result = sim.run_closed_loop(leader, follower, pattern, duration)
        _write_trace(out / "leader.csv", result.leader_samples)
        _write_trace(out / "follower.csv", result.follower_samples)
        (out / "relay.log").write_bytes(b"".join(ts.to_bytes(8, "big") + f for ts, f in result.log))
        lt, lv = result.trace("leader", acfg["column"])
        ft, fv = result.trace("follower", acfg["column"])
        pair = analysis.resample_align(lt, lv, ft, fv)
        report, _ = analysis.analyze(pair, tail_ms=acfg["tail_ms"], lag_compensated=acfg["lag_compensated"])
    except (analysis.AnalysisError, OSError, ValueError) as exc:
        log.error("simulation failed: %s", exc)
        return EXIT_RUNTIME
    report.extra.update({
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": {"leader": leader.rng_seed, "follower": follower.rng_seed},
        "frames_logged": len(result.log),
    })
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    log.info("r=%.3f lag=%g ms section=%s", report.pearson_r, report.lag_ms, report.section)
    return EXIT_OK


def cmd_relay(args: argparse.Namespace) -> int:
    try:
        broker = Broker(log_dir=args.log_dir)
    except OSError as exc:
        log.error("cannot use log directory: %s", exc)
        return EXIT_CONFIG

    def ready(server) -> None:
        # machine-readable line for scripts that need the bound port
        print(json.dumps({"listening": [server.host, server.port]}), flush=True)

    try:
        asyncio.run(run_relay(broker, args.host, args.port, ready))
    except OSError as exc:
        log.error("cannot listen on %s:%s: %s", args.host, args.port, exc)
        broker.close()
        return EXIT_CONFIG
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace) -> int:
    out = Path(args.out_dir)
    pipeline = sensing.RespirationPipeline(
        inspiration_at_minimum=not args.inspiration_at_max,
        compensate_delay=not args.no_delay_compensation,
    )
    samples, events = [], []
    try:
        with open(args.csv_path, encoding="utf-8", newline="") as fh:
            for frame in sensing.read_imu_csv(fh):
                sample, event = pipeline.push(frame)
                samples.append(sample)
                if event is not None:
                    events.append(event)
    except sensing.CsvFormatError as exc:
        log.error("%s: %s", args.csv_path, exc)
        return EXIT_RUNTIME
    except sensing.StreamError as exc:
        log.error("%s: line %d: %s", args.csv_path, len(samples) + 2, exc)
        return EXIT_RUNTIME
    except OSError as exc:
        log.error("cannot read %s: %s", args.csv_path, exc)
        return EXIT_RUNTIME
    out.mkdir(parents=True, exist_ok=True)
    _write_trace(out / "respiration.csv", samples)
    with open(out / "events.jsonl", "w", encoding="utf-8") as fh:
        sensing.write_events_jsonl(fh, events)
    log.info("%d samples, %d events", len(samples), len(events))
    return EXIT_OK


def cmd_envelope(args: argparse.Namespace) -> int:
    try:
        pattern = envelope.Pattern.from_name(args.pattern)
        samples = envelope.cycle_envelope(pattern, args.T_ms, args.depth)
        if not 0 <= args.mask <= 0b1111:
            raise ValueError(f"channel mask {args.mask:#x} out of range 0..0xF")
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "envelope.csv", "w", encoding="utf-8", newline="") as fh:
        envelope.write_envelope_csv(fh, samples)
    if args.waveform:
        frames = envelope.synthesize_waveform(samples, channel_mask=args.mask)
        with open(out / "waveform.csv", "w", encoding="utf-8", newline="") as fh:
            envelope.write_waveform_csv(fh, frames)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    out = Path(args.out_dir)
    try:
        with open(args.trace_a, encoding="utf-8", newline="") as fh:
            at, av = sensing.read_respiration_csv(fh, args.column)
        with open(args.trace_b, encoding="utf-8", newline="") as fh:
            bt, bv = sensing.read_respiration_csv(fh, args.column)
        pair = analysis.resample_align(at, av, bt, bv)
        report, scores = analysis.analyze(pair, tail_ms=args.tail_ms, lag_compensated=args.lag_compensated)
    except (analysis.AnalysisError, sensing.CsvFormatError, OSError) as exc:
        log.error("analysis failed: %s", exc)
        return EXIT_RUNTIME
    cfg = {
        "trace_a": str(args.trace_a),
        "trace_b": str(args.trace_b),
        "column": args.column,
        "tail_ms": args.tail_ms,
        "lag_compensated": args.lag_compensated,
    }
    report.extra.update({"config": cfg, "config_hash": config_hash(cfg), "seeds": {}})
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    with open(out / "windows.csv", "w", encoding="utf-8", newline="") as fh:
        analysis.write_window_csv(fh, scores)
    print(json.dumps({"pearson_r": report.pearson_r, "lag_ms": report.lag_ms, "section": report.section}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="breathsync", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the closed leader/follower loop")
    s.add_argument("--config", help="scenario JSON file")
    s.add_argument("--out-dir", default="out")
    s.add_argument("--duration-ms", type=int)
    s.add_argument("--pattern")
    s.add_argument("--coupling", type=float, help="follower coupling gain, rad/s")
    s.add_argument("--leader-seed", type=int)
    s.add_argument("--follower-seed", type=int)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("relay", help="serve the breath relay over TCP")
    r.add_argument("--host", default="127.0.0.1")
    r.add_argument("--port", type=int, default=7878)
    r.add_argument("--log-dir", default="relay-logs")
    r.set_defaults(func=cmd_relay)

    i = sub.add_parser("ingest", help="process a recorded dual-IMU CSV")
    i.add_argument("csv_path")
    i.add_argument("--out-dir", default="out")
    i.add_argument("--inspiration-at-max", action="store_true",
                   help="treat a_z maxima as inspiration onsets")
    i.add_argument("--no-delay-compensation", action="store_true",
                   help="report extrema of the filtered trace without group-delay correction")
    i.set_defaults(func=cmd_ingest)

    e = sub.add_parser("envelope", help="dump one breath cycle of envelope levels")
    e.add_argument("--pattern", default="coupled")
    e.add_argument("--T-ms", dest="T_ms", type=float, default=2000.0)
    e.add_argument("--depth", type=float, default=1.0)
    e.add_argument("--out-dir", default="out")
    e.add_argument("--waveform", action="store_true", help="also write the 4-channel drive")
    e.add_argument("--mask", type=lambda v: int(v, 0), default=0b1111)
    e.set_defaults(func=cmd_envelope)

    a = sub.add_parser("analyze", help="synchrony report for two traces")
    a.add_argument("trace_a")
    a.add_argument("trace_b")
    a.add_argument("--out-dir", default="out")
    a.add_argument("--column", default="az_raw", choices=("az_raw", "az_filt"))
    a.add_argument("--tail-ms", type=float, help="score r over the final span only")
    a.add_argument("--lag-compensated", action="store_true")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
