"""``batchgate`` command line: proxy, backend, loadgen, sim, analyze, characterize."""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from aiohttp import web

from . import analysis, backend, loadgen, sim
from .config import ConfigError, WorkloadConfig, load_config_file

logger = logging.getLogger("batchgate")


def parse_listen(addr: str) -> Tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def _pick_workload(configs: List[WorkloadConfig], name: Optional[str]) -> WorkloadConfig:
    if name is None:
        return configs[0]
    for cfg in configs:
        if cfg.name == name:
            return cfg
    raise SystemExit(f"no workload named {name!r} in config")


def cmd_proxy(args) -> int:
    from .proxy import ProxyServer

    configs = load_config_file(args.config)
    host, port = args.listen
    server = ProxyServer(configs, pinned_max=1 if args.mode == "off" else None)
    logger.info("proxy listening on %s:%d for %s", host, port, ", ".join(c.name for c in configs))
    web.run_app(server.app(), host=host, port=port, print=None, access_log=None,
                shutdown_timeout=5.0)
    return 0


def _model_from_args(args) -> backend.LatencyModel:
    return backend.preset(args.preset, fixed_fraction=args.fixed_fraction, exponent=args.exponent,
                          noise_cv=args.noise_cv, seed=args.seed)


def cmd_backend(args) -> int:
    model = _model_from_args(args)
    host, port = args.listen
    mock = backend.MockBackend(model, args.target_concurrency, args.window_ms)
    logger.info("mock backend %s on %s:%d", model, host, port)
    web.run_app(mock.app(), host=host, port=port, print=None, access_log=None)
    return 0


def _trace_from_args(args) -> loadgen.RateTrace:
    if args.trace is not None:
        trace = loadgen.load_trace_csv(args.trace)
    elif args.rate is not None:
        trace = loadgen.constant_trace(args.rate, args.duration)
    else:
        raise SystemExit("give --trace or --rate")
    if args.max_rps is not None:
        trace = loadgen.scale_trace(trace, args.max_rps)
    return trace


def cmd_loadgen(args) -> int:
    schedule = loadgen.generate_arrivals(_trace_from_args(args), args.seed)
    payload = json.loads(Path(args.payload).read_text()) if args.payload else None
    rows = asyncio.run(loadgen.replay(schedule, args.target, payload, args.out))
    ok = sum(1 for r in rows if 200 <= r.status < 300)
    print(f"sent {len(rows)} requests, {ok} succeeded, log written to {args.out}")
    return 0


def cmd_sim(args) -> int:
    cfg = _pick_workload(load_config_file(args.config), args.workload)
    model = backend.preset(args.model_preset, fixed_fraction=args.fixed_fraction,
                           exponent=args.exponent, noise_cv=args.noise_cv)
    schedule = loadgen.generate_arrivals(_trace_from_args(args), args.seed)
    opts = sim.SimOptions(capacity=args.capacity, concurrency_cap=args.concurrency_cap,
                          target_concurrency=args.target_concurrency,
                          target_utilization=args.target_utilization,
                          autoscaler_window_ms=args.autoscaler_window_ms,
                          warmup_ms=args.warmup_ms)
    result = sim.run_sim(cfg, model, schedule, args.mode, args.seed, opts)
    out = Path(args.out)
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    result.write(out, csv_path)
    print(json.dumps(result.summary, sort_keys=True))
    return 0


def _load_metrics(path: str, slo: float, warmup_ms: float) -> analysis.RunMetrics:
    p = Path(path)
    if p.suffix == ".json":
        source = sim.SimResult.load(p)
    else:
        source = loadgen.read_run_log(p)
    return analysis.compute_metrics(source, slo, warmup_ms=warmup_ms)


def cmd_analyze(args) -> int:
    on = _load_metrics(args.on, args.slo, args.warmup_ms)
    off = _load_metrics(args.off, args.slo, args.warmup_ms)
    summary = analysis.report(on, off, args.out)
    print(json.dumps({k: summary[k] for k in ("containers_reduction", "violation_reduction")}))
    return 0


def cmd_characterize(args) -> int:
    bs_list = [int(x) for x in args.bs.split(",") if x.strip()]
    target = args.url if args.url else _model_from_args(args)
    rows = analysis.characterize(target, bs_list, args.reps, seed=args.seed)
    analysis.write_characterization(rows, args.out)
    for r in rows:
        print(f"bs={r.bs:<4d} rt={r.mean_rt_ms:9.2f}ms rel_rt={r.relative_rt:6.3f} "
              f"rel_per_inf={r.relative_per_inference:6.3f}")
    return 0


def _model_args(p: argparse.ArgumentParser, preset_flag: str = "--preset") -> None:
    p.add_argument(preset_flag, default="mnist", choices=sorted(backend.PRESETS))
    p.add_argument("--fixed-fraction", type=float, default=None)
    p.add_argument("--exponent", type=float, default=None)
    p.add_argument("--noise-cv", type=float, default=None)


def _trace_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trace", help="t_seconds,rate_rps CSV or a built-in name (wc, t4, t5)")
    p.add_argument("--rate", type=float, help="constant Poisson rate instead of a trace")
    p.add_argument("--duration", type=float, default=60.0, help="seconds, with --rate")
    p.add_argument("--max-rps", type=float, default=None, help="rescale the trace peak")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="batchgate", description=__doc__)
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("proxy", help="run the batching reverse proxy")
    p.add_argument("--config", required=True)
    p.add_argument("--listen", type=parse_listen, default=("127.0.0.1", 8080))
    p.add_argument("--mode", choices=("on", "off"), default="on",
                   help="off pins the batch size to 1 (plain proxying)")
    p.set_defaults(func=cmd_proxy)

    p = sub.add_parser("backend", help="run the mock model server")
    _model_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--listen", type=parse_listen, default=("127.0.0.1", 8081))
    p.add_argument("--target-concurrency", type=int, default=1)
    p.add_argument("--window-ms", type=float, default=60_000.0)
    p.set_defaults(func=cmd_backend)

    p = sub.add_parser("loadgen", help="replay an open-loop arrival schedule over HTTP")
    _trace_args(p)
    p.add_argument("--target", required=True)
    p.add_argument("--out", default="run.csv")
    p.add_argument("--payload", help="JSON file holding the request body")
    p.set_defaults(func=cmd_loadgen)

    p = sub.add_parser("sim", help="discrete-event simulation of one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--workload", default=None)
    _model_args(p, "--model-preset")
    _trace_args(p)
    p.add_argument("--mode", choices=("on", "off"), default="on")
    p.add_argument("--capacity", choices=("unbounded", "autoscaled"), default="unbounded")
    p.add_argument("--concurrency-cap", type=int, default=None)
    p.add_argument("--target-concurrency", type=int, default=1)
    p.add_argument("--target-utilization", type=float, default=1.0)
    p.add_argument("--autoscaler-window-ms", type=float, default=60_000.0)
    p.add_argument("--warmup-ms", type=float, default=0.0)
    p.add_argument("--out", default="result.json")
    p.add_argument("--csv", default=None, help="per-request CSV (default: next to --out)")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("analyze", help="compare an ON and an OFF run")
    p.add_argument("--on", required=True, help="sim result JSON or loadgen CSV")
    p.add_argument("--off", required=True)
    p.add_argument("--slo", type=float, required=True)
    p.add_argument("--warmup-ms", type=float, default=0.0)
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("characterize", help="relative response time per batch size")
    _model_args(p)
    p.add_argument("--url", help="time a live /predict endpoint instead of the model")
    p.add_argument("--bs", default="1,2,4,8,16")
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="char.csv")
    p.set_defaults(func=cmd_characterize)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
