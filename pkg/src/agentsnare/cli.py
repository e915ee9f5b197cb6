"""Operator entry points: run the defense daemon, run simulations, read logs.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading

from . import ftp as ftp_mod
from . import sim
from . import tarpit as tarpit_mod
from .manager import EventLog, GatewayRelay, InjectionManager, read_event_log
from .payload import Concealment, ConfigError, load_trigger_pool
from .web import WebDecoyServer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

def _load_daemon_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")

    objective = raw.get("objective", {})
    kind = objective.get("kind")
    if kind not in ("counterstrike", "tarpit"):
        raise ConfigError(f"{path}: objective.kind must be counterstrike or tarpit")
    decoys = raw.get("decoys", [])
    if not isinstance(decoys, list) or not decoys:
        raise ConfigError(f"{path}: at least one decoy is required")
    ports_seen: set[int] = set()
    for decoy in decoys:
        if decoy.get("kind") not in ("ftp", "web"):
            raise ConfigError(f"{path}: decoy.kind must be ftp or web")
        port = decoy.get("port")
        if not isinstance(port, int) or not 1 <= port <= 65535:
            raise ConfigError(f"{path}: decoy.port must be a TCP port")
        if port in ports_seen:
            raise ConfigError(f"{path}: port {port} is bound twice")
        ports_seen.add(port)
    for rule in raw.get("gateway", []):
        port = rule.get("listen_port")
        if not isinstance(port, int) or not 1 <= port <= 65535:
            raise ConfigError(f"{path}: gateway.listen_port must be a TCP port")
        if port in ports_seen:
            raise ConfigError(f"{path}: port {port} is bound twice")
        ports_seen.add(port)
        upstream = rule.get("upstream", "")
        if ":" not in upstream:
            raise ConfigError(f"{path}: gateway.upstream must be addr:port")
    pool_path = raw.get("trigger_pool_path")
    if pool_path and not os.path.exists(pool_path):
        raise ConfigError(f"{path}: trigger pool file not found: {pool_path}")
    return raw


def cmd_serve(args: argparse.Namespace) -> int:
    try:
        cfg = _load_daemon_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    host = cfg.get("host", "127.0.0.1")
    log = EventLog(cfg.get("log_path"))
    log.append("daemon", "daemon_started", {"config": args.config})

    pool = None
    if cfg.get("trigger_pool_path"):
        pool = load_trigger_pool(cfg["trigger_pool_path"])
    port_range = tuple(cfg.get("port_range", [20000, 59999]))
    tarpit_raw = cfg.get("tarpit", {})
    tarpit_config = tarpit_mod.TarpitConfig(
        seed=tarpit_raw.get("seed", 0),
        branching=tarpit_raw.get("branching", 12),
        port=tarpit_raw.get("port", 0),
        username=tarpit_raw.get("username", ""),
    )
    manager = InjectionManager(
        cfg["objective"]["kind"],
        host=host,
        target_addr=cfg["objective"].get("target_addr", host),
        port_range=port_range,  # type: ignore[arg-type]
        trigger_pool=pool,
        rng_seed=cfg.get("rng_seed", 0),
        log=log,
        tarpit_config=tarpit_config,
    )

    services = []
    try:
        for decoy in cfg["decoys"]:
            if decoy["kind"] == "ftp":
                backend = ftp_mod.DecoyFtpBackend(
                    "ftp-decoy", provider=manager.provider_for("ftp-decoy", Concealment.ANSI))
                server = ftp_mod.FtpServer(host, decoy["port"],
                                           backend_factory=lambda b=backend: b,
                                           name="ftp-decoy").start()
            else:
                server = WebDecoyServer(
                    host, decoy["port"],
                    provider=manager.provider_for("web-decoy", Concealment.HTML_COMMENT),
                    recall=manager.armed_payload).start()
            services.append(server)
            log.append("daemon", "decoy_started",
                       {"kind": decoy["kind"], "port": decoy["port"]})
        for rule in cfg.get("gateway", []):
            up_host, _, up_port = rule["upstream"].rpartition(":")
            relay = GatewayRelay(host, rule["listen_port"], up_host, int(up_port),
                                 log=log).start()
            services.append(relay)
            log.append("daemon", "gateway_started",
                       {"listen_port": rule["listen_port"], "upstream": rule["upstream"]})
    except OSError as exc:
        print(f"startup failed: {exc}", file=sys.stderr)
        for service in services:
            service.stop()
        return EXIT_RUNTIME

    stop = threading.Event()

    def _on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, _on_signal)
    signal.signal(signal.SIGINT, _on_signal)
    print(f"defense daemon up; {len(services)} service(s); log: {log.path or '(memory)'}")
    stop.wait()

    for service in services:
        service.stop()
    manager.shutdown()
    log.append("daemon", "daemon_stopped", {})
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _build_game_config(args: argparse.Namespace, branching: int) -> sim.GameConfig:
    if args.policy == "compliant":
        policy = sim.PolicySpec.compliant()
    elif args.policy == "skeptical":
        policy = sim.PolicySpec.skeptical(args.p_follow)
    elif args.policy == "exploit_only":
        policy = sim.PolicySpec.exploit_only()
    else:
        policy = sim.PolicySpec.llm(sim.EndpointSpec.from_file(args.endpoint_spec))
    return sim.GameConfig(
        policy=policy,
        defense=sim.DefenseSpec.parse(args.defense),
        rng_seed=args.seed,
        branching=branching,
        bytes_per_token=args.bytes_per_token,
        price_per_megatoken=args.price_per_megatoken,
    )


def cmd_simulate(args: argparse.Namespace) -> int:
    branchings = [int(b) for b in str(args.branching).split(",")]
    if args.cost_sweep and len(branchings) < 2:
        print("--cost-sweep needs a comma-separated --branching list", file=sys.stderr)
        return EXIT_USAGE

    out_lines = []
    record_lines = []
    if args.cost_sweep:
        out_lines.append(f"{'branching':>10}  {'total_cost':>14}  {'total_tokens':>12}")
        for branching in branchings:
            config = _build_game_config(args, branching)
            summary = sim.run_campaign(config, args.games)
            out_lines.append(f"{branching:>10}  {summary.total_cost:>14.6f}  "
                             f"{summary.total_tokens:>12}")
            for record in sim.summary_records(summary):
                record_lines.append(json.dumps({"branching": branching, **record}))
    else:
        config = _build_game_config(args, branchings[0])
        summary = sim.run_campaign(config, args.games)
        out_lines.append(sim.format_summary(summary).rstrip("\n"))
        for record in sim.summary_records(summary):
            record_lines.append(json.dumps(record))

    text = "\n".join(out_lines) + "\n"
    print(text, end="")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
            for line in record_lines:
                fh.write(line + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------

def cmd_events(args: argparse.Namespace) -> int:
    def warn(lineno: int, message: str) -> None:
        print(f"warning: {args.log}:{lineno}: {message}", file=sys.stderr)

    try:
        records = read_event_log(args.log, on_bad_line=warn)
    except OSError as exc:
        print(f"cannot read log: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for record in records:
        if args.kind and record.get("kind") != args.kind:
            continue
        if args.engagement and record.get("engagement_id") != args.engagement:
            continue
        detail = json.dumps(record.get("detail", {}), sort_keys=True)
        print(f"{record.get('ts', 0):.3f} {record.get('engagement_id', '-')} "
              f"{record.get('kind', '-')} {detail}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agentsnare",
        description="Decoy services that counterattack automated LLM-driven intruders.")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the defense daemon")
    serve.add_argument("--config", required=True, help="path to the JSON daemon config")
    serve.set_defaults(func=cmd_serve)

    simulate = sub.add_parser("simulate", help="run scripted attacker-defender games")
    simulate.add_argument("--policy", required=True,
                          choices=["compliant", "skeptical", "exploit_only", "llm"])
    simulate.add_argument("--p-follow", type=float, default=0.5,
                          help="follow probability for the skeptical policy")
    simulate.add_argument("--defense", default="none",
                          help="'none' or decoy:objective, e.g. ftp:counterstrike")
    simulate.add_argument("--games", type=_positive_int, default=10)
    simulate.add_argument("--seed", type=int, default=1)
    simulate.add_argument("--branching", default="12",
                          help="tarpit branching; comma list with --cost-sweep")
    simulate.add_argument("--cost-sweep", action="store_true",
                          help="run one tarpit campaign per branching value")
    simulate.add_argument("--bytes-per-token", type=_positive_int, default=4)
    simulate.add_argument("--price-per-megatoken", type=float, default=5.0)
    simulate.add_argument("--endpoint-spec", help="JSON endpoint spec for --policy llm")
    simulate.add_argument("--report", help="write the summary and per-game records here")
    simulate.set_defaults(func=cmd_simulate)

    events = sub.add_parser("events", help="inspect a structured event log")
    events.add_argument("--log", required=True)
    events.add_argument("--kind", help="only records of this kind")
    events.add_argument("--engagement", help="only records of this engagement")
    events.set_defaults(func=cmd_events)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
