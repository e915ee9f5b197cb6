"""SQL-injection-bait web login decoy.

The login page advertises its own weakness (a database error banner and a
GET form, both classic signs of missing input sanitization). There is no
real database: exploitation is detected by pattern-matching the decoded
credentials, so the decoy itself has zero injectable surface. Honest
logins get byte-identical responses whether or not a payload is armed.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qsl, urlsplit

from .payload import ActivationEvent, EventKind, Payload

logger = logging.getLogger(__name__)

DEFAULT_SERVER_STRING = "Apache/2.4.41 (Ubuntu)"

FRONT_PAGE_HTML = b"""<!DOCTYPE html>
<html>
<body>
<b1> Microsoft OLE DB Provider for SQL Server error '80040e14' </b1>
<b2> Unclosed quotation mark after the character string ' '. </b2>

<br>

<h2>Login</h2>
<form action="/login" method="GET">
  Username: <input name="username"><br><br>
  Password: <input name="password"><br><br>
 <input type="submit" value="Login">
</form>
</body>
</html>
"""

INVALID_NOTICE = b"<p>Invalid credentials.</p>\n"

# Tautology shapes that bypass a quoted WHERE clause. Matched against
# whitespace-collapsed, casefolded field values.
AUTH_BYPASS_PATTERNS = (
    "' or '1'='1",
    "' or 1=1",
    '" or ""="',
    '" or 1=1',
    "or 1=1--",
    "or 1=1 --",
    "') or ('1'='1",
    "admin'--",
    "admin' #",
    "' or 'a'='a",
    "' or true--",
)

# Enumeration probes of the kind sqlmap and hand-driven UNION walks emit.
DUMP_PROBE_PATTERNS = (
    "union select",
    "union all select",
    "order by 1",
    "order by 2",
    "order by 3",
    "group_concat(",
    "information_schema",
    "sleep(",
    "benchmark(",
    "waitfor delay",
    "pg_sleep(",
    "load_file(",
    "@@version",
)


class VerdictKind(enum.Enum):
    NONE = "none"
    AUTH_BYPASS = "auth_bypass"
    DUMP_PROBE = "dump_probe"


@dataclass(frozen=True)
class LoginRequest:
    username: str
    password: str
    raw_query: str
    peer_addr: str
    user_agent: str = ""


@dataclass(frozen=True)
class SqliVerdict:
    kind: VerdictKind
    matched_pattern: str = ""


@dataclass(frozen=True)
class HttpResponse:
    status: int
    body: bytes
    content_type: str = "text/html; charset=utf-8"


def _normalize(value: str) -> str:
    return " ".join(value.casefold().split())


def front_page() -> bytes:
    """The bait login page; clean of any payload bytes before activation."""
    return FRONT_PAGE_HTML


def classify_sqli(req: LoginRequest) -> SqliVerdict:
    """Decide whether a login attempt is a bypass, a dump probe, or honest.

    Classification is total: anything that matches no pattern (including
    XSS and other non-SQLi noise) is NONE.
    """
    fields = (_normalize(req.username), _normalize(req.password))
    for pattern in AUTH_BYPASS_PATTERNS:
        for value in fields:
            if pattern in value:
                return SqliVerdict(VerdictKind.AUTH_BYPASS, pattern)
    haystacks = fields + (_normalize(req.raw_query), _normalize(req.user_agent))
    for pattern in DUMP_PROBE_PATTERNS:
        for value in haystacks:
            if pattern in value:
                return SqliVerdict(VerdictKind.DUMP_PROBE, pattern)
    if "sqlmap" in _normalize(req.user_agent):
        return SqliVerdict(VerdictKind.DUMP_PROBE, "sqlmap")
    return SqliVerdict(VerdictKind.NONE)


def _welcome_page(payload: Optional[Payload]) -> bytes:
    comment = (payload.assembled + "\n") if payload else ""
    return (
        "<!DOCTYPE html>\n<html>\n<body>\n"
        "<h2>Welcome, admin</h2>\n"
        "<p>You have 3 unread system notifications.</p>\n"
        f"{comment}"
        "</body>\n</html>\n"
    ).encode()


def _dump_page(payload: Optional[Payload]) -> bytes:
    cell = payload.assembled if payload else "(0 rows)"
    return (
        "<!DOCTYPE html>\n<html>\n<body>\n"
        "<h2>users</h2>\n"
        "<table border=\"1\">\n"
        "<tr><th>id</th><th>record</th></tr>\n"
        f"<tr><td>1</td><td>{cell}</td></tr>\n"
        "</table>\n"
        "</body>\n</html>\n"
    ).encode()


def handle_login(
    req: LoginRequest,
    payload: Optional[Payload] = None,
) -> tuple[HttpResponse, list[ActivationEvent]]:
    """Route a /login request by verdict; payload only ever reaches exploiters."""
    verdict = classify_sqli(req)
    if verdict.kind is VerdictKind.AUTH_BYPASS:
        event = ActivationEvent.now("web-decoy", req.peer_addr,
                                    EventKind.WEB_SQLI_LOGIN_BYPASS, req.peer_addr)
        return HttpResponse(200, _welcome_page(payload)), [event]
    if verdict.kind is VerdictKind.DUMP_PROBE:
        event = ActivationEvent.now("web-decoy", req.peer_addr,
                                    EventKind.WEB_SQLI_DUMP, req.peer_addr)
        return HttpResponse(200, _dump_page(payload)), [event]
    return HttpResponse(200, front_page() + INVALID_NOTICE), []


def parse_login_query(query: str) -> tuple[str, str]:
    """Percent-decode the GET form fields exactly once; raise on junk input."""
    pairs = parse_qsl(query, keep_blank_values=True, strict_parsing=bool(query),
                      errors="strict")
    fields = dict(pairs)
    return fields.get("username", ""), fields.get("password", "")


class EventDeduper:
    """Per-peer, per-kind suppression window so one session logs each kind once."""

    def __init__(self, window: float = 600.0):
        self.window = window
        self._seen: dict[tuple[str, EventKind], float] = {}
        self._lock = threading.Lock()

    def admit(self, peer_ip: str, kind: EventKind) -> bool:
        now = time.monotonic()
        with self._lock:
            expiry = self._seen.get((peer_ip, kind))
            if expiry is not None and now < expiry:
                return False
            self._seen[(peer_ip, kind)] = now + self.window
            return True


class WebDecoyServer:
    """Threaded HTTP wrapper: GET / is the bait page, GET /login the trap."""

    def __init__(self, host: str, port: int, provider=None, recall=None,
                 decoy_id: str = "web-decoy",
                 server_string: str = DEFAULT_SERVER_STRING, dedup_window: float = 600.0):
        self.decoy_id = decoy_id
        self.provider = provider
        self.recall = recall
        self.deduper = EventDeduper(dedup_window)
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def version_string(self) -> str:
                return server_string

            def log_message(self, fmt, *args):
                logger.debug("web %s " + fmt, self.client_address[0], *args)

            def _send(self, resp: HttpResponse) -> None:
                self.send_response(resp.status)
                self.send_header("Content-Type", resp.content_type)
                self.send_header("Content-Length", str(len(resp.body)))
                self.end_headers()
                self.wfile.write(resp.body)

            def do_GET(self) -> None:
                parts = urlsplit(self.path)
                if parts.path == "/":
                    self._send(HttpResponse(200, front_page()))
                    return
                if parts.path == "/login":
                    outer._handle_login(self, parts.query)
                    return
                self._send(HttpResponse(404, b"<html><body>Not Found</body></html>\n"))

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self.port = self._server.server_address[1]
        self._thread: threading.Thread | None = None

    def _handle_login(self, handler, query: str) -> None:
        peer_ip = handler.client_address[0]
        try:
            username, password = parse_login_query(query)
        except (ValueError, UnicodeDecodeError):
            handler._send(HttpResponse(400, front_page()))
            return
        req = LoginRequest(username, password, query,
                           f"{peer_ip}:{handler.client_address[1]}",
                           handler.headers.get("User-Agent", ""))
        verdict = classify_sqli(req)
        payload = None
        if verdict.kind is not VerdictKind.NONE and self.provider is not None:
            kind = (EventKind.WEB_SQLI_LOGIN_BYPASS
                    if verdict.kind is VerdictKind.AUTH_BYPASS
                    else EventKind.WEB_SQLI_DUMP)
            if self.deduper.admit(peer_ip, kind):
                event = ActivationEvent.now(self.decoy_id, peer_ip, kind, req.peer_addr)
                payload = self.provider(event)
            elif self.recall is not None:
                # Replay inside the window: reuse the armed payload, emit nothing.
                payload = self.recall(self.decoy_id)
        resp, _events = handle_login(req, payload)
        handler._send(resp)

    def start(self) -> "WebDecoyServer":
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="web-decoy", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
