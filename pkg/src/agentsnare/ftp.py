"""Deliberately misconfigured FTP service and its tarpit twin.

The control-channel engine is socket-free: a session consumes command
lines and yields reply lines, data-channel bodies, and activation events,
so the protocol logic tests without networking. The thin threaded server
at the bottom moves bytes. Only the eleven commands an automated client
actually uses are implemented; everything else gets a 502, which keeps
the escape surface small.
"""

from __future__ import annotations

import enum
import itertools
import logging
import socket
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import tarpit as tarpit_mod
from .payload import ActivationEvent, EventKind, Payload

logger = logging.getLogger(__name__)

BANNER = b"220 (vsFTPd 3.0.3)\r\n"
MAX_LINE_BYTES = 512

PayloadProvider = Callable[[ActivationEvent], Optional[Payload]]


def banner() -> bytes:
    """Greeting sent on connect; mimics a common stock server."""
    return BANNER


class FtpState(enum.Enum):
    AWAITING_USER = "awaiting_user"
    AWAITING_PASS = "awaiting_pass"
    AUTHENTICATED = "authenticated"


class DataMode(enum.Enum):
    NONE = "none"
    PORT = "port"
    PASV = "pasv"


@dataclass
class CommandResult:
    """What one command produced: control lines around an optional data body."""

    pre: list[bytes] = field(default_factory=list)
    data: bytes | None = None
    post: list[bytes] = field(default_factory=list)
    events: list[ActivationEvent] = field(default_factory=list)
    closed: bool = False

    @property
    def replies(self) -> list[bytes]:
        return self.pre + self.post

    @property
    def reply_blob(self) -> bytes:
        return b"".join(self.replies)


class NullDataChannel:
    """Stand-in channel for engine-only use; never moves real bytes."""

    def open_passive(self) -> tuple[str, int]:
        return ("127.0.0.1", 0)

    def set_active(self, host: str, port: int) -> None:
        pass

    def close(self) -> None:
        pass


class FtpSession:
    """One control-channel session: state machine plus command dispatch."""

    def __init__(self, backend, session_id: str, peer_addr: str, data_channel=None):
        self.backend = backend
        self.session_id = session_id
        self.peer_addr = peer_addr
        self.data_channel = data_channel or NullDataChannel()
        self.state = FtpState.AWAITING_USER
        self.username = ""
        self.data_mode = DataMode.NONE
        self.cwd: tuple[str, ...] = ()
        self.fired: set[EventKind] = set()
        self.cached_payload: Payload | None = None

    # -- helpers -----------------------------------------------------------

    def fire_once(self, kind: EventKind) -> ActivationEvent | None:
        """Build the event unless this session already fired this kind."""
        if kind in self.fired:
            return None
        self.fired.add(kind)
        return ActivationEvent.now(self.backend.decoy_id, self.session_id, kind, self.peer_addr)

    # -- dispatch ----------------------------------------------------------

    def handle_command(self, line: bytes) -> CommandResult:
        line = line.rstrip(b"\r\n")
        if len(line) > MAX_LINE_BYTES:
            return CommandResult(pre=[b"500 Input line too long.\r\n"])
        try:
            text = line.decode("utf-8", errors="replace")
        except Exception:
            return CommandResult(pre=[b"500 Unknown command.\r\n"])
        verb, _, arg = text.partition(" ")
        verb = verb.strip().upper()
        arg = arg.strip()

        if verb == "USER":
            return self._cmd_user(arg)
        if verb == "PASS":
            return self._cmd_pass(arg)
        if verb == "QUIT":
            return CommandResult(pre=[b"221 Goodbye.\r\n"], closed=True)

        if verb in ("SYST", "TYPE", "PWD", "CWD", "PORT", "PASV", "LIST", "RETR"):
            if self.state is not FtpState.AUTHENTICATED:
                return CommandResult(pre=[b"530 Please login with USER and PASS.\r\n"])
            handler = getattr(self, f"_cmd_{verb.lower()}")
            return handler(arg)

        return CommandResult(pre=[b"502 Command not implemented.\r\n"])

    # -- authentication ----------------------------------------------------

    def _cmd_user(self, arg: str) -> CommandResult:
        self.username = arg
        self.state = FtpState.AWAITING_PASS
        return CommandResult(pre=[b"331 Please specify the password.\r\n"])

    def _cmd_pass(self, arg: str) -> CommandResult:
        if self.state is not FtpState.AWAITING_PASS:
            return CommandResult(pre=[b"503 Login with USER first.\r\n"])
        if not self.backend.login_ok(self.username):
            self.state = FtpState.AWAITING_USER
            return CommandResult(pre=[b"530 Login incorrect.\r\n"])
        self.state = FtpState.AUTHENTICATED
        reply, events = self.backend.login_reply(self)
        return CommandResult(pre=[reply], events=events)

    # -- simple commands ----------------------------------------------------

    def _cmd_syst(self, arg: str) -> CommandResult:
        return CommandResult(pre=[b"215 UNIX Type: L8\r\n"])

    def _cmd_type(self, arg: str) -> CommandResult:
        mode = "Binary" if arg.upper() in ("I", "L 8", "L8", "") else "ASCII"
        return CommandResult(pre=[f"200 Switching to {mode} mode.\r\n".encode()])

    def _cmd_pwd(self, arg: str) -> CommandResult:
        path = "/" + "/".join(self.cwd)
        return CommandResult(pre=[f'257 "{path}" is the current directory\r\n'.encode()])

    def _cmd_cwd(self, arg: str) -> CommandResult:
        if self.backend.change_dir(self, arg):
            return CommandResult(pre=[b"250 Directory successfully changed.\r\n"])
        return CommandResult(pre=[b"550 Failed to change directory.\r\n"])

    def _cmd_port(self, arg: str) -> CommandResult:
        parts = arg.split(",")
        if len(parts) != 6:
            return CommandResult(pre=[b"500 Illegal PORT command.\r\n"])
        try:
            nums = [int(p) for p in parts]
            host = ".".join(str(n) for n in nums[:4])
            port = nums[4] * 256 + nums[5]
        except ValueError:
            return CommandResult(pre=[b"500 Illegal PORT command.\r\n"])
        self.data_channel.set_active(host, port)
        self.data_mode = DataMode.PORT
        return CommandResult(pre=[b"200 PORT command successful.\r\n"])

    def _cmd_pasv(self, arg: str) -> CommandResult:
        host, port = self.data_channel.open_passive()
        self.data_mode = DataMode.PASV
        h = host.replace(".", ",")
        return CommandResult(
            pre=[f"227 Entering Passive Mode ({h},{port // 256},{port % 256}).\r\n".encode()]
        )

    # -- transfers -----------------------------------------------------------

    def _cmd_list(self, arg: str) -> CommandResult:
        if self.data_mode is DataMode.NONE:
            return CommandResult(pre=[b"425 Use PORT or PASV first.\r\n"])
        data, closing, events = self.backend.list_dir(self)
        self.data_mode = DataMode.NONE
        return CommandResult(
            pre=[b"150 Here comes the directory listing\r\n"],
            data=data,
            post=[closing],
            events=events,
        )

    def _cmd_retr(self, arg: str) -> CommandResult:
        if self.data_mode is DataMode.NONE:
            return CommandResult(pre=[b"425 Use PORT or PASV first.\r\n"])
        self.data_mode = DataMode.NONE
        content, events = self.backend.retrieve(self, arg)
        if content is None:
            return CommandResult(pre=[b"550 Failed to open file.\r\n"], events=events)
        return CommandResult(
            pre=[f"150 Opening BINARY mode data connection for {arg} ({len(content)} bytes).\r\n".encode()],
            data=content,
            post=[b"226 Transfer complete.\r\n"],
            events=events,
        )


# ---------------------------------------------------------------------------
# Decoy backend: anonymous login bait with a static directory of lures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BaitEntry:
    name: str
    is_dir: bool
    size: int
    date: str


DEFAULT_BAIT_LISTING = (
    BaitEntry("backup.tar.gz", False, 112640, "Mar 11 09:42"),
    BaitEntry("credentials.txt", False, 812, "Jun 02 17:05"),
    BaitEntry("db_exports", True, 4096, "Jan 22 04:13"),
    BaitEntry("maintenance_notes.txt", False, 2381, "Feb 07 12:56"),
)


def render_bait_line(entry: BaitEntry) -> str:
    if entry.is_dir:
        return f"drwxr-xr-x 1 root group 4096 {entry.date} {entry.name}"
    return f"-rw-r--r-- 1 root group {entry.size} {entry.date} {entry.name}"


class DecoyFtpBackend:
    """Anonymous-login FTP decoy.

    The only planted vulnerability is anonymous access; any other login
    fails, and those sessions never see a single payload byte. On the
    first anonymous login the payload rides the 230 line; a grab of one
    of the fake files is the fallback activation.
    """

    def __init__(self, decoy_id: str = "ftp-decoy",
                 provider: PayloadProvider | None = None,
                 listing: tuple[BaitEntry, ...] = DEFAULT_BAIT_LISTING):
        self.decoy_id = decoy_id
        self.provider = provider
        self.listing = listing

    def login_ok(self, username: str) -> bool:
        return username.lower() == "anonymous"

    def _payload_for(self, session: FtpSession, event: ActivationEvent | None) -> Payload | None:
        # Every fired event reaches the manager, even when the session is
        # already armed; the manager's arming is idempotent per session.
        if event is not None and self.provider is not None:
            payload = self.provider(event)
            if session.cached_payload is None:
                session.cached_payload = payload
        return session.cached_payload

    def login_reply(self, session: FtpSession) -> tuple[bytes, list[ActivationEvent]]:
        event = session.fire_once(EventKind.FTP_ANONYMOUS_LOGIN)
        payload = self._payload_for(session, event)
        if payload is not None:
            reply = f"230 Login successful. {payload.assembled}\r\n".encode()
        else:
            reply = b"230 Login successful.\r\n"
        return reply, [event] if event else []

    def change_dir(self, session: FtpSession, arg: str) -> bool:
        if arg in ("/", "", "."):
            session.cwd = ()
            return True
        name = arg.strip("/")
        for entry in self.listing:
            if entry.is_dir and entry.name == name:
                session.cwd = (name,)
                return True
        return False

    def list_dir(self, session: FtpSession) -> tuple[bytes, bytes, list[ActivationEvent]]:
        if session.cwd:
            data = b""  # bait subdirectories are empty
        else:
            data = ("\r\n".join(render_bait_line(e) for e in self.listing) + "\r\n").encode()
        return data, b"226 Directory send OK\r\n", []

    def retrieve(self, session: FtpSession, name: str) -> tuple[bytes | None, list[ActivationEvent]]:
        wanted = name.strip("/")
        if not any(e.name == wanted and not e.is_dir for e in self.listing):
            return None, []
        event = session.fire_once(EventKind.FTP_FAKE_RETR)
        payload = self._payload_for(session, event)
        if payload is not None:
            content = (payload.assembled + "\n").encode()
        else:
            content = b"-- corrupted archive segment --\n"
        return content, [event] if event else []


# ---------------------------------------------------------------------------
# Tarpit backend: the infinite tree behind the same wire subset
# ---------------------------------------------------------------------------

class TarpitFtpBackend:
    """FTP front-end over the endless fake filesystem.

    Accepts only the advertised username (any password), navigation and
    listing work, and every listing closes with the hidden re-injection.
    Nothing is downloadable unless file bait is explicitly enabled.
    """

    def __init__(self, cfg: tarpit_mod.TarpitConfig, decoy_id: str = "tarpit",
                 event_sink: Callable[[ActivationEvent], object] | None = None):
        self.cfg = cfg
        self.decoy_id = decoy_id
        self.event_sink = event_sink

    def login_ok(self, username: str) -> bool:
        return username == self.cfg.username

    def login_reply(self, session: FtpSession) -> tuple[bytes, list[ActivationEvent]]:
        return b"230 Login successful.\r\n", []

    def change_dir(self, session: FtpSession, arg: str) -> bool:
        if arg in ("/", ""):
            session.cwd = ()
            return True
        path = list(session.cwd)
        if arg.startswith("/"):
            path = []
        for part in arg.strip("/").split("/"):
            if part in ("", "."):
                continue
            if part == "..":
                if path:
                    path.pop()
                continue
            if not tarpit_mod.is_child(self.cfg, tuple(path), part):
                return False
            path.append(part)
        session.cwd = tuple(path)
        return True

    def list_dir(self, session: FtpSession) -> tuple[bytes, bytes, list[ActivationEvent]]:
        data = tarpit_mod.listing_block(self.cfg, session.cwd)
        event = ActivationEvent.now(self.decoy_id, session.session_id,
                                    EventKind.TARPIT_LISTING, session.peer_addr)
        if self.event_sink is not None:
            self.event_sink(event)
        return data, tarpit_mod.closing_reply(self.cfg), [event]

    def retrieve(self, session: FtpSession, name: str) -> tuple[bytes | None, list[ActivationEvent]]:
        if self.cfg.fake_files:
            for fname, _date, _size in tarpit_mod.fake_file_entries(self.cfg, session.cwd):
                if fname == name:
                    return tarpit_mod.fake_file_content(self.cfg, session.cwd, name), []
        return None, []


# ---------------------------------------------------------------------------
# Threaded TCP server
# ---------------------------------------------------------------------------

class SocketDataChannel:
    """Real data connection for one session: one transfer, then closed.

    Passive ports come from the optional allocator (reproducible runs
    draw them from a seeded range) or from the OS when none is given.
    """

    def __init__(self, host: str, port_allocator: Callable[[], int] | None = None):
        self.host = host
        self.port_allocator = port_allocator
        self._listener: socket.socket | None = None
        self._active: tuple[str, int] | None = None

    def open_passive(self) -> tuple[str, int]:
        self.close()
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        if self.port_allocator is None:
            listener.bind((self.host, 0))
        else:
            for _ in range(32):
                try:
                    listener.bind((self.host, self.port_allocator()))
                    break
                except OSError:
                    continue
            else:
                listener.bind((self.host, 0))
        listener.listen(1)
        listener.settimeout(10.0)
        self._listener = listener
        return listener.getsockname()[:2]

    def set_active(self, host: str, port: int) -> None:
        self.close()
        self._active = (host, port)

    def deliver(self, data: bytes) -> bool:
        """Push one transfer over whichever mode is armed."""
        try:
            if self._listener is not None:
                conn, _ = self._listener.accept()
            elif self._active is not None:
                conn = socket.create_connection(self._active, timeout=10.0)
            else:
                return False
            try:
                conn.sendall(data)
            finally:
                conn.close()
            return True
        except OSError as exc:
            logger.debug("data channel delivery failed: %s", exc)
            return False
        finally:
            self.close()

    def close(self) -> None:
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
            self._listener = None
        self._active = None


class FtpServer:
    """Accept loop binding the session engine to real sockets."""

    _ids = itertools.count(1)

    def __init__(self, host: str, port: int, backend_factory: Callable[[], object],
                 name: str = "ftp", data_port_allocator: Callable[[], int] | None = None):
        self.host = host
        self.name = name
        self.backend_factory = backend_factory
        self.data_port_allocator = data_port_allocator
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self.port = self._sock.getsockname()[1]
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> "FtpServer":
        self._sock.listen(16)
        self._sock.settimeout(0.2)
        self._thread = threading.Thread(target=self._accept_loop,
                                        name=f"{self.name}-accept", daemon=True)
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._serve, args=(conn, addr), daemon=True).start()

    def _serve(self, conn: socket.socket, addr) -> None:
        session_id = f"{self.name}-{next(self._ids)}"
        channel = SocketDataChannel(self.host, self.data_port_allocator)
        session = FtpSession(self.backend_factory(), session_id,
                             f"{addr[0]}:{addr[1]}", data_channel=channel)
        conn.settimeout(30.0)
        buf = b""
        try:
            conn.sendall(banner())
            while not self._stop.is_set():
                if b"\n" not in buf:
                    chunk = conn.recv(4096)
                    if not chunk:
                        break
                    buf += chunk
                    continue
                line, buf = buf.split(b"\n", 1)
                result = session.handle_command(line)
                for reply in result.pre:
                    conn.sendall(reply)
                if result.data is not None:
                    channel.deliver(result.data)
                for reply in result.post:
                    conn.sendall(reply)
                if result.closed:
                    break
        except OSError as exc:
            logger.debug("%s session %s dropped: %s", self.name, session_id, exc)
        finally:
            channel.close()
            try:
                conn.close()
            except OSError:
                pass

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        if self._thread is not None:
            self._thread.join(timeout=2.0)
