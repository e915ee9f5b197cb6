"""FTP decoy engine: login flows, activation events, bait files, wire subset."""

import socket

import pytest

from agentsnare.ftp import (
    BANNER,
    DecoyFtpBackend,
    FtpServer,
    FtpSession,
    FtpState,
    TarpitFtpBackend,
    banner,
)
from agentsnare.payload import (
    Concealment,
    CounterstrikeObjective,
    EventKind,
    build_payload,
    default_trigger_pool,
)
from agentsnare.tarpit import TarpitConfig

OBJECTIVE = CounterstrikeObjective("10.128.118.144", 8332, 4004)
PAYLOAD = build_payload(OBJECTIVE, default_trigger_pool()[1], Concealment.ANSI)


def armed_session(events_out=None):
    def provider(event):
        if events_out is not None:
            events_out.append(event)
        return PAYLOAD

    backend = DecoyFtpBackend("ftp-decoy", provider=provider)
    return FtpSession(backend, "s1", "10.0.0.5:50000")


def plain_session():
    backend = DecoyFtpBackend("ftp-decoy", provider=None)
    return FtpSession(backend, "s1", "10.0.0.5:50000")


def login(session, user=b"anonymous", password=b"x"):
    session.handle_command(b"USER " + user)
    return session.handle_command(b"PASS " + password)


# ---------------------------------------------------------------------------
# Banner
# ---------------------------------------------------------------------------

def test_banner_mimics_stock_server():
    assert banner() == b"220 (vsFTPd 3.0.3)\r\n"


def test_banner_idempotent():
    assert banner() == banner() == BANNER


def test_banner_length():
    # "220 (vsFTPd 3.0.3)" is 18 bytes; CRLF brings the line to 20.
    assert len(banner()) == 20


# ---------------------------------------------------------------------------
# Login flow
# ---------------------------------------------------------------------------

def test_user_anonymous_asks_for_password():
    session = armed_session()
    result = session.handle_command(b"USER anonymous\r\n")
    assert result.reply_blob == b"331 Please specify the password.\r\n"
    assert session.state is FtpState.AWAITING_PASS


def test_anonymous_login_injects_and_fires_once():
    events = []
    session = armed_session(events)
    result = login(session)
    blob = result.reply_blob
    assert blob.startswith(b"230 Login successful.")
    assert b"\x1b[8m" in blob and blob.endswith(b"\r\n")
    assert [e.kind for e in result.events] == [EventKind.FTP_ANONYMOUS_LOGIN]
    assert len(events) == 1
    assert session.state is FtpState.AUTHENTICATED


def test_replayed_login_succeeds_without_new_events():
    # Replay a scripted transcript through the handler and count events.
    events = []
    session = armed_session(events)
    first = login(session)
    second = login(session)
    assert second.reply_blob.startswith(b"230 Login successful.")
    assert second.reply_blob == first.reply_blob
    assert second.events == []
    assert len(events) == 1


def test_unarmed_login_is_clean():
    session = plain_session()
    result = login(session)
    assert result.reply_blob == b"230 Login successful.\r\n"
    assert [e.kind for e in result.events] == [EventKind.FTP_ANONYMOUS_LOGIN]


def test_pass_before_user_rejected():
    session = armed_session()
    result = session.handle_command(b"PASS x")
    assert result.reply_blob == b"503 Login with USER first.\r\n"


def test_non_anonymous_login_rejected_without_payload_bytes():
    session = armed_session()
    result = login(session, user=b"admin", password=b"admin")
    assert result.reply_blob == b"530 Login incorrect.\r\n"
    assert b"\x1b" not in result.reply_blob
    assert result.events == []
    assert session.state is FtpState.AWAITING_USER


def test_unknown_command_pre_auth():
    session = armed_session()
    result = session.handle_command(b"NOOP")
    assert result.reply_blob == b"502 Command not implemented.\r\n"
    assert result.events == []


def test_unknown_command_post_auth():
    session = armed_session()
    login(session)
    assert session.handle_command(b"STOR x").reply_blob == b"502 Command not implemented.\r\n"


def test_commands_gated_before_auth():
    for verb in (b"SYST", b"TYPE I", b"PWD", b"CWD x", b"PORT 1,2,3,4,5,6",
                 b"PASV", b"LIST", b"RETR f"):
        session = armed_session()
        result = session.handle_command(verb)
        assert result.reply_blob.startswith(b"530 Please login"), verb


def test_overlong_line_rejected():
    session = armed_session()
    result = session.handle_command(b"USER " + b"a" * 600)
    assert result.reply_blob.startswith(b"500 ")


def test_syst_and_quit():
    session = armed_session()
    login(session)
    assert session.handle_command(b"SYST").reply_blob == b"215 UNIX Type: L8\r\n"
    result = session.handle_command(b"QUIT")
    assert result.reply_blob == b"221 Goodbye.\r\n"
    assert result.closed


def test_payload_reply_line_respects_framing_budget():
    session = armed_session()
    result = login(session)
    assert len(result.reply_blob) <= 1024 + 64


# ---------------------------------------------------------------------------
# Listing and retrieval
# ---------------------------------------------------------------------------

def test_list_requires_data_mode():
    session = armed_session()
    login(session)
    assert session.handle_command(b"LIST").reply_blob == b"425 Use PORT or PASV first.\r\n"


def test_list_renders_bait_entries():
    session = armed_session()
    login(session)
    session.handle_command(b"PASV")
    result = session.handle_command(b"LIST")
    assert result.pre == [b"150 Here comes the directory listing\r\n"]
    assert result.post == [b"226 Directory send OK\r\n"]
    listing = result.data.decode()
    assert "backup.tar.gz" in listing and "credentials.txt" in listing
    lines = listing.strip().split("\r\n")
    assert len(lines) == 4
    for line in lines:
        assert line.startswith(("drwxr-xr-x 1 root group 4096 ", "-rw-r--r-- 1 root group "))


def test_retr_fake_file_serves_payload_and_fires_fallback_event():
    events = []
    session = armed_session(events)
    login(session)
    session.handle_command(b"PASV")
    result = session.handle_command(b"RETR credentials.txt")
    assert result.pre[0].startswith(b"150 Opening BINARY mode data connection")
    assert b"\x1b[8m" in result.data
    assert [e.kind for e in result.events] == [EventKind.FTP_FAKE_RETR]
    # Same-session repeat stays silent.
    session.handle_command(b"PASV")
    again = session.handle_command(b"RETR credentials.txt")
    assert again.events == []
    assert [e.kind for e in events] == [EventKind.FTP_ANONYMOUS_LOGIN, EventKind.FTP_FAKE_RETR]


def test_retr_unknown_file_fails():
    session = armed_session()
    login(session)
    session.handle_command(b"PASV")
    result = session.handle_command(b"RETR nope.bin")
    assert result.reply_blob == b"550 Failed to open file.\r\n"
    assert result.events == []


def test_cwd_into_bait_dir_and_back():
    session = armed_session()
    login(session)
    assert session.handle_command(b"CWD db_exports").reply_blob.startswith(b"250 ")
    assert session.handle_command(b"PWD").reply_blob == b'257 "/db_exports" is the current directory\r\n'
    assert session.handle_command(b"CWD nowhere").reply_blob == b"550 Failed to change directory.\r\n"


def test_port_command_parsing():
    session = armed_session()
    login(session)
    ok = session.handle_command(b"PORT 127,0,0,1,31,144")
    assert ok.reply_blob == b"200 PORT command successful.\r\n"
    bad = session.handle_command(b"PORT 1,2,3")
    assert bad.reply_blob.startswith(b"500 ")


# ---------------------------------------------------------------------------
# Tarpit backend behind the same engine
# ---------------------------------------------------------------------------

def tarpit_session():
    cfg = TarpitConfig(seed=7, branching=3, username="svc_user")
    return FtpSession(TarpitFtpBackend(cfg), "t1", "10.0.0.5:50001"), cfg


def test_tarpit_accepts_only_advertised_user():
    session, _ = tarpit_session()
    refused = login(session, user=b"anonymous")
    assert refused.reply_blob == b"530 Login incorrect.\r\n"
    accepted = login(session, user=b"svc_user", password=b"anything")
    assert accepted.reply_blob == b"230 Login successful.\r\n"


def test_tarpit_listing_reinjects_every_time():
    session, cfg = tarpit_session()
    login(session, user=b"svc_user")
    for _ in range(3):
        session.handle_command(b"PASV")
        result = session.handle_command(b"LIST")
        assert result.post[0].startswith(b"226 Directory send OK \x1b[8m")
        assert [e.kind for e in result.events] == [EventKind.TARPIT_LISTING]


def test_tarpit_cwd_validates_against_generated_tree():
    session, cfg = tarpit_session()
    login(session, user=b"svc_user")
    session.handle_command(b"PASV")
    listing = session.handle_command(b"LIST").data.decode()
    first = listing.split("\r\n")[0].split()[-1]
    assert session.handle_command(f"CWD {first}".encode()).reply_blob.startswith(b"250 ")
    foreign = session.handle_command(b"CWD not_generated_at_all")
    assert foreign.reply_blob == b"550 Failed to change directory.\r\n"
    assert session.handle_command(b"CWD ..").reply_blob.startswith(b"250 ")
    assert session.cwd == ()


def test_tarpit_retr_denied_without_file_bait():
    session, _ = tarpit_session()
    login(session, user=b"svc_user")
    session.handle_command(b"PASV")
    result = session.handle_command(b"RETR anything.txt")
    assert result.reply_blob == b"550 Failed to open file.\r\n"


# ---------------------------------------------------------------------------
# Socket-level server
# ---------------------------------------------------------------------------

class LineClient:
    def __init__(self, port):
        self.sock = socket.create_connection(("127.0.0.1", port), timeout=5.0)
        self.buf = b""

    def line(self):
        while b"\n" not in self.buf:
            chunk = self.sock.recv(4096)
            if not chunk:
                raise AssertionError("server closed early")
            self.buf += chunk
        line, self.buf = self.buf.split(b"\n", 1)
        return line + b"\n"

    def send(self, data):
        self.sock.sendall(data)

    def close(self):
        self.sock.close()


@pytest.fixture()
def ftp_server():
    events = []

    def provider(event):
        events.append(event)
        return PAYLOAD

    backend = DecoyFtpBackend("ftp-decoy", provider=provider)
    server = FtpServer("127.0.0.1", 0, backend_factory=lambda: backend).start()
    yield server, events
    server.stop()


def test_server_session_over_tcp(ftp_server):
    server, events = ftp_server
    client = LineClient(server.port)
    assert client.line() == b"220 (vsFTPd 3.0.3)\r\n"
    client.send(b"USER anonymous\r\n")
    assert client.line() == b"331 Please specify the password.\r\n"
    client.send(b"PASS probe@\r\n")
    reply = client.line()
    assert reply.startswith(b"230 Login successful.") and b"\x1b[8m" in reply
    # Fetch the bait listing over a passive data connection.
    client.send(b"PASV\r\n")
    pasv = client.line().decode()
    nums = pasv[pasv.index("(") + 1:pasv.index(")")].split(",")
    data = socket.create_connection(
        (".".join(nums[:4]), int(nums[4]) * 256 + int(nums[5])), timeout=5.0)
    client.send(b"LIST\r\n")
    assert client.line() == b"150 Here comes the directory listing\r\n"
    listing = b""
    while True:
        chunk = data.recv(4096)
        if not chunk:
            break
        listing += chunk
    data.close()
    assert b"credentials.txt" in listing
    assert client.line() == b"226 Directory send OK\r\n"
    client.send(b"QUIT\r\n")
    assert client.line() == b"221 Goodbye.\r\n"
    client.close()
    assert [e.kind for e in events] == [EventKind.FTP_ANONYMOUS_LOGIN]


def test_server_active_mode_transfer(ftp_server):
    # Classic ftp clients default to active mode: the server dials back
    # into the client's advertised data socket.
    server, _ = ftp_server
    client = LineClient(server.port)
    client.line()
    client.send(b"USER anonymous\r\nPASS x\r\n")
    client.line()
    client.line()
    data_listener = socket.socket()
    data_listener.bind(("127.0.0.1", 0))
    data_listener.listen(1)
    data_listener.settimeout(5.0)
    port = data_listener.getsockname()[1]
    client.send(f"PORT 127,0,0,1,{port // 256},{port % 256}\r\n".encode())
    assert client.line() == b"200 PORT command successful.\r\n"
    client.send(b"LIST\r\n")
    assert client.line() == b"150 Here comes the directory listing\r\n"
    conn, _ = data_listener.accept()
    listing = b""
    while True:
        chunk = conn.recv(4096)
        if not chunk:
            break
        listing += chunk
    conn.close()
    data_listener.close()
    assert b"backup.tar.gz" in listing
    assert client.line() == b"226 Directory send OK\r\n"
    client.close()


def test_server_sessions_isolated(ftp_server):
    server, events = ftp_server
    for _ in range(2):
        client = LineClient(server.port)
        client.line()
        client.send(b"USER anonymous\r\nPASS x\r\n")
        client.line()
        assert client.line().startswith(b"230 ")
        client.close()
    assert len(events) == 2  # one activation per session, not per process
