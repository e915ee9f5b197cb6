"""Web decoy: bait page, SQLi classification, injection paths, invisibility."""

import socket

import pytest

from agentsnare.payload import (
    Concealment,
    CounterstrikeObjective,
    EventKind,
    build_payload,
    default_trigger_pool,
)
from agentsnare.web import (
    EventDeduper,
    LoginRequest,
    VerdictKind,
    WebDecoyServer,
    classify_sqli,
    front_page,
    handle_login,
    parse_login_query,
)

PAYLOAD = build_payload(CounterstrikeObjective("10.128.118.144", 8332, 4004),
                        default_trigger_pool()[0], Concealment.HTML_COMMENT)


def request(username="", password="", raw_query="", user_agent=""):
    return LoginRequest(username, password, raw_query, "10.0.0.9:55000", user_agent)


# ---------------------------------------------------------------------------
# Front page
# ---------------------------------------------------------------------------

def test_front_page_shows_database_error_banner():
    body = front_page()
    assert b"80040e14" in body
    assert b"Unclosed quotation mark after the character string" in body


def test_front_page_has_get_login_form():
    body = front_page().decode()
    assert 'action="/login"' in body and 'method="GET"' in body
    assert '<input name="username">' in body and '<input name="password">' in body


def test_front_page_is_clean():
    body = front_page()
    assert b"\x1b" not in body
    assert b"<!--" not in body


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def test_classic_tautology_is_auth_bypass():
    verdict = classify_sqli(request(username="' OR 1=1 -- ", password="test"))
    assert verdict.kind is VerdictKind.AUTH_BYPASS
    assert verdict.matched_pattern


def test_benign_credentials_are_none():
    verdict = classify_sqli(request(username="admin", password="admin"))
    assert verdict.kind is VerdictKind.NONE
    assert verdict.matched_pattern == ""


def test_union_probe_is_dump():
    verdict = classify_sqli(request(username="x' UNION SELECT null-- "))
    assert verdict.kind is VerdictKind.DUMP_PROBE


def test_xss_is_not_sqli():
    verdict = classify_sqli(request(username="<script>alert('XSS')</script>", password="test"))
    assert verdict.kind is VerdictKind.NONE


# Frozen fixture: representative enumeration probes of the shape sqlmap
# and hand-driven UNION walks produce. Every one must classify as a dump.
SQLMAP_STYLE_PROBES = [
    "x' UNION ALL SELECT NULL,NULL-- -",
    "x' UNION SELECT username,password FROM users--",
    "1' ORDER BY 1-- ",
    "1' ORDER BY 3-- qbxx",
    "x' AND SLEEP(5)-- ",
    "x'; WAITFOR DELAY '0:0:5'--",
    "x' AND 1=BENCHMARK(5000000,MD5('A'))--",
    "x' AND (SELECT * FROM information_schema.tables)--",
    "x' UNION SELECT @@version--",
    "x' AND pg_sleep(5)--",
    "x' UNION SELECT GROUP_CONCAT(table_name) FROM information_schema.tables--",
    "x' UNION SELECT LOAD_FILE('/etc/passwd')--",
]


@pytest.mark.parametrize("probe", SQLMAP_STYLE_PROBES)
def test_sqlmap_style_corpus_is_dump(probe):
    assert classify_sqli(request(username=probe)).kind is VerdictKind.DUMP_PROBE


def test_sqlmap_user_agent_is_dump():
    verdict = classify_sqli(request(username="x", user_agent="sqlmap/1.7#stable"))
    assert verdict.kind is VerdictKind.DUMP_PROBE


def test_classification_is_total():
    for junk in ("", "0" * 500, "rm -rf /", "{}[]()';--", "éü"):
        assert classify_sqli(request(username=junk)).kind in VerdictKind


# ---------------------------------------------------------------------------
# Login handling
# ---------------------------------------------------------------------------

def test_bypass_serves_comment_concealed_payload():
    resp, events = handle_login(request(username="' OR 1=1 -- ", password="test"), PAYLOAD)
    assert resp.status == 200
    assert b"<!-- \x1b[8m" in resp.body
    assert [e.kind for e in events] == [EventKind.WEB_SQLI_LOGIN_BYPASS]


def test_dump_serves_single_row_table():
    resp, events = handle_login(request(username="x' UNION SELECT null-- "), PAYLOAD)
    body = resp.body.decode()
    assert "<h2>users</h2>" in body
    assert body.count("<tr><td>") == 1
    assert PAYLOAD.assembled in body
    assert [e.kind for e in events] == [EventKind.WEB_SQLI_DUMP]


def test_honest_login_untouched_and_payload_independent():
    req = request(username="alice", password="hunter2")
    armed, events_armed = handle_login(req, PAYLOAD)
    unarmed, events_unarmed = handle_login(req, None)
    assert armed == unarmed
    assert events_armed == events_unarmed == []
    assert b"\x1b" not in armed.body and b"<!--" not in armed.body
    assert b"Invalid credentials." in armed.body


def test_xss_treated_like_honest_login():
    resp, events = handle_login(request(username="<script>alert('XSS')</script>"), PAYLOAD)
    assert events == []
    assert b"\x1b" not in resp.body


def test_stripping_comments_removes_payload_entirely():
    import re
    resp, _ = handle_login(request(username="' OR 1=1 -- "), PAYLOAD)
    stripped = re.sub(rb"<!--.*?-->", b"", resp.body, flags=re.S)
    assert b"\x1b" not in stripped
    assert b"curl" not in stripped


# ---------------------------------------------------------------------------
# Query parsing
# ---------------------------------------------------------------------------

def test_query_decoded_exactly_once():
    user, pw = parse_login_query("username=%2527%20OR%25201%253D1&password=x")
    assert user == "%27 OR%201%3D1"  # double-encoded stays encoded once


def test_query_plus_and_percent():
    user, pw = parse_login_query("username=%27+OR+1%3D1+--+&password=test")
    assert user == "' OR 1=1 -- "
    assert pw == "test"


def test_malformed_query_rejected():
    with pytest.raises(ValueError):
        parse_login_query("no_equals_sign_here")
    with pytest.raises((ValueError, UnicodeDecodeError)):
        parse_login_query("username=%ff%fe&password=x")


# ---------------------------------------------------------------------------
# Dedup window
# ---------------------------------------------------------------------------

def test_deduper_admits_once_per_window():
    deduper = EventDeduper(window=600.0)
    assert deduper.admit("10.0.0.9", EventKind.WEB_SQLI_LOGIN_BYPASS)
    assert not deduper.admit("10.0.0.9", EventKind.WEB_SQLI_LOGIN_BYPASS)
    assert deduper.admit("10.0.0.9", EventKind.WEB_SQLI_DUMP)
    assert deduper.admit("10.0.0.10", EventKind.WEB_SQLI_LOGIN_BYPASS)


def test_deduper_window_expires():
    deduper = EventDeduper(window=0.0)
    assert deduper.admit("10.0.0.9", EventKind.WEB_SQLI_DUMP)
    assert deduper.admit("10.0.0.9", EventKind.WEB_SQLI_DUMP)


# ---------------------------------------------------------------------------
# Live server
# ---------------------------------------------------------------------------

def http_get(port, path):
    sock = socket.create_connection(("127.0.0.1", port), timeout=5.0)
    try:
        sock.sendall(f"GET {path} HTTP/1.0\r\nHost: x\r\n\r\n".encode())
        out = b""
        while True:
            chunk = sock.recv(65536)
            if not chunk:
                break
            out += chunk
        return out
    finally:
        sock.close()


def split_response(raw):
    head, _, body = raw.partition(b"\r\n\r\n")
    lines = head.split(b"\r\n")
    status = int(lines[0].split()[1])
    headers = sorted(l for l in lines[1:] if not l.lower().startswith(b"date:"))
    return status, headers, body


@pytest.fixture()
def servers():
    events = []

    def provider(event):
        events.append(event)
        return PAYLOAD

    armed = WebDecoyServer("127.0.0.1", 0, provider=provider,
                           recall=lambda _decoy: PAYLOAD).start()
    unarmed = WebDecoyServer("127.0.0.1", 0, provider=None).start()
    yield armed, unarmed, events
    armed.stop()
    unarmed.stop()


def test_server_front_page(servers):
    armed, _, _ = servers
    status, headers, body = split_response(http_get(armed.port, "/"))
    assert status == 200
    assert b"80040e14" in body
    assert any(h == b"Server: Apache/2.4.41 (Ubuntu)" for h in headers)


def test_server_bypass_and_dedup(servers):
    armed, _, events = servers
    raw = http_get(armed.port, "/login?username=%27+OR+1%3D1+--+&password=test")
    assert b"<!-- \x1b[8m" in raw
    raw2 = http_get(armed.port, "/login?username=%27+OR+1%3D1+--+&password=test")
    assert b"<!-- \x1b[8m" in raw2
    assert len([e for e in events if e.kind is EventKind.WEB_SQLI_LOGIN_BYPASS]) == 1


def test_server_honest_login_identical_armed_or_not(servers):
    armed, unarmed, events = servers
    path = "/login?username=admin&password=admin"
    a = split_response(http_get(armed.port, path))
    b = split_response(http_get(unarmed.port, path))
    assert a == b
    assert b"\x1b" not in a[2]
    assert not events


def test_server_malformed_query_is_400(servers):
    armed, _, events = servers
    status, _, body = split_response(http_get(armed.port, "/login?username=%ff%fe&password=x"))
    assert status == 400
    assert b"80040e14" in body
    assert not events


def test_server_unknown_path_404(servers):
    armed, _, _ = servers
    status, _, _ = split_response(http_get(armed.port, "/admin"))
    assert status == 404
