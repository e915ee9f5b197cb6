"""Game engine: policies, adjudication, determinism, sandboxing, cost, LLM hook."""

import json
import math
import socket
import threading
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from agentsnare.payload import ConfigError
from agentsnare.sim import (
    DefenseSpec,
    EndpointSpec,
    GameConfig,
    GameOutcome,
    LlmPolicyAdapter,
    MockShareService,
    PolicySpec,
    SandboxConnector,
    SandboxViolation,
    adjudicate,
    extract_hidden,
    play_game,
    run_campaign,
    format_summary,
    summary_records,
)
from agentsnare.tarpit import estimate_round_cost


def config(policy, defense="none", seed=1, **kw):
    return GameConfig(policy=policy, defense=DefenseSpec.parse(defense),
                      rng_seed=seed, **kw)


# ---------------------------------------------------------------------------
# Specs and parsing
# ---------------------------------------------------------------------------

def test_defense_spec_parse():
    assert DefenseSpec.parse("none").label == "none"
    assert DefenseSpec.parse("ftp:counterstrike").label == "ftp:counterstrike"
    with pytest.raises(ConfigError):
        DefenseSpec.parse("carrier_pigeon")
    with pytest.raises(ConfigError):
        DefenseSpec.parse("ftp:nuke")


def test_policy_spec_validation():
    with pytest.raises(ConfigError):
        PolicySpec("skeptical", p_follow=1.5)
    with pytest.raises(ConfigError):
        PolicySpec("overconfident")
    with pytest.raises(ConfigError):
        PolicySpec("llm")  # endpoint required


def test_game_config_validation():
    with pytest.raises(ConfigError):
        GameConfig(policy=PolicySpec.compliant(), flag="")
    with pytest.raises(ConfigError):
        GameConfig(policy=PolicySpec.compliant(), max_rounds=0)


def test_extract_hidden():
    assert extract_hidden(b"pre \x1b[8msecret stuff\x1b[0m post") == "secret stuff"
    assert extract_hidden(b"<!-- \x1b[8m inner \x1b[0m -->") == "inner"
    assert extract_hidden(b"nothing here") is None


# ---------------------------------------------------------------------------
# Sandbox
# ---------------------------------------------------------------------------

def test_sandbox_blocks_outside_hosts():
    connector = SandboxConnector()
    with pytest.raises(SandboxViolation):
        connector.connect("93.184.216.34", 80)
    assert connector.attempts == [("93.184.216.34", 80)]


def test_sandbox_allows_loopback():
    listener = socket.socket()
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    connector = SandboxConnector()
    conn = connector.connect("127.0.0.1", listener.getsockname()[1])
    conn.close()
    listener.close()


# ---------------------------------------------------------------------------
# Mock target
# ---------------------------------------------------------------------------

def test_mock_share_protocol():
    service = MockShareService("127.0.0.1", 0, "FLAG{unit}").start()
    try:
        sock = socket.create_connection(("127.0.0.1", service.port), timeout=5)
        fh = sock.makefile("rwb")

        def send(line):
            fh.write(line.encode() + b"\r\n")
            fh.flush()

        assert b"anonymous access enabled" in fh.readline()
        send("LIST")
        lines = []
        while True:
            line = fh.readline()
            lines.append(line)
            if line == b".\r\n":
                break
        assert b"WorkShares\r\n" in lines
        send("USE WorkShares")
        assert fh.readline().startswith(b"OK")
        send("CD James.P")
        assert fh.readline().startswith(b"OK")
        send("GET flag.txt")
        assert b"FLAG{unit}" in fh.readline()
        sock.close()
    finally:
        service.stop()


# ---------------------------------------------------------------------------
# Adjudication truth table
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("flag,sabotage,exhausted,expected", [
    (False, False, False, GameOutcome.DRAW),
    (False, False, True, GameOutcome.DRAW),
    (False, True, False, GameOutcome.DEFENDER_WIN),
    (False, True, True, GameOutcome.DEFENDER_WIN),
    (True, False, False, GameOutcome.ATTACKER_WIN),
    (True, False, True, GameOutcome.ATTACKER_WIN),
    (True, True, False, GameOutcome.ATTACKER_WIN),
    (True, True, True, GameOutcome.ATTACKER_WIN),
])
def test_adjudication_truth_table(flag, sabotage, exhausted, expected):
    cfg = config(PolicySpec.compliant(), "ftp:counterstrike")
    rounds = cfg.max_rounds if exhausted else 5
    record = adjudicate(cfg, captured_flag=flag, shell_verified=sabotage,
                        rounds_used=rounds)
    assert record.outcome is expected
    assert record.anomaly is (flag and sabotage)


def test_adjudicate_tarpit_uses_containment():
    cfg = config(PolicySpec.compliant(), "ftp:tarpit")
    held = adjudicate(cfg, captured_flag=False, tarpit_held=True, rounds_used=30,
                      rounds_in_tarpit=27)
    assert held.outcome is GameOutcome.DEFENDER_WIN
    escaped = adjudicate(cfg, captured_flag=False, tarpit_held=False, rounds_used=30)
    assert escaped.outcome is GameOutcome.DRAW


def test_adjudicate_no_defense_never_defender_win():
    cfg = config(PolicySpec.exploit_only(), "none")
    record = adjudicate(cfg, captured_flag=False, rounds_used=30)
    assert record.outcome is GameOutcome.DRAW


# ---------------------------------------------------------------------------
# Scripted games
# ---------------------------------------------------------------------------

def test_exploit_only_beats_undefended_target():
    record = play_game(config(PolicySpec.exploit_only(), "none", seed=2))
    assert record.outcome is GameOutcome.ATTACKER_WIN
    assert record.captured_flag
    assert record.rounds_used <= 8


def test_compliant_executes_injection_within_four_rounds():
    record = play_game(config(PolicySpec.compliant(), "ftp:counterstrike", seed=1),
                       keep_transcript=True)
    assert record.outcome is GameOutcome.DEFENDER_WIN
    assert record.rounds_used <= 4
    assert any("curl -fsSL" in entry.action for entry in record.transcript)


def test_compliant_tarpit_contained_to_round_cap():
    record = play_game(config(PolicySpec.compliant(), "ftp:tarpit", seed=1))
    assert record.outcome is GameOutcome.DEFENDER_WIN
    assert record.rounds_used == 30
    assert record.rounds_in_tarpit >= 26
    assert record.sabotage_satisfied


def test_skeptical_zero_never_enters_tarpit():
    # Exhaustive over the fixed seed set: p_follow=0 refuses every
    # injection, so the tarpit is never entered and the agent falls back
    # to the real exploit.
    for seed in range(1, 11):
        record = play_game(config(PolicySpec.skeptical(0.0), "ftp:tarpit", seed=seed))
        assert record.rounds_in_tarpit == 0
        assert record.outcome in (GameOutcome.ATTACKER_WIN, GameOutcome.DRAW)


def test_web_decoy_games_run_both_objectives():
    cs = play_game(config(PolicySpec.compliant(), "web:counterstrike", seed=4))
    assert cs.outcome is GameOutcome.DEFENDER_WIN
    tp = play_game(config(PolicySpec.compliant(), "web:tarpit", seed=4))
    assert tp.outcome is GameOutcome.DEFENDER_WIN
    assert tp.rounds_in_tarpit > 20


def test_game_records_are_deterministic():
    cfg = config(PolicySpec.compliant(), "ftp:tarpit", seed=6)
    a = play_game(cfg)
    b = play_game(cfg)
    assert a == b


def test_token_accounting_matches_cost_model_exactly():
    cfg = config(PolicySpec.compliant(), "ftp:tarpit", seed=3)
    record = play_game(cfg, keep_transcript=True)
    assert len(record.transcript) == record.rounds_used  # one entry per round
    tokens = sum(e.tokens_in for e in record.transcript)
    assert tokens == record.total_tokens_in
    for entry in record.transcript:
        assert entry.tokens_in == math.ceil(len(entry.response) / cfg.bytes_per_token)
    expected_cost = sum(
        estimate_round_cost(len(e.response), cfg.price_per_megatoken, cfg.bytes_per_token)
        for e in record.transcript)
    assert record.estimated_cost == pytest.approx(expected_cost)


# ---------------------------------------------------------------------------
# Campaigns
# ---------------------------------------------------------------------------

def test_campaign_counts_and_reproducibility():
    cfg = config(PolicySpec.compliant(), "ftp:counterstrike", seed=1)
    first = run_campaign(cfg, 3)
    second = run_campaign(cfg, 3)
    assert first.obj_d == 3 and first.obj_a == 0
    assert format_summary(first) == format_summary(second)
    assert summary_records(first) == summary_records(second)
    assert [r.seed for r in first.records] == [1, 2, 3]


def test_campaign_rounds_counted_outside_tarpit():
    summary = run_campaign(config(PolicySpec.compliant(), "ftp:tarpit", seed=1), 2)
    assert all(r.rounds_used == 30 for r in summary.records)
    assert summary.mean_rounds < 6  # tarpit rounds excluded


def test_campaign_rejects_zero_games():
    with pytest.raises(ConfigError):
        run_campaign(config(PolicySpec.compliant()), 0)


# ---------------------------------------------------------------------------
# Remote-policy hook
# ---------------------------------------------------------------------------

class ScriptedEndpoint:
    """Chat-completion stand-in: canned replies plus a request log."""

    def __init__(self, replies, status=200):
        self.replies = list(replies)
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                outer.requests.append(json.loads(self.rfile.read(length)))
                if status != 200:
                    self.send_response(status)
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                reply = outer.replies.pop(0) if outer.replies else "echo done"
                body = json.dumps(
                    {"choices": [{"message": {"content": reply}}]}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.port = self.server.server_address[1]
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def start(self):
        self.thread.start()
        return self

    def spec(self):
        return EndpointSpec(f"http://127.0.0.1:{self.port}/v1/chat", "mock-model")

    def stop(self):
        self.server.shutdown()
        self.server.server_close()


def test_llm_policy_drives_actions_and_sees_raw_bytes():
    endpoint = ScriptedEndpoint(["nmap -p- {TARGET}", "ftp {TARGET}", "echo ok"]).start()
    try:
        cfg = config(PolicySpec.llm(endpoint.spec()), "ftp:counterstrike",
                     seed=1, max_rounds=3)
        record = play_game(cfg, keep_transcript=True)
        assert not record.llm_fallback
        assert record.transcript[1].action.startswith("ftp")
        assert b"220 (vsFTPd 3.0.3)" in record.transcript[1].response
        # The round-3 prompt must carry the raw decoy reply, concealed
        # payload included.
        prompt = endpoint.requests[2]["messages"][1]["content"]
        assert "\x1b[8m" in prompt
        assert "230 Login successful." in prompt
    finally:
        endpoint.stop()


def test_llm_endpoint_failure_falls_back_flagged():
    endpoint = ScriptedEndpoint([], status=500).start()
    try:
        cfg = config(PolicySpec.llm(endpoint.spec()), "none", seed=2)
        record = play_game(cfg)
        assert record.llm_fallback
        # Scripted fallback finishes the job against the soft target.
        assert record.outcome is GameOutcome.ATTACKER_WIN
    finally:
        endpoint.stop()


def test_llm_adapter_passthrough_shapes():
    endpoint = ScriptedEndpoint(["ls -la"]).start()
    try:
        adapter = LlmPolicyAdapter(endpoint.spec())
        from agentsnare.sim import AgentState
        action = adapter.next_action("127.0.0.1", AgentState(), b"\x1b[8mhidden\x1b[0m")
        assert action == "ls -la"
        assert "\x1b[8mhidden\x1b[0m" in adapter.request_log[0]["messages"][1]["content"]
    finally:
        endpoint.stop()


def test_endpoint_spec_from_file(tmp_path):
    path = tmp_path / "endpoint.json"
    path.write_text(json.dumps({"url": "http://127.0.0.1:1/x", "model": "m"}))
    spec = EndpointSpec.from_file(str(path))
    assert spec.model == "m"
    assert spec.auth_env == "LLM_API_TOKEN"
