"""Deceptive defense toolkit against automated, model-driven intruders.

Decoy services (an anonymous-login FTP server and a SQL-injectable web
login) confirm hostile intent, then splice concealed prompt injections
into their responses. The injection manager either lures the attacking
agent into opening a reverse shell back to us (counterstrike) or walks it
into an infinite fake filesystem that burns its tokens (tarpit). A
scripted attacker simulator plays the whole game on loopback so the
defense is testable without a live model.
"""

from .payload import (
    ActivationEvent,
    Concealment,
    CounterstrikeObjective,
    EventKind,
    ExecutionTrigger,
    Payload,
    TarpitObjective,
    build_payload,
    conceal_ansi,
    conceal_html,
    pick_trigger,
    render_initiator,
)

__all__ = [
    "ActivationEvent",
    "Concealment",
    "CounterstrikeObjective",
    "EventKind",
    "ExecutionTrigger",
    "Payload",
    "TarpitObjective",
    "build_payload",
    "conceal_ansi",
    "conceal_html",
    "pick_trigger",
    "render_initiator",
]

__version__ = "0.1.0"
