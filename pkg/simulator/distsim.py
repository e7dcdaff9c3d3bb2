"""Window-level simulation of the distributed association protocols.

Every window the TPs broadcast their loads, users answer with at most one
request and each TP admits at most one requester. All messages cross a
`WindowChannel`, which encodes them to bytes and decodes them again.
"""
from dataclasses import asdict, dataclass, field
from enum import IntEnum
import json
import logging
from pathlib import Path

import numpy as np

from common.setfn import Association, LoadVector, SetFunction
from common.window_messages import (AssociationRequestMessage, DecisionMessage, LoadBroadcastMessage,
                                    RequestPayload, WindowMessage, encode_message, parse_message)
from simulator.tp_agent import TpAgent
from simulator.user_agent import UserAgent

logger = logging.getLogger(__name__)


class AdmissionRule(IntEnum):
    FIRST_REQUESTER = 1
    BEST_REQUESTER = 2


@dataclass
class DistLsConfig:
    accept_probability: float = 0.5
    delta: float = 0.0
    max_windows: int = 1000
    rng_seed: int = 0
    admission_rule: AdmissionRule = AdmissionRule.FIRST_REQUESTER

    def __post_init__(self):
        if not 0 < self.accept_probability < 1:
            raise ValueError(f"accept_probability must lie in (0, 1), got {self.accept_probability}")
        if not self.delta >= 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.max_windows < 1:
            raise ValueError("max_windows must be >= 1")
        self.admission_rule = AdmissionRule(self.admission_rule)


@dataclass
class WindowEvent:
    window: int
    broadcasts: list[tuple[int, float, float]] = field(default_factory=list)  # tp, psi, logterm
    requests: list[tuple[int, int, float]] = field(default_factory=list)  # user, tp, change
    decisions: list[tuple[int, int, bool, int]] = field(default_factory=list)  # tp, user, accepted, reason

    def admitted(self) -> list[tuple[int, int]]:
        return [(user, tp) for tp, user, accepted, _ in self.decisions if accepted]


@dataclass
class ProtocolTrace:
    num_tps: int
    initial: list[int]
    windows: list[WindowEvent] = field(default_factory=list)
    final: list[int] = field(default_factory=list)
    converged: bool = False
    windows_used: int = 0
    last_request_window: int = 0

    def replay(self) -> Association:
        association = Association.from_tps(self.initial, self.num_tps)
        for event in self.windows:
            for user, tp in event.admitted():
                if association.tp_of[user] == -1:
                    association.add(user, tp)
                else:
                    association.move(user, tp)
        return association

    def to_jsonl(self, path: str | Path):
        header = {"kind": "header", "num_tps": self.num_tps, "initial": self.initial}
        summary = {"kind": "summary", "final": self.final, "converged": self.converged,
                   "windows_used": self.windows_used, "last_request_window": self.last_request_window}
        with open(path, "w") as f:
            f.write(json.dumps(header) + "\n")
            for event in self.windows:
                f.write(json.dumps({"kind": "window", **asdict(event)}) + "\n")
            f.write(json.dumps(summary) + "\n")

    @staticmethod
    def from_jsonl(path: str | Path) -> "ProtocolTrace":
        with open(path, "r") as f:
            records = [json.loads(line) for line in f if line.strip()]
        header, summary = records[0], records[-1]
        windows = []
        for record in records[1:-1]:
            windows.append(WindowEvent(
                record["window"],
                [tuple(b) for b in record["broadcasts"]],
                [tuple(r) for r in record["requests"]],
                [tuple(d) for d in record["decisions"]],
            ))
        return ProtocolTrace(header["num_tps"], header["initial"], windows, summary["final"], summary["converged"],
                             summary["windows_used"], summary["last_request_window"])


class WindowChannel:
    """Lossless medium between agents; counts the bytes that cross it."""

    def __init__(self):
        self.bytes_sent = 0

    def transmit(self, message: WindowMessage) -> WindowMessage:
        data = encode_message(message)
        self.bytes_sent += len(data)
        return parse_message(data)


def arrival_order(users, seed: int | None, window: int) -> list[int]:
    """Request arrival order in a window: ascending user id, or a seeded shuffle of it."""
    ordered = sorted(int(k) for k in users)
    if seed is None:
        return ordered
    rng = np.random.default_rng([seed, window])
    return [ordered[i] for i in rng.permutation(len(ordered))]


def _collect_broadcasts(tps: list[TpAgent], channel: WindowChannel, event: WindowEvent) -> LoadVector:
    loads = LoadVector.empty(len(tps))
    for tp in tps:
        message: LoadBroadcastMessage = channel.transmit(tp.broadcast())
        loads.psi[message.tp] = message.psi
        loads.logterm[message.tp] = message.logterm
        event.broadcasts.append((message.tp, message.psi, message.logterm))
    return loads


def _send_requests(payloads: list[RequestPayload], channel: WindowChannel, event: WindowEvent,
                   num_tps: int) -> list[list[RequestPayload]]:
    inbox: list[list[RequestPayload]] = [[] for _ in range(num_tps)]
    for payload in payloads:
        message: AssociationRequestMessage = channel.transmit(AssociationRequestMessage(payload))
        inbox[message.payload.tp].append(message.payload)
        event.requests.append((message.payload.user, message.payload.tp, message.payload.change))
    return inbox


def _deliver_decisions(decisions: list[DecisionMessage], channel: WindowChannel,
                       event: WindowEvent) -> list[DecisionMessage]:
    delivered = []
    for decision in decisions:
        message: DecisionMessage = channel.transmit(decision)
        event.decisions.append((message.tp, message.user, message.accepted, int(message.reason)))
        delivered.append(message)
    return delivered


def distributed_greedy(set_fn: SetFunction, seed: int | None = None,
                       rule: AdmissionRule = AdmissionRule.FIRST_REQUESTER) -> tuple[Association, ProtocolTrace]:
    set_fn.check_users_feasible()
    num_users, num_tps = set_fn.num_users, set_fn.num_tps
    tps = [TpAgent(b) for b in range(num_tps)]
    users = [UserAgent(k, set_fn) for k in range(num_users)]
    association = Association(num_users, num_tps)
    trace = ProtocolTrace(num_tps, association.tp_of.tolist())
    channel = WindowChannel()

    window = 0
    while not association.is_complete():
        window += 1
        event = WindowEvent(window)
        for tp in tps:
            tp.start_window()
        loads = _collect_broadcasts(tps, channel, event)

        order = arrival_order(association.unassigned_users(), seed, window)
        inbox = _send_requests([users[k].join_request(loads) for k in order], channel, event, num_tps)

        requests_by_user = {p.user: p for box in inbox for p in box}
        for tp in tps:
            if rule == AdmissionRule.FIRST_REQUESTER:
                decisions = tp.admit_first(inbox[tp.tp])
            else:
                decisions = tp.admit_best(inbox[tp.tp], set_fn.maximizes)
            for decision in _deliver_decisions(decisions, channel, event):
                if decision.accepted:
                    tp.attach(requests_by_user[decision.user])
                    association.add(decision.user, decision.tp)
                    users[decision.user].tp = decision.tp

        trace.windows.append(event)
        logger.debug("distributed greedy window %d: %d admitted", window, len(event.admitted()))
        if window > num_users:
            raise RuntimeError("distributed greedy exceeded K windows")

    trace.final = association.tp_of.tolist()
    trace.converged = True
    trace.windows_used = window
    trace.last_request_window = window
    logger.info("distributed greedy finished in %d windows, %d bytes exchanged", window, channel.bytes_sent)
    return association, trace


def trace_ordering(trace: ProtocolTrace) -> list[int]:
    """Users in the order the TPs admitted them, window by window."""
    return [user for event in trace.windows for user, _ in event.admitted()]


def restricted_greedy(set_fn: SetFunction, ordering: list[int]) -> Association:
    set_fn.check_users_feasible()
    association = Association(set_fn.num_users, set_fn.num_tps)
    loads = set_fn.empty_loads()
    for k in ordering:
        b, _ = set_fn.best_tp(k, loads)
        association.add(k, b)
        set_fn.add_to_loads(loads, k, b)
    return association


def random_ordering(num_users: int, seed: int) -> list[int]:
    return [int(k) for k in np.random.default_rng(seed).permutation(num_users)]


def distributed_ls(association: Association, set_fn: SetFunction,
                   cfg: DistLsConfig) -> tuple[Association, ProtocolTrace]:
    if not association.is_complete():
        raise ValueError("distributed local search needs a complete association")
    num_tps = set_fn.num_tps
    association = association.copy()
    tps = [TpAgent(b) for b in range(num_tps)]
    users = [UserAgent(k, set_fn) for k in range(set_fn.num_users)]
    for k, b in association.tuples():
        tps[b].attach(users[k].payload(b, 0.0))
        users[k].tp = b

    trace = ProtocolTrace(num_tps, association.tp_of.tolist())
    channel = WindowChannel()
    best_only = cfg.admission_rule == AdmissionRule.BEST_REQUESTER

    for window in range(1, cfg.max_windows + 1):
        event = WindowEvent(window)
        trace.windows.append(event)
        trace.windows_used = window
        for tp in tps:
            tp.start_window()
        loads = _collect_broadcasts(tps, channel, event)

        payloads = []
        for k in arrival_order(range(set_fn.num_users), None, window):
            request = users[k].migration_request(loads, cfg.delta)
            if request is not None:
                payloads.append(request)
        if not payloads:
            trace.converged = True
            break
        trace.last_request_window = window
        inbox = _send_requests(payloads, channel, event, num_tps)

        requests_by_user = {p.user: p for p in payloads}
        for tp in tps:
            rng = np.random.default_rng([cfg.rng_seed, window, tp.tp])
            decisions = tp.admit_randomized(inbox[tp.tp], cfg.accept_probability, rng, best_only, set_fn.maximizes)
            for decision in _deliver_decisions(decisions, channel, event):
                if not decision.accepted:
                    continue
                request = requests_by_user[decision.user]
                old = users[request.user].tp
                old_payload = users[request.user].payload(old, 0.0)
                tps[old].detach(request.user, old_payload.theta, old_payload.logterm)
                tp.attach(request)
                association.move(request.user, request.tp)
                users[request.user].tp = request.tp

        logger.debug("distributed LS window %d: %d requests, %d migrations",
                     window, len(payloads), len(event.admitted()))

    trace.final = association.tp_of.tolist()
    if not trace.converged:
        logger.warning("distributed LS did not reach an absorbing state within %d windows", cfg.max_windows)
    return association, trace
