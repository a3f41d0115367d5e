"""Coordinator side of the two-round one-step protocol.

Round 1: every worker fits its local M-estimator and reports it; the
coordinator averages the delivered estimates into theta0.
Round 2: theta0 is broadcast; every worker reports the gradient and Hessian
of its local criterion at theta0; the coordinator averages them and takes
one Newton step.

Replies are collected behind a per-round barrier and reduced in ascending
machine id order, so the outcome is independent of arrival order and of
the transport.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..data import rng_stream
from ..errors import AllMachinesFailed, DomainError, TransportError
from ..estimators import AggregationInput, LocalReport, one_step_update, resampled_average, simple_average
from ..solver import SolveConfig
from .messages import (
    ASSIGN_SHARD,
    BROADCAST_THETA0,
    DONE,
    FAILURE,
    GRAD_HESS,
    LOCAL_ESTIMATE,
    REQUEST_GRAD_HESS,
    REQUEST_LOCAL_ESTIMATE,
    Message,
    vec,
)
from .transport import InProcessTransport, TcpTransport, WorkerThreads
from .worker import Worker, solve_config_to_payload

COORDINATOR_ID = 0


@dataclass(frozen=True)
class FailurePolicy:
    """Which (machine, round) contributions are lost on the way in.

    Draws are committed up front from the seed.  By default one draw per
    machine covers both rounds (a machine that fails loses its estimate and
    its gradient/Hessian alike); ``per_round=True`` draws each round
    independently.  ``drops`` scripts an exact set of ``(machine_id, round)``
    losses and overrides the random draws.
    """

    rate: float = 0.0
    per_round: bool = False
    seed: int = 0
    key: tuple = ()
    drops: Optional[frozenset] = None

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise DomainError(f"failure rate must lie in [0, 1), got {self.rate}")

    def draw(self, machine_ids):
        """Return ``{(machine_id, round): dropped}`` for all machines and both rounds."""
        machine_ids = sorted(machine_ids)
        if self.drops is not None:
            scripted = set(self.drops)
            return {(m, r): (m, r) in scripted for m in machine_ids for r in (1, 2)}
        if self.rate == 0.0:
            return {(m, r): False for m in machine_ids for r in (1, 2)}
        u = rng_stream(self.seed, "failure", len(machine_ids), *self.key).uniform(size=(len(machine_ids), 2))
        lost = u < self.rate
        if not self.per_round:
            lost[:, 1] = lost[:, 0]
        return {(m, r): bool(lost[i, r - 1]) for i, m in enumerate(machine_ids) for r in (1, 2)}


NO_FAILURES = FailurePolicy()


@dataclass(frozen=True)
class Resampling:
    """Ask workers for a second estimate on floor(s*n) of their observations."""

    s: float = 0.1
    seed: int = 0
    key: tuple = ()

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise DomainError(f"resampling ratio must lie in (0, 1), got {self.s}")

    def payload(self):
        return {"s": self.s, "seed": int(self.seed), "key": [int(k) for k in self.key]}


@dataclass
class ProtocolResult:
    theta0: np.ndarray
    theta1: np.ndarray
    round_log: list
    # delivery mask a_i per round, in machine id order
    masks: dict
    machine_ids: tuple
    theta0_sub: Optional[np.ndarray] = None
    theta_resampled: Optional[np.ndarray] = None
    local_thetas: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    hessians: dict = field(default_factory=dict)

    @property
    def delivery_mask(self):
        return self.masks[1]

    def dropped(self, round_):
        return sum(1 for a in self.masks[round_] if not a)


def _round(transport, machine_ids, requests, expected_kind, lost, round_, log):
    """Send ``requests`` (machine_id -> list of messages) and collect one reply each."""
    for mid in machine_ids:
        for msg in requests[mid]:
            log.append(msg)
            transport.send(mid, msg)
    replies = transport.gather(machine_ids)
    out = {}
    for mid in machine_ids:
        reply = replies[mid]
        if reply.machine_id != mid:
            raise TransportError(mid, f"reply claims to come from machine {reply.machine_id}")
        if lost.get((mid, round_), False):
            reply = Message(FAILURE, mid, round_, {"reason": "injected"})
        elif reply.kind not in (expected_kind, FAILURE):
            raise TransportError(mid, f"expected {expected_kind}, got {reply.kind}")
        log.append(reply)
        out[mid] = reply
    return out


def coordinate(transport, machine_ids, model, failure=NO_FAILURES, resample=None, solve_config=None):
    """Run both protocol rounds over an already connected ``transport``."""
    machine_ids = tuple(sorted(machine_ids))
    if not machine_ids:
        raise DomainError("need at least one worker")
    lost = failure.draw(machine_ids)
    log = []

    assign = {"model": model.spec(), "solve": solve_config_to_payload(solve_config or SolveConfig())}
    for mid in machine_ids:
        msg = Message(ASSIGN_SHARD, mid, 1, assign)
        log.append(msg)
        transport.send(mid, msg)
    acks = transport.gather(machine_ids)
    for mid in machine_ids:
        ack = acks[mid]
        log.append(ack)
        if ack.kind != ASSIGN_SHARD:
            raise TransportError(mid, f"shard assignment refused: {ack.payload.get('reason', ack.kind)}")

    try:
        return _rounds(transport, machine_ids, model, lost, resample, log)
    finally:
        for mid in machine_ids:
            msg = Message(DONE, mid, 2, {})
            log.append(msg)
            try:
                transport.send(mid, msg)
            except TransportError:
                pass


def _rounds(transport, machine_ids, model, lost, resample, log):
    d = model.dim
    request = {"resample": resample.payload()} if resample is not None else {}
    replies = _round(
        transport,
        machine_ids,
        {mid: [Message(REQUEST_LOCAL_ESTIMATE, mid, 1, request)] for mid in machine_ids},
        LOCAL_ESTIMATE,
        lost,
        1,
        log,
    )
    reports = []
    sub_reports = []
    local_thetas = {}
    for mid in machine_ids:
        reply = replies[mid]
        ok = reply.kind == LOCAL_ESTIMATE
        theta = np.array(reply.payload["theta"], dtype=float) if ok else None
        if ok:
            if theta.shape != (d,):
                raise TransportError(mid, f"local estimate has dimension {theta.shape[0]}, expected {d}")
            local_thetas[mid] = theta
        reports.append(LocalReport(mid, theta=theta, delivered=ok))
        if resample is not None:
            sub = reply.payload.get("theta_sub") if ok else None
            sub_reports.append(
                LocalReport(mid, theta=None if sub is None else np.array(sub, dtype=float), delivered=sub is not None)
            )
    round1 = AggregationInput(reports)
    theta0 = simple_average(round1)
    theta0_sub = theta_re = None
    if resample is not None:
        try:
            theta0_sub = simple_average(AggregationInput(sub_reports))
            theta_re = resampled_average(theta0, theta0_sub, resample.s)
        except AllMachinesFailed:
            pass

    broadcast = {"theta0": vec(theta0)}
    replies = _round(
        transport,
        machine_ids,
        {
            mid: [Message(BROADCAST_THETA0, mid, 2, broadcast), Message(REQUEST_GRAD_HESS, mid, 2, {})]
            for mid in machine_ids
        },
        GRAD_HESS,
        lost,
        2,
        log,
    )
    reports = []
    grads = {}
    hessians = {}
    for mid in machine_ids:
        reply = replies[mid]
        ok = reply.kind == GRAD_HESS
        grad = hess = None
        if ok:
            grad = np.array(reply.payload["grad"], dtype=float)
            hess = np.array(reply.payload["hess"], dtype=float)
            if grad.shape != (d,) or hess.shape != (d, d):
                raise TransportError(mid, "gradient/Hessian dimensions do not match the model")
            grads[mid] = grad
            hessians[mid] = hess
        reports.append(LocalReport(mid, grad=grad, hess=hess, delivered=ok))
    round2 = AggregationInput(reports)
    theta1 = one_step_update(theta0, round2)

    return ProtocolResult(
        theta0=theta0,
        theta1=theta1,
        round_log=log,
        masks={1: round1.mask, 2: round2.mask},
        machine_ids=machine_ids,
        theta0_sub=theta0_sub,
        theta_resampled=theta_re,
        local_thetas=local_thetas,
        grads=grads,
        hessians=hessians,
    )


def run_protocol(model, shards, failure=NO_FAILURES, transport="inproc", resample=None, solve_config=None, timeout=120.0):
    """Run the protocol with one local worker per shard.

    ``transport`` is ``"inproc"``, ``"inproc-wire"`` (in-process but every
    message goes through the frame codec) or ``"tcp"`` (loopback sockets,
    one worker thread per shard).
    """
    workers = [Worker(s.machine_id, s.samples) for s in shards]
    ids = [w.machine_id for w in workers]
    if transport in ("inproc", "inproc-wire"):
        channel = InProcessTransport(workers, wire=transport == "inproc-wire")
        try:
            return coordinate(channel, ids, model, failure, resample, solve_config)
        finally:
            channel.close()
    if transport != "tcp":
        raise DomainError(f"unknown transport {transport!r}")
    channel = TcpTransport("127.0.0.1", 0, timeout=timeout)
    threads = WorkerThreads(channel.address, workers, timeout)
    try:
        channel.accept(ids)
        result = coordinate(channel, ids, model, failure, resample, solve_config)
    finally:
        channel.close()
    threads.join(timeout)
    return result
