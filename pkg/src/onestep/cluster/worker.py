"""Worker side of the two-round protocol.

A worker holds one shard and answers coordinator requests with summaries
only: its local estimate in round 1, and its gradient and Hessian at the
broadcast average in round 2.  Raw samples never leave the worker.
"""

import dataclasses
import logging

import numpy as np

from ..data import rng_stream
from ..errors import OneStepError
from ..model import model_from_spec, shard_criterion
from ..solver import SolveConfig, m_estimate
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
    mat,
    vec,
)

log = logging.getLogger(__name__)


def solve_config_to_payload(config):
    out = dataclasses.asdict(config)
    out["ridge_ladder"] = list(out["ridge_ladder"])
    return out


def solve_config_from_payload(payload):
    if payload is None:
        return SolveConfig()
    payload = dict(payload)
    payload["ridge_ladder"] = tuple(payload["ridge_ladder"])
    return SolveConfig(**payload)


def resample_indices(n, s, seed, key, machine_id):
    """Indices of the floor(s*n) observations a machine re-solves on (no replacement)."""
    m = max(1, int(np.floor(s * n)))
    rng = rng_stream(seed, "resample", *key, machine_id)
    return np.sort(rng.choice(n, size=m, replace=False))


class Worker:
    def __init__(self, machine_id, samples):
        self.machine_id = int(machine_id)
        self.samples = samples
        self.model = None
        self.config = SolveConfig()
        self.theta0 = None
        self.done = False

    def _reply(self, kind, round_, payload=None):
        return Message(kind, self.machine_id, round_, payload or {})

    def _failure(self, round_, exc):
        log.warning("machine %d failed in round %d: %s", self.machine_id, round_, exc)
        return self._reply(FAILURE, round_, {"reason": f"{type(exc).__name__}: {exc}"})

    def handle(self, msg):
        """Process one coordinator message; returns the reply or ``None``."""
        if msg.kind == ASSIGN_SHARD:
            self.model = model_from_spec(msg.payload["model"])
            self.config = solve_config_from_payload(msg.payload.get("solve"))
            try:
                self.model.check_samples(self.samples)
            except OneStepError as exc:
                return self._failure(msg.round, exc)
            return self._reply(ASSIGN_SHARD, msg.round, {"n": len(self.samples)})
        if msg.kind == REQUEST_LOCAL_ESTIMATE:
            return self._local_estimate(msg)
        if msg.kind == BROADCAST_THETA0:
            self.theta0 = np.array(msg.payload["theta0"], dtype=float)
            return None
        if msg.kind == REQUEST_GRAD_HESS:
            try:
                _, grad, hess = shard_criterion(self.model, self.samples, self.theta0)
            except OneStepError as exc:
                return self._failure(msg.round, exc)
            return self._reply(GRAD_HESS, msg.round, {"grad": vec(grad), "hess": mat(hess)})
        if msg.kind == DONE:
            self.done = True
            return None
        return self._failure(msg.round, ValueError(f"unexpected message {msg.kind}"))

    def _local_estimate(self, msg):
        try:
            result = m_estimate(self.model, self.samples, config=self.config)
            payload = {
                "theta": vec(result.theta_hat),
                "converged": bool(result.converged),
                "iterations": int(result.iterations),
            }
        except OneStepError as exc:
            return self._failure(msg.round, exc)
        resample = msg.payload.get("resample")
        if resample:
            idx = resample_indices(
                len(self.samples), resample["s"], resample["seed"], resample.get("key", []), self.machine_id
            )
            try:
                sub = m_estimate(self.model, self.samples.take(idx), config=self.config)
                # a subsample too small for the estimate to exist runs off to infinity
                payload["theta_sub"] = vec(sub.theta_hat) if sub.converged else None
            except OneStepError as exc:
                # the full-shard estimate still counts; only the subsample one is lost
                log.info("machine %d: subsample estimate failed: %s", self.machine_id, exc)
                payload["theta_sub"] = None
        return self._reply(LOCAL_ESTIMATE, msg.round, payload)
