"""Neighbour sync-parameter broadcasts and the assumed sequences built from them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ColdStartError


@dataclass(frozen=True, eq=False)
class Broadcast:
    sender: int
    instant: int
    s_seq: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s_seq, float).ravel().copy()
        s.setflags(write=False)
        object.__setattr__(self, "s_seq", s)
        if self.instant < 0:
            raise ValueError("broadcast instant must be nonnegative")
        if len(s) < 1:
            raise ValueError("broadcast carries an empty sequence")


@dataclass
class NeighborBuffer:
    """Latest broadcast per neighbour plus each neighbour's extrapolation factor."""

    mu: dict = field(default_factory=dict)
    latest: dict = field(default_factory=dict)

    def ingest(self, b):
        """Keep ``b`` iff it is strictly newer than the stored one (ties keep the first)."""
        cur = self.latest.get(b.sender)
        if cur is None or b.instant > cur.instant:
            self.latest[b.sender] = b
        return self

    def staleness(self, j, k_now):
        b = self.latest.get(j)
        return None if b is None else k_now - b.instant


def ingest(buffer, b):
    return buffer.ingest(b)


def assumed_sequence(buffer, j, k_now, N, mu_j=None):
    """Time-aligned neighbour plan, geometrically extrapolated past its horizon."""
    b = buffer.latest.get(j)
    if b is None:
        raise ColdStartError(f"no broadcast received from neighbour {j}")
    mu = buffer.mu.get(j, 1.0) if mu_j is None else mu_j
    delta = k_now - b.instant
    if delta < 0:
        raise ValueError(f"broadcast from {j} is in the future (instant {b.instant} > {k_now})")
    # aligned while delta + tau <= N - 1; afterwards the mu-recursion runs from the
    # last aligned entry, or from the final broadcast value when nothing aligns
    last = len(b.s_seq) - 1
    out = np.empty(N)
    for t in range(N):
        idx = delta + t
        if idx < last:
            out[t] = b.s_seq[idx]
        else:
            out[t] = mu * (out[t - 1] if t > 0 else b.s_seq[last])
    return out


def coupling_cost(s_seq_i, assumed, rho):
    """``sum_j rho_j sum_tau (s_i(tau) - s_hat_j(tau))^2`` over the first ``N`` entries."""
    total = 0.0
    for a, r in zip(assumed, rho):
        a = np.asarray(a, float)
        d = np.asarray(s_seq_i, float)[: len(a)] - a
        total += r * float(d @ d)
    return total
