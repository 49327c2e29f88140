"""Discrete-time error-subsystem models, reference paths and the sync-parameter law.

A model maps ``(e, u, u_r) -> e+`` where ``u_r`` is the reference input at the
current step.  Models that do not depend on a reference simply ignore it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DisturbanceBoundError, ModelError, SingularReferenceError
from .tightening import BoxSet


class ErrorModel:
    """Interface for the nominal error dynamics ``e+ = f(e, u; u_r)``."""

    kind = "abstract"
    n: int
    m: int
    state_box: BoxSet
    input_box: BoxSet

    def step(self, e, u, u_r=None):
        raise NotImplementedError

    def jacobians(self, e, u, u_r=None, h=1e-6):
        """Return ``(df/de, df/du)`` at ``(e, u)``; central differences by default."""
        e = np.asarray(e, float)
        u = np.asarray(u, float)
        A = np.empty((self.n, self.n))
        B = np.empty((self.n, self.m))
        for j in range(self.n):
            d = np.zeros(self.n)
            d[j] = h
            A[:, j] = (self.step(e + d, u, u_r) - self.step(e - d, u, u_r)) / (2 * h)
        for j in range(self.m):
            d = np.zeros(self.m)
            d[j] = h
            B[:, j] = (self.step(e, u + d, u_r) - self.step(e, u - d, u_r)) / (2 * h)
        return A, B

    def lipschitz_g(self, u_r=None):
        """Analytic bound on the e-Lipschitz constant of ``g = f - e``, if known."""
        return None

    def to_dict(self):
        raise NotImplementedError


class UnicycleErrorModel(ErrorModel):
    """Tracking-error model of a unicycle robot, discretized with period ``T``.

    State ``(x_e, y_e, theta_e)``, input ``(v_e, w_e)``, reference ``(v_r, w_r)``.
    The robot's angular velocity is ``w = w_r - w_e``.
    """

    kind = "unicycle"
    n = 3
    m = 2

    def __init__(self, T, state_box=None, input_box=None):
        if not T > 0:
            raise DimensionError(f"unicycle: sampling period T must be positive, got {T}")
        self.T = float(T)
        self.state_box = state_box or BoxSet.symmetric([0.3, 0.3, math.pi / 10])
        self.input_box = input_box or BoxSet.symmetric([1.0, 1.0])
        if self.state_box.dim != 3 or self.input_box.dim != 2:
            raise DimensionError("unicycle: state box must be 3-D and input box 2-D")

    def step(self, e, u, u_r=None):
        x, y, th = e
        ve, we = u
        vr, wr = (0.0, 0.0) if u_r is None else u_r
        w = wr - we
        T = self.T
        return np.array([
            x + T * (w * y + ve),
            y + T * (-w * x + vr * math.sin(th)),
            th + T * we,
        ])

    def jacobians(self, e, u, u_r=None, h=None):
        x, y, th = e
        _, we = u
        vr, wr = (0.0, 0.0) if u_r is None else u_r
        w = wr - we
        T = self.T
        A = np.array([
            [1.0, T * w, 0.0],
            [-T * w, 1.0, T * vr * math.cos(th)],
            [0.0, 0.0, 1.0],
        ])
        B = np.array([
            [T, -T * y],
            [0.0, T * x],
            [0.0, T],
        ])
        return A, B

    def lipschitz_g(self, u_r=None):
        vr, wr = (0.0, 0.0) if u_r is None else u_r
        w_max = abs(wr) + float(np.max(np.abs([self.input_box.lower[1], self.input_box.upper[1]])))
        return self.T * (w_max + abs(vr))

    def to_dict(self):
        return {
            "kind": self.kind,
            "T": self.T,
            "state_lower": self.state_box.lower.tolist(),
            "state_upper": self.state_box.upper.tolist(),
            "input_lower": self.input_box.lower.tolist(),
            "input_upper": self.input_box.upper.tolist(),
        }


class LinearErrorModel(ErrorModel):
    kind = "linear"

    def __init__(self, G, H, state_box=None, input_box=None):
        self.G = np.atleast_2d(np.asarray(G, float))
        self.H = np.atleast_2d(np.asarray(H, float))
        self.n, self.m = self.H.shape
        if self.G.shape != (self.n, self.n):
            raise DimensionError(f"linear model: G shape {self.G.shape} incompatible with H shape {self.H.shape}")
        self.state_box = state_box or BoxSet.symmetric([1e6] * self.n)
        self.input_box = input_box or BoxSet.symmetric([1e6] * self.m)

    def step(self, e, u, u_r=None):
        return self.G @ np.asarray(e, float) + self.H @ np.asarray(u, float)

    def jacobians(self, e, u, u_r=None, h=None):
        return self.G.copy(), self.H.copy()

    def lipschitz_g(self, u_r=None):
        return float(np.linalg.norm(self.G - np.eye(self.n), 2))

    def to_dict(self):
        return {
            "kind": self.kind,
            "G": self.G.tolist(),
            "H": self.H.tolist(),
            "state_lower": self.state_box.lower.tolist(),
            "state_upper": self.state_box.upper.tolist(),
            "input_lower": self.input_box.lower.tolist(),
            "input_upper": self.input_box.upper.tolist(),
        }


def model_from_dict(d, T=None):
    kind = d.get("kind")
    sb = BoxSet(d["state_lower"], d["state_upper"]) if "state_lower" in d else None
    ib = BoxSet(d["input_lower"], d["input_upper"]) if "input_lower" in d else None
    if kind == "unicycle":
        return UnicycleErrorModel(d.get("T", T), sb, ib)
    if kind == "linear":
        return LinearErrorModel(d["G"], d["H"], sb, ib)
    raise ModelError(f"unknown model kind {kind!r}")


def _check_dims(model, e, u):
    e = np.asarray(e, float)
    u = np.asarray(u, float)
    if e.shape != (model.n,):
        raise DimensionError(f"error state has shape {e.shape}, model expects ({model.n},)")
    if u.shape != (model.m,):
        raise DimensionError(f"control input has shape {u.shape}, model expects ({model.m},)")
    return e, u


def step_nominal(model, e, u, u_r=None):
    e, u = _check_dims(model, e, u)
    return model.step(e, u, u_r)


def step_true(model, e, u, d, u_r=None, eta=None):
    """Disturbed step ``f(e, u) + d``; rejects ``d`` outside the ``eta`` ball."""
    e, u = _check_dims(model, e, u)
    d = np.asarray(d, float)
    if d.shape != (model.n,):
        raise DimensionError(f"disturbance has shape {d.shape}, model expects ({model.n},)")
    if eta is not None and np.linalg.norm(d) > eta * (1 + 1e-12):
        raise DisturbanceBoundError(f"|d| = {np.linalg.norm(d):.3e} exceeds eta = {eta:.3e}")
    return model.step(e, u, u_r) + d


def rollout(model, e0, u_seq, u_ref=None):
    """Nominal state sequence of length ``len(u_seq) + 1``."""
    u_seq = np.asarray(u_seq, float)
    out = np.empty((len(u_seq) + 1, model.n))
    out[0] = e0
    for t, u in enumerate(u_seq):
        out[t + 1] = model.step(out[t], u, None if u_ref is None else u_ref[t])
    return out


def sample_disturbance(rng, n, eta):
    """Uniform draw from the Euclidean ball of radius ``eta`` in R^n."""
    if eta <= 0:
        return np.zeros(n)
    z = rng.standard_normal(n)
    z /= np.linalg.norm(z)
    return eta * rng.random() ** (1.0 / n) * z


# --- synchronization parameter ---------------------------------------------

@dataclass(frozen=True)
class SyncParam:
    value: float
    Y: tuple
    Z: tuple
    T: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ConfigError("sync parameter must be finite")
        if not self.T > 0:
            raise ConfigError("sync period T must be positive")
        object.__setattr__(self, "Y", tuple(float(v) for v in self.Y))
        object.__setattr__(self, "Z", tuple(float(v) for v in self.Z))
        if len(self.Y) != len(self.Z):
            raise DimensionError("sync weights Y and Z must have equal length")


def step_sync(sp, u, u_r):
    """``s + T (Y u + Z u_r)``."""
    u = np.asarray(u, float)
    u_r = np.asarray(u_r, float)
    if u.shape != (len(sp.Y),) or u_r.shape != (len(sp.Z),):
        raise DimensionError(f"sync law expects inputs of length {len(sp.Y)}")
    inc = sp.T * (float(np.dot(sp.Y, u)) + float(np.dot(sp.Z, u_r)))
    return SyncParam(sp.value + inc, sp.Y, sp.Z, sp.T)


def sync_rollout(s0, u_seq, u_ref, Y, Z, T):
    """Sync-parameter sequence of length ``len(u_seq) + 1``."""
    inc = T * (np.asarray(u_seq, float) @ np.asarray(Y, float) + np.asarray(u_ref, float) @ np.asarray(Z, float))
    return np.concatenate([[s0], s0 + np.cumsum(inc)])


# --- reference paths --------------------------------------------------------

@dataclass(frozen=True)
class HarmonicPath:
    """Planar path ``sum_k a_k (cos(w_k s + p_k), sin(w_k s + p_k))`` plus an offset.

    Covers circles and the superposed-circle formation paths.
    """

    terms: tuple
    offset: tuple = (0.0, 0.0)
    kind: str = field(default="harmonic", init=False)

    def __call__(self, s):
        x, y = self.offset
        for a, w, p in self.terms:
            x += a * math.cos(w * s + p)
            y += a * math.sin(w * s + p)
        return np.array([x, y])

    def to_dict(self):
        return {"kind": self.kind, "terms": [list(t) for t in self.terms], "offset": list(self.offset)}


@dataclass(frozen=True)
class LinePath:
    origin: tuple
    direction: tuple
    kind: str = field(default="line", init=False)

    def __call__(self, s):
        return np.asarray(self.origin, float) + s * np.asarray(self.direction, float)

    def to_dict(self):
        return {"kind": self.kind, "origin": list(self.origin), "direction": list(self.direction)}


def path_from_dict(d):
    kind = d.get("kind")
    if kind == "harmonic":
        return HarmonicPath(tuple(tuple(float(v) for v in t) for t in d["terms"]),
                            tuple(d.get("offset", (0.0, 0.0))))
    if kind == "line":
        return LinePath(tuple(d["origin"]), tuple(d["direction"]))
    raise ModelError(f"unknown path kind {kind!r}")


def _path_derivatives(path, s, h):
    p_plus, p0, p_minus = path(s + h), path(s), path(s - h)
    d1 = (p_plus - p_minus) / (2 * h)
    d2 = (p_plus - 2 * p0 + p_minus) / (h * h)
    return p0, d1, d2


def reference_inputs(path, s, rate=1.0, h=1e-3):
    """Reference ``(v_r, w_r)`` of a point moving along ``path`` with ``ds/dt = rate``."""
    _, d1, d2 = _path_derivatives(path, s, h)
    speed2 = float(d1 @ d1)
    if speed2 < 1e-20:
        raise SingularReferenceError(f"path has zero speed at s={s}")
    v_r = math.sqrt(speed2) * rate
    w_r = (d1[0] * d2[1] - d1[1] * d2[0]) / speed2 * rate
    return v_r, w_r


def reference_pose(path, s, h=1e-3):
    p0, d1, _ = _path_derivatives(path, s, h)
    return float(p0[0]), float(p0[1]), math.atan2(d1[1], d1[0])


def reference_table(path, steps, T, rate=1.0, s0=0.0, h=1e-3):
    """Reference inputs for steps ``0..steps-1`` along ``s_k = s0 + rate k T``."""
    return np.array([reference_inputs(path, s0 + rate * k * T, rate, h) for k in range(steps)]).reshape(steps, 2)
