"""Box state sets, P-weighted balls and the disturbance-driven constraint tightening."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InfeasibleTighteningError


@dataclass(frozen=True, eq=False)
class BoxSet:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, float).ravel()
        hi = np.asarray(self.upper, float).ravel()
        if lo.shape != hi.shape:
            raise ConfigError(f"box bounds have mismatched shapes {lo.shape} and {hi.shape}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half_widths):
        h = np.asarray(half_widths, float)
        return cls(-h, h)

    @property
    def dim(self):
        return self.lower.size

    @property
    def is_empty(self):
        return bool(np.any(self.lower > self.upper))

    @property
    def is_bounded(self):
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def contains(self, x, tol=0.0):
        x = np.asarray(x, float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def violation(self, x):
        """Largest amount by which ``x`` leaves the box (<= 0 inside)."""
        x = np.asarray(x, float)
        return float(max(np.max(self.lower - x), np.max(x - self.upper)))

    def max_norm(self):
        """``sup ||x||`` over the box."""
        if not self.is_bounded:
            raise ConfigError("state set is unbounded; weighted-norm constants need a bounded set")
        return float(np.linalg.norm(np.maximum(np.abs(self.lower), np.abs(self.upper))))

    def __eq__(self, other):
        return (isinstance(other, BoxSet) and np.array_equal(self.lower, other.lower)
                and np.array_equal(self.upper, other.upper))

    def __repr__(self):
        return f"BoxSet(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


@dataclass(frozen=True, eq=False)
class WeightedBall:
    """``{x : ||x||_P <= r}``."""

    P: np.ndarray
    r: float

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, float))
        if self.r < 0:
            raise ConfigError(f"ball radius must be nonnegative, got {self.r}")
        object.__setattr__(self, "P", P)

    def contains(self, x, tol=0.0):
        x = np.asarray(x, float)
        return float(x @ self.P @ x) <= self.r ** 2 + tol

    def support(self, direction):
        """``max d^T x`` over the ball, i.e. ``r sqrt(d^T P^-1 d)``."""
        d = np.asarray(direction, float)
        return self.r * math.sqrt(float(d @ np.linalg.solve(self.P, d)))

    def axis_extent(self):
        """Support along each coordinate axis: ``r sqrt((P^-1)_jj)``."""
        return self.r * np.sqrt(np.diag(np.linalg.inv(self.P)))


def lambda_radius(tau, eta, ing):
    """P-norm radius of the disturbance-propagation set after ``tau`` steps."""
    if tau < 0 or eta < 0:
        raise ValueError("tau and eta must be nonnegative")
    if tau == 0:
        return 0.0
    return tau * eta * ing.lambda_max_sqrtP * (1.0 + ing.L_g) ** (tau - 1)


def erode_box(box, ball, tau=None):
    """Pontryagin difference ``box - ball`` (exact for an axis-aligned box)."""
    ext = ball.axis_extent()
    out = BoxSet(box.lower + ext, box.upper - ext)
    if out.is_empty:
        where = "" if tau is None else f" at tau={tau}"
        raise InfeasibleTighteningError(f"tightened state set is empty{where}", tau=tau)
    return out


def tightened_boxes(box, ing, eta, N):
    """Boxes ``E - Lambda(tau)`` for ``tau = 0..N``."""
    return [erode_box(box, WeightedBall(ing.P, lambda_radius(t, eta, ing)), tau=t) for t in range(N + 1)]


def _growth(L, N, m):
    """``((1+L)^N - (1+L)^(N-m)) / L`` with its ``L -> 0`` limit ``m``."""
    if L == 0:
        return float(m)
    return ((1.0 + L) ** N - (1.0 + L) ** (N - m)) / L


def admissible_eta(ing, N):
    """Largest disturbance bound keeping the shifted candidate inside the enlarged terminal set."""
    if N < 1:
        raise ValueError("horizon must be >= 1")
    return (ing.eps_r - ing.eps) / (ing.lambda_max_sqrtP * _growth(ing.L_g, N, N))


def contraction_factor(ing):
    return 1.0 - ing.lambda_min_Qstar / ing.lambda_max_P


def upsilon_eta_bound(ing, N):
    """Largest ``eta`` with the terminal-containment condition non-positive for every phase length.

    Per phase ``m`` the condition reads ``eps + eta sqrt(lmax P) G(m) <= eps c^(-m/2)``.
    """
    c = contraction_factor(ing)
    if not 0 < c < 1:
        raise ConfigError(f"contraction factor {c} outside (0, 1)")
    bounds = [ing.eps * (c ** (-m / 2) - 1.0) / (ing.lambda_max_sqrtP * _growth(ing.L_g, N, m))
              for m in range(1, N + 1)]
    return min(bounds)


def lemma1_eta_bound(ing, N):
    """``eta`` admissible for both terminal-containment conditions at once."""
    return min(admissible_eta(ing, N), upsilon_eta_bound(ing, N))


def check_inclusion(omega, tightened):
    """True iff the ball ``omega`` lies inside the box ``tightened``."""
    if tightened.is_empty:
        return False
    ext = omega.axis_extent()
    return bool(np.all(-ext >= tightened.lower) and np.all(ext <= tightened.upper))
