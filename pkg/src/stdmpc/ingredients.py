"""Offline terminal ingredients: feedback gain, terminal weight, radii and norm constants."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.stats import norm, qmc

from .errors import ConfigError, ModelError, SynthesisError


def _sym(M):
    M = np.atleast_2d(np.asarray(M, float))
    return M


def _is_spd(M, tol=0.0):
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12):
        return False
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).min()) > tol


def quadratic_difference_constant(M, state_set):
    """``L`` with ``||a||_M^2 - ||b||_M^2 <= L ||a - b||`` on ``state_set``.

    ``state_set`` is anything with ``max_norm()`` or a plain radius.
    """
    M = _sym(M)
    lam = float(np.abs(np.linalg.eigvalsh(0.5 * (M + M.T))).max()) if M.size else 0.0
    radius = float(state_set) if np.isscalar(state_set) else state_set.max_norm()
    if not np.isfinite(radius):
        raise ConfigError("state set is unbounded; weighted-norm constants need a bounded set")
    return 2.0 * lam * radius


@dataclass(frozen=True, eq=False)
class AgentIngredients:
    K: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    eps: float
    eps_r: float
    L_g: float
    L_kappa: float
    L_Q: float = 0.0
    L_Qstar: float = 0.0
    L_P: float = 0.0
    Q_star: np.ndarray = field(init=False)
    lambda_max_sqrtP: float = field(init=False)
    lambda_max_P: float = field(init=False)
    lambda_min_Qstar: float = field(init=False)
    lambda_min_Q: float = field(init=False)

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        for name in ("K", "P", "Q", "R"):
            a = _sym(getattr(self, name)).copy()
            a.setflags(write=False)
            set_(name, a)
        if not _is_spd(self.P):
            raise ConfigError("terminal weight P must be symmetric positive definite")
        if not _is_spd(self.Q) or not _is_spd(self.R):
            raise ConfigError("stage weights Q and R must be symmetric positive definite")
        if self.K.shape != (self.R.shape[0], self.Q.shape[0]):
            raise ConfigError(f"gain K has shape {self.K.shape}, expected {(self.R.shape[0], self.Q.shape[0])}")
        if not 0 < self.eps < self.eps_r:
            raise ConfigError(f"terminal radii must satisfy 0 < eps < eps_r (eps={self.eps}, eps_r={self.eps_r})")
        if self.L_g < 0 or self.L_kappa < 0:
            raise ConfigError("Lipschitz constants must be nonnegative")
        Qs = self.Q + self.K.T @ self.R @ self.K
        Qs.setflags(write=False)
        set_("Q_star", Qs)
        if not _is_spd(0.5 * (Qs + Qs.T)):
            raise ConfigError("Q* = Q + K'RK must be positive definite")
        lp = np.linalg.eigvalsh(self.P)
        set_("lambda_max_P", float(lp.max()))
        set_("lambda_max_sqrtP", float(np.sqrt(lp.max())))
        set_("lambda_min_Qstar", float(np.linalg.eigvalsh(0.5 * (Qs + Qs.T)).min()))
        set_("lambda_min_Q", float(np.linalg.eigvalsh(self.Q).min()))

    @classmethod
    def build(cls, K, P, Q, R, eps, eps_r, L_g, L_kappa, state_set):
        """Construct and fill the weighted-norm constants from ``state_set``."""
        ing = cls(K, P, Q, R, eps, eps_r, L_g, L_kappa)
        L_Q, L_Qs, L_P = weighted_norm_constants(ing, state_set)
        return cls(K, P, Q, R, eps, eps_r, L_g, L_kappa, L_Q, L_Qs, L_P)

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def m(self):
        return self.R.shape[0]

    def to_dict(self):
        return {
            "K": self.K.tolist(), "P": self.P.tolist(),
            "eps": self.eps, "eps_r": self.eps_r,
            "L_g": self.L_g, "L_kappa": self.L_kappa,
            "L_Q": self.L_Q, "L_Qstar": self.L_Qstar, "L_P": self.L_P,
        }


def weighted_norm_constants(ing, state_set):
    """``(L_Q, L_Qstar, L_P)`` via ``2 lambda_max(M) sup ||e||`` over ``state_set``."""
    return tuple(quadratic_difference_constant(M, state_set) for M in (ing.Q, ing.Q_star, ing.P))


def linearize(model, u_r=None, h=1e-6):
    """Jacobians ``(G, H)`` of the nominal model at the origin by central differences."""
    e0 = np.zeros(model.n)
    u0 = np.zeros(model.m)
    G = np.empty((model.n, model.n))
    H = np.empty((model.n, model.m))
    for j in range(model.n):
        d = np.zeros(model.n)
        d[j] = h
        G[:, j] = (model.step(e0 + d, u0, u_r) - model.step(e0 - d, u0, u_r)) / (2 * h)
    for j in range(model.m):
        d = np.zeros(model.m)
        d[j] = h
        H[:, j] = (model.step(e0, u0 + d, u_r) - model.step(e0, u0 - d, u_r)) / (2 * h)
    if not (np.all(np.isfinite(G)) and np.all(np.isfinite(H))):
        raise ModelError("linearization produced non-finite Jacobian entries")
    return G, H


def spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def synthesize_terminal(G, H, Q, R, margin=0.05):
    """LQR gain ``K`` (``u = K e``) and a terminal weight ``P`` solving

    ``Gc' P Gc - P = -(1 + margin) (Q + K' R K)``,  ``Gc = G + H K``.
    """
    G, H, Q, R = (np.atleast_2d(np.asarray(a, float)) for a in (G, H, Q, R))
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    try:
        X = sla.solve_discrete_are(G, H, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SynthesisError(f"Riccati solve failed; (G, H) is likely not stabilizable: {exc}") from exc
    K = -np.linalg.solve(H.T @ X @ H + R, H.T @ X @ G)
    Gc = G + H @ K
    if spectral_radius(Gc) >= 1.0:
        raise SynthesisError(f"closed loop not Schur stable (spectral radius {spectral_radius(Gc):.6f})")
    Qs = Q + K.T @ R @ K
    P = sla.solve_discrete_lyapunov(Gc.T, (1.0 + margin) * Qs)
    P = 0.5 * (P + P.T)
    return K, P


# --- sampling -----------------------------------------------------------------

def _sobol(d, count, seed):
    with warnings.catch_warnings():
        # balance properties are irrelevant for falsification sampling
        warnings.simplefilter("ignore", UserWarning)
        return qmc.Sobol(d=d, scramble=True, seed=seed).random(count)


def ellipsoid_samples(P, radius, count, seed=0, boundary_fraction=0.5):
    """Deterministic low-discrepancy points in ``{e : e' P e <= radius^2}``.

    A fraction of the points lies on the boundary, where decrease checks bind.
    """
    n = P.shape[0]
    if count <= 0:
        return np.zeros((0, n))
    pts = _sobol(n + 1, count, seed)
    pts = np.clip(pts, 1e-12, 1 - 1e-12)
    z = norm.ppf(pts[:, :n])
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    r = pts[:, n] ** (1.0 / n)
    nb = int(round(boundary_fraction * count))
    r[:nb] = 1.0
    L = np.linalg.cholesky(P)
    # e = radius * L^-T z gives e' P e = radius^2 |z|^2
    return radius * np.linalg.solve(L.T, (z * r[:, None]).T).T


def box_samples(box, count, seed=0):
    return box.lower + _sobol(box.dim, count, seed) * (box.upper - box.lower)


@dataclass
class Violation:
    check: str
    point: tuple
    amount: float


@dataclass
class ValidationReport:
    samples: int
    violations: list = field(default_factory=list)
    checks: tuple = ()

    @property
    def ok(self):
        return not self.violations

    def count(self, check):
        return sum(1 for v in self.violations if v.check == check)

    def worst(self, check):
        amounts = [v.amount for v in self.violations if v.check == check]
        return max(amounts) if amounts else 0.0

    def summary(self):
        if self.ok:
            return f"{self.samples} samples, no violations"
        parts = [f"{c}: {self.count(c)} (worst {self.worst(c):.3e})" for c in self.checks if self.count(c)]
        return f"{self.samples} samples, violations -> " + ", ".join(parts)


def validate_terminal_region(model, ing, samples, u_refs=None, seed=0, tol=1e-12):
    """Sample ``Omega(eps_r)`` and check input admissibility, invariance and decrease.

    Checks: ``input`` (K e in U), ``invariance`` (f(e, Ke) in Omega(eps_r)) and
    ``decrease`` (||f||_P^2 - ||e||_P^2 <= -||e||_Q*^2).
    """
    refs = [None] if u_refs is None else list(u_refs)
    pts = ellipsoid_samples(ing.P, ing.eps_r, samples, seed=seed)
    pts = np.vstack([np.zeros((1, ing.n)), pts])
    report = ValidationReport(samples=len(pts) * len(refs), checks=("input", "invariance", "decrease"))
    r2 = ing.eps_r ** 2
    for u_r in refs:
        for e in pts:
            u = ing.K @ e
            amt = model.input_box.violation(u)
            if amt > tol:
                report.violations.append(Violation("input", tuple(e), amt))
            nxt = model.step(e, u, u_r)
            vn = float(nxt @ ing.P @ nxt)
            ve = float(e @ ing.P @ e)
            if vn - r2 > tol:
                report.violations.append(Violation("invariance", tuple(e), vn - r2))
            dec = vn - ve + float(e @ ing.Q_star @ e)
            if dec > tol:
                report.violations.append(Violation("decrease", tuple(e), dec))
    return report


def validate_lipschitz(model, L, samples, u_refs=None, seed=0, region=None, gain=None):
    """Falsification check of ``||g(a) - g(b)|| <= L ||a - b||`` with ``g = f - e``.

    With ``gain`` given the input is ``gain @ e`` (closed loop) and points are drawn
    from ``region`` (a ``(P, radius)`` pair); otherwise pairs share a sampled input
    and points come from the model's state box.
    """
    refs = [None] if u_refs is None else list(u_refs)
    rng = np.random.default_rng(seed)
    if region is not None:
        a = ellipsoid_samples(region[0], region[1], samples, seed=seed, boundary_fraction=0.2)
        b = ellipsoid_samples(region[0], region[1], samples, seed=seed + 1, boundary_fraction=0.2)
    else:
        a = box_samples(model.state_box, samples, seed=seed)
        b = box_samples(model.state_box, samples, seed=seed + 1)
    # include close pairs, where the local slope is probed
    b[: samples // 2] = a[: samples // 2] + 1e-3 * rng.standard_normal((samples // 2, model.n))
    if region is None:
        b = np.clip(b, model.state_box.lower, model.state_box.upper)
    us = box_samples(model.input_box, samples, seed=seed + 2)
    report = ValidationReport(samples=samples * len(refs), checks=("lipschitz",))
    for u_r in refs:
        for i in range(samples):
            ua = gain @ a[i] if gain is not None else us[i]
            ub = gain @ b[i] if gain is not None else us[i]
            ga = model.step(a[i], ua, u_r) - a[i]
            gb = model.step(b[i], ub, u_r) - b[i]
            dist = np.linalg.norm(a[i] - b[i])
            if dist == 0:
                continue
            excess = np.linalg.norm(ga - gb) - L * dist
            if excess > 1e-12 * max(1.0, dist):
                report.violations.append(Violation("lipschitz", tuple(a[i]), excess / dist))
    return report


def estimate_closed_loop_lipschitz(model, K, P, eps_r, u_refs=None, samples=2000, seed=0, safety=0.1):
    """Sampled ``sup ||d g(e, K e) / de||`` over ``Omega(eps_r)``, inflated by ``safety``."""
    refs = [None] if u_refs is None else list(u_refs)
    pts = ellipsoid_samples(P, eps_r, samples, seed=seed)
    worst = 0.0
    I = np.eye(model.n)
    for u_r in refs:
        for e in pts:
            A, B = model.jacobians(e, K @ e, u_r)
            worst = max(worst, float(np.linalg.norm(A + B @ K - I, 2)))
    return worst * (1.0 + safety)


DEFAULT_MARGINS = (0.05, 0.1, 0.2, 0.3, 0.5, 1.0)


def synthesize_validated(model, Q, R, eps, eps_r, u_refs, margins=DEFAULT_MARGINS, samples=4096, seed=0):
    """Terminal ingredients for ``model`` linearised at ``u_refs[0]``.

    The Lyapunov margin is raised until ``Omega(eps_r)`` passes sampled validation
    for every reference in ``u_refs``.  Returns ``(K, P, margin, report)``.
    """
    G, H = linearize(model, u_refs[0])
    report = None
    for margin in margins:
        K, P = synthesize_terminal(G, H, Q, R, margin=margin)
        ing = AgentIngredients(K, P, Q, R, eps, eps_r, 0.0, 0.0)
        report = validate_terminal_region(model, ing, samples, u_refs=u_refs, seed=seed)
        if report.ok:
            return K, P, margin, report
    raise SynthesisError(f"terminal region fails validation at every margin up to {margins[-1]}: {report.summary()}")


def lyapunov_residual(Gc, P, Qs):
    """Largest eigenvalue of ``Gc' P Gc - P + Q*`` (<= 0 means the linear decrease holds)."""
    M = Gc.T @ P @ Gc - P + Qs
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).max())
