"""Finite-horizon optimal control problem with tightened state constraints,
terminal set, sync-coupling cost and the cost-decrease (stability) constraint.

Single shooting: the decision variables are the N inputs; states and sync values
are eliminated by rollout, so dynamics hold exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize, nnls

from .errors import DivergedRolloutError, InfeasibleProblemError

BOX_TOL = 1e-7
TERMINAL_TOL = 1e-9
STABILITY_TOL = 1e-7
INPUT_TOL = 1e-9


@dataclass
class OcpProblem:
    model: object
    ing: object
    e0: np.ndarray
    s0: float
    Y: np.ndarray
    Z: np.ndarray
    T: float
    u_ref: np.ndarray          # (N, m) reference inputs for tau = 0..N-1
    boxes: list                # tightened state boxes for tau = 0..N
    assumed: list = field(default_factory=list)   # per neighbour, length-N arrays
    rho: list = field(default_factory=list)
    phi: float | None = None

    def __post_init__(self):
        self.e0 = np.asarray(self.e0, float)
        self.Y = np.asarray(self.Y, float)
        self.Z = np.asarray(self.Z, float)
        self.u_ref = np.asarray(self.u_ref, float).reshape(-1, self.model.m)
        self.assumed = [np.asarray(a, float) for a in self.assumed]
        if len(self.boxes) != self.N + 1:
            raise ValueError(f"need N+1={self.N + 1} tightened boxes, got {len(self.boxes)}")
        if len(self.assumed) != len(self.rho):
            raise ValueError("one coupling weight per assumed neighbour sequence")
        if any(len(a) != self.N for a in self.assumed):
            raise ValueError(f"assumed sequences must have length N={self.N}")
        if any(r < 0 for r in self.rho):
            raise ValueError("coupling weights must be nonnegative")
        if any(b.is_empty for b in self.boxes):
            raise ValueError("tightened state boxes must be nonempty")

    @property
    def N(self):
        return len(self.u_ref)


class Cost(NamedTuple):
    J: float
    H: float
    coupling: float


@dataclass
class PredictedSolution:
    u_seq: np.ndarray
    e_seq: np.ndarray
    s_seq: np.ndarray
    H: float
    coupling: float
    J: float
    status: str
    diagnostics: dict = field(default_factory=dict)


def rollout_states(problem, u_seq):
    model = problem.model
    E = np.empty((problem.N + 1, model.n))
    E[0] = problem.e0
    for t in range(problem.N):
        E[t + 1] = model.step(E[t], u_seq[t], problem.u_ref[t])
    if not np.all(np.isfinite(E)):
        raise DivergedRolloutError("non-finite state in rollout")
    return E


def rollout_sync(problem, u_seq):
    inc = problem.T * (u_seq @ problem.Y + problem.u_ref @ problem.Z)
    return np.concatenate([[problem.s0], problem.s0 + np.cumsum(inc)])


def stage_cost(ing, E, U):
    """``sum ||e||_Q^2 + ||u||_R^2`` over the horizon plus the terminal weight."""
    Q, R, P = ing.Q, ing.R, ing.P
    h = float(np.einsum("ti,ij,tj->", E[:-1], Q, E[:-1]) + np.einsum("ti,ij,tj->", U, R, U))
    return h + float(E[-1] @ P @ E[-1])


def coupling_terms(s_seq, assumed, rho, N):
    return float(sum(r * np.sum((s_seq[:N] - a[:N]) ** 2) for a, r in zip(assumed, rho)))


def build_cost(problem, u_seq):
    """Roll out the nominal model and sync law; return ``(J, H, coupling)``."""
    u_seq = np.asarray(u_seq, float).reshape(problem.N, problem.model.m)
    E = rollout_states(problem, u_seq)
    S = rollout_sync(problem, u_seq)
    H = stage_cost(problem.ing, E, u_seq)
    c = coupling_terms(S, problem.assumed, problem.rho, problem.N)
    if not np.isfinite(H + c):
        raise DivergedRolloutError("non-finite cost")
    return Cost(H + c, H, c)


def constraint_violations(problem, u_seq, E=None, H=None, first_state=1):
    """Positive entries are violation amounts of the input, state, terminal and
    stability constraints; state boxes are checked for ``tau >= first_state``."""
    u_seq = np.asarray(u_seq, float).reshape(problem.N, problem.model.m)
    if E is None:
        E = rollout_states(problem, u_seq)
    if H is None:
        H = stage_cost(problem.ing, E, u_seq)
    ib = problem.model.input_box
    out = {
        "input": max(ib.violation(u) for u in u_seq),
        "state": max((problem.boxes[t].violation(E[t]) for t in range(first_state, problem.N)), default=-np.inf),
        "terminal": float(E[-1] @ problem.ing.P @ E[-1]) - problem.ing.eps ** 2,
        "stability": (H - problem.phi) if problem.phi is not None else -np.inf,
    }
    return out


_TOLS = {"input": INPUT_TOL, "state": BOX_TOL, "terminal": TERMINAL_TOL, "stability": STABILITY_TOL}


def is_feasible(viol):
    return all(viol[k] <= _TOLS[k] for k in _TOLS)


def most_violated(viol):
    name = max(viol, key=lambda k: viol[k] - _TOLS[k])
    return name, float(viol[name])


class _Evaluator:
    """Rollout with forward sensitivities, cached on the last decision vector."""

    def __init__(self, problem):
        self.p = problem
        self.N = problem.N
        self.n = problem.model.n
        self.m = problem.model.m
        self.nv = self.N * self.m
        self._key = None
        lo = np.array([b.lower for b in problem.boxes[1:]])
        hi = np.array([b.upper for b in problem.boxes[1:]])
        self.lo, self.hi = lo, hi
        # d s_t / d u_j = T Y for j < t
        self.tri = np.tril(np.ones((self.N, self.N)), -1)

    def eval(self, x):
        key = x.tobytes()
        if key == self._key:
            return
        p, N, n, m = self.p, self.N, self.n, self.m
        U = x.reshape(N, m)
        E = np.empty((N + 1, n))
        Sx = np.zeros((N + 1, n, self.nv))
        E[0] = p.e0
        for t in range(N):
            A, B = p.model.jacobians(E[t], U[t], p.u_ref[t])
            E[t + 1] = p.model.step(E[t], U[t], p.u_ref[t])
            Sx[t + 1] = A @ Sx[t]
            Sx[t + 1][:, t * m:(t + 1) * m] += B
        if not np.all(np.isfinite(E)):
            raise DivergedRolloutError("non-finite state in rollout")
        ing = p.ing
        QE = E[:-1] @ ing.Q
        RU = U @ ing.R
        PE = ing.P @ E[-1]
        H = float(np.sum(QE * E[:-1]) + np.sum(RU * U) + E[-1] @ PE)
        gH = 2.0 * np.einsum("ti,tiv->v", QE, Sx[:-1]) + 2.0 * RU.ravel() + 2.0 * PE @ Sx[-1]
        S = rollout_sync(p, U)
        coup = 0.0
        gC = np.zeros(self.nv)
        for a, r in zip(p.assumed, p.rho):
            diff = S[:N] - a
            coup += r * float(diff @ diff)
            # sum_t 2 r diff_t T sum_{j<t} Y u_j
            w = 2.0 * r * p.T * (diff @ self.tri)          # weight per input step j
            gC += np.outer(w, p.Y).ravel()
        self.U, self.E, self.Sx, self.S = U, E, Sx, S
        self.H, self.gH, self.coup, self.gC = H, gH, coup, gC
        self._key = key

    def J(self, x):
        self.eval(x)
        return self.H + self.coup

    def gJ(self, x):
        self.eval(x)
        return self.gH + self.gC

    def box(self, x):
        self.eval(x)
        Es = self.E[1:]
        return np.concatenate([(self.hi - Es).ravel(), (Es - self.lo).ravel()])

    def gbox(self, x):
        self.eval(x)
        J = self.Sx[1:].reshape(-1, self.nv)
        return np.vstack([-J, J])

    def term(self, x):
        self.eval(x)
        P = self.p.ing.P
        return np.array([self.p.ing.eps ** 2 - self.E[-1] @ P @ self.E[-1]])

    def gterm(self, x):
        self.eval(x)
        return (-2.0 * (self.p.ing.P @ self.E[-1]) @ self.Sx[-1])[None, :]

    def stab(self, x):
        self.eval(x)
        return np.array([self.p.phi - self.H])

    def gstab(self, x):
        self.eval(x)
        return -self.gH[None, :]


def _constraints(ev, problem, scale_slack=None):
    cons = [{"type": "ineq", "fun": ev.box, "jac": ev.gbox},
            {"type": "ineq", "fun": ev.term, "jac": ev.gterm}]
    if problem.phi is not None:
        cons.append({"type": "ineq", "fun": ev.stab, "jac": ev.gstab})
    return cons


def _bounds(problem):
    ib = problem.model.input_box
    return [(lo, hi) for _ in range(problem.N) for lo, hi in zip(ib.lower, ib.upper)]


def _kkt_residual(ev, problem, x, tol=1e-8):
    """Stationarity residual with NNLS multipliers on the active set."""
    g = ev.gJ(x)
    rows = []
    for fun, jac in ((ev.box, ev.gbox), (ev.term, ev.gterm)) + (((ev.stab, ev.gstab),) if problem.phi is not None else ()):
        val, jj = fun(x), jac(x)
        rows.extend(jj[val <= tol])
    lo = np.array([b[0] for b in _bounds(problem)])
    hi = np.array([b[1] for b in _bounds(problem)])
    eye = np.eye(len(x))
    rows.extend(eye[x <= lo + tol])
    rows.extend(-eye[x >= hi - tol])
    if not rows:
        return float(np.linalg.norm(g))
    A = np.array(rows).T
    _, res = nnls(A, g)
    return float(res)


def _finalize(problem, x, status, diag):
    U = x.reshape(problem.N, problem.model.m).copy()
    E = rollout_states(problem, U)
    S = rollout_sync(problem, U)
    H = stage_cost(problem.ing, E, U)
    c = coupling_terms(S, problem.assumed, problem.rho, problem.N)
    return PredictedSolution(U, E, S, H, c, H + c, status, diag)


def _run_slsqp(ev, problem, x0, max_iter, tol):
    bnds = _bounds(problem)
    lo = np.array([b[0] for b in bnds])
    hi = np.array([b[1] for b in bnds])
    x0 = np.clip(x0, lo, hi)
    res = minimize(ev.J, x0, jac=ev.gJ, bounds=bnds, constraints=_constraints(ev, problem),
                   method="SLSQP", options={"maxiter": max_iter, "ftol": tol * 1e-3})
    x = np.clip(res.x, lo, hi)
    return x, res


def _elastic(problem, x0, max_iter, weights=(1e4, 1e2, 1e2)):
    """Minimise ``J + sum_f w_f t_f`` with each constraint family ``f`` (state
    boxes, terminal set, stability) relaxed by its own slack ``t_f >= 0``.

    Slacks are relative: box violations per unit of half-width, terminal per
    ``eps^2``, stability per ``|phi|``.  The heavy box weight keeps the
    least-violation point inside the state constraints whenever possible.
    """
    ev = _Evaluator(problem)
    nv = ev.nv
    eps2 = problem.ing.eps ** 2
    half = 0.5 * (problem.model.state_box.upper - problem.model.state_box.lower)
    box_scale = np.concatenate([np.tile(half, problem.N), np.tile(half, problem.N)])
    fams = [(ev.box, ev.gbox, box_scale), (ev.term, ev.gterm, np.array([eps2]))]
    if problem.phi is not None:
        fams.append((ev.stab, ev.gstab, np.array([max(abs(problem.phi), 1e-3)])))
    nf = len(fams)
    w = np.array(weights[:nf])

    def fun(z):
        return ev.J(z[:nv]) + float(w @ z[nv:])

    def gfun(z):
        return np.concatenate([ev.gJ(z[:nv]), w])

    def family(i, f, g, scale):
        def c(z):
            return f(z[:nv]) / scale + z[nv + i]

        def gc(z):
            jj = g(z[:nv]) / scale[:, None]
            sl = np.zeros((jj.shape[0], nf))
            sl[:, i] = 1.0
            return np.hstack([jj, sl])
        return {"type": "ineq", "fun": c, "jac": gc}

    cons = [family(i, *fam) for i, fam in enumerate(fams)]
    bnds = _bounds(problem) + [(0.0, None)] * nf
    lo = np.array([b[0] for b in bnds[:nv]])
    hi = np.array([b[1] for b in bnds[:nv]])
    x0 = np.clip(x0, lo, hi)
    t0 = [max(0.0, -float(np.min(f(x0) / sc))) + 1e-6 for f, _, sc in fams]
    res = minimize(fun, np.concatenate([x0, t0]), jac=gfun, bounds=bnds, constraints=cons,
                   method="SLSQP", options={"maxiter": max_iter, "ftol": 1e-12})
    return np.clip(res.x[:nv], lo, hi), res


def terminal_feedback_guess(problem):
    """Rollout of ``u = sat(K e)``; a cheap initial guess."""
    U = np.empty((problem.N, problem.model.m))
    e = problem.e0.copy()
    ib = problem.model.input_box
    for t in range(problem.N):
        U[t] = np.clip(problem.ing.K @ e, ib.lower, ib.upper)
        e = problem.model.step(e, U[t], problem.u_ref[t])
    return U.ravel()


def solve(problem, warm_start=None, max_iter=200, tol=1e-7):
    """Solve the OCP; raises ``InfeasibleProblemError`` when no feasible point is found.

    Starts are tried in order: warm start, saturated terminal feedback, zero input.
    The returned solution never costs more than a feasible warm start.
    """
    ev = _Evaluator(problem)
    starts = []
    if warm_start is not None:
        starts.append(np.asarray(warm_start, float).ravel())
    starts.append(terminal_feedback_guess(problem))
    starts.append(np.zeros(ev.nv))

    ws_sol = None
    if warm_start is not None:
        ws_viol = constraint_violations(problem, starts[0])
        if is_feasible(ws_viol) and np.all(np.abs(starts[0]) < np.inf):
            ws_sol = _finalize(problem, starts[0], "converged", {})

    best = None
    best_viol = None
    attempts = 0
    for x0 in starts:
        attempts += 1
        x, res = _run_slsqp(ev, problem, x0, max_iter, tol)
        viol = constraint_violations(problem, x)
        if is_feasible(viol):
            status = "converged" if res.status == 0 else "max-iter"
            diag = {"iterations": int(res.nit), "attempts": attempts, "message": str(res.message),
                    "kkt": _kkt_residual(ev, problem, x), **{f"res_{k}": v for k, v in viol.items()}}
            sol = _finalize(problem, x, status, diag)
            if ws_sol is not None and ws_sol.J < sol.J:
                ws_sol.diagnostics = {**diag, "kept_warm_start": True}
                return ws_sol
            return sol
        score = max(viol[k] - _TOLS[k] for k in _TOLS)
        if best is None or score < best_viol:
            best, best_viol = x, score

    if ws_sol is not None:
        ws_sol.diagnostics = {"attempts": attempts, "kept_warm_start": True}
        return ws_sol

    # the coupling term can stall SLSQP on a feasible problem: find a feasible
    # point of the decoupled problem first and continue from there
    if any(r > 0 for r in problem.rho):
        decoupled = replace(problem, rho=[0.0] * len(problem.rho))
        try:
            dsol = solve(decoupled, warm_start=best, max_iter=max_iter, tol=tol)
        except InfeasibleProblemError:
            dsol = None
        if dsol is not None:
            attempts += 1
            x, res = _run_slsqp(ev, problem, dsol.u_seq.ravel(), max_iter, tol)
            viol = constraint_violations(problem, x)
            if not is_feasible(viol):
                x, viol = dsol.u_seq.ravel(), constraint_violations(problem, dsol.u_seq)
                res_status, nit, msg = 9, int(res.nit), "decoupled feasible point"
            else:
                res_status, nit, msg = res.status, int(res.nit), str(res.message)
            diag = {"iterations": nit, "attempts": attempts, "message": msg, "decoupled_start": True,
                    "kkt": _kkt_residual(ev, problem, x), **{f"res_{k}": v for k, v in viol.items()}}
            return _finalize(problem, x, "converged" if res_status == 0 else "max-iter", diag)

    # phase 1: least-violation point via an elastic program, then re-polish
    x, res = _elastic(problem, best, max_iter)
    x2, res2 = _run_slsqp(ev, problem, x, max_iter, tol)
    v2 = constraint_violations(problem, x2)
    if is_feasible(v2):
        diag = {"iterations": int(res2.nit), "attempts": attempts + 2, "message": str(res2.message),
                "elastic": True, "kkt": _kkt_residual(ev, problem, x2), **{f"res_{k}": v for k, v in v2.items()}}
        return _finalize(problem, x2, "converged" if res2.status == 0 else "max-iter", diag)
    viol = constraint_violations(problem, x)
    if is_feasible(viol):
        diag = {"iterations": int(res.nit), "attempts": attempts + 2, "message": str(res.message),
                "elastic": True, **{f"res_{k}": v for k, v in viol.items()}}
        return _finalize(problem, x, "max-iter", diag)
    diag = {"iterations": int(res.nit), "attempts": attempts + 2, "elastic": True,
            **{f"res_{k}": v for k, v in viol.items()}}
    sol = _finalize(problem, x, "infeasible", diag)
    name, amount = most_violated(viol)
    raise InfeasibleProblemError(f"no feasible point found; worst constraint {name} violated by {amount:.3e}",
                                 most_violated=(name, amount), best=sol)


def warm_start_from(prev_u, m, e_new, model, K, u_ref):
    """Shifted candidate: ``prev_u[tau + m]`` then terminal feedback ``K e``.

    Returns ``(u_seq, e_seq)`` rolled out from the measured state ``e_new``.
    """
    prev_u = np.asarray(prev_u, float)
    N = len(prev_u)
    if not 1 <= m <= N:
        raise ValueError(f"open-loop phase m={m} outside [1, {N}]")
    U = np.empty_like(prev_u)
    E = np.empty((N + 1, model.n))
    E[0] = e_new
    for t in range(N):
        U[t] = prev_u[t + m] if t <= N - m - 1 else K @ E[t]
        E[t + 1] = model.step(E[t], U[t], u_ref[t])
    return U, E


def phi_bound(prev_e, prev_u, prev_H, psi_m_eta, ing):
    """Upper bound on the stage cost at a trigger instant."""
    prev_e = np.asarray(prev_e, float)
    prev_u = np.asarray(prev_u, float)
    return prev_H - float(prev_e @ ing.Q @ prev_e) - float(prev_u @ ing.R @ prev_u) + psi_m_eta
