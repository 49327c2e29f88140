"""Deterministic event-driven closed loop for the self-triggered distributed MPC.

Per global step ``k`` agents whose trigger instant is ``k`` act in ascending id
order (sample, solve or apply terminal feedback, decide the phase, broadcast);
then every agent applies its scheduled input to the disturbed dynamics.
Broadcasts made at ``k`` become visible to neighbours from ``k + 1``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import ocp
from .config import gates_ok, format_gates, prepare_agent, run_gates
from .coordination import Broadcast, NeighborBuffer, assumed_sequence
from .dynamics import sample_disturbance, step_true
from .errors import ConfigError, InfeasibleProblemError, VerificationError
from .trigger import decide

log = logging.getLogger(__name__)

KIND_RANK = {"sample": 0, "solve": 1, "trigger-decision": 2, "broadcast": 3, "apply": 4, "hook-result": 5}
H_TOL = 1e-6
TERMINAL_TOL = 1e-9
STATE_TOL = 1e-9


@dataclass
class TraceRecord:
    k: int
    agent: int
    kind: str
    seq: int
    payload: dict

    def sort_key(self):
        return (self.k, self.agent, KIND_RANK[self.kind], self.seq)


class Trace:
    def __init__(self, verbosity=1):
        self.records = []
        self.verbosity = verbosity
        self._seq = 0

    def add(self, k, agent, kind, **payload):
        self._seq += 1
        self.records.append(TraceRecord(k, agent, kind, self._seq, payload))

    def sorted(self):
        return sorted(self.records, key=TraceRecord.sort_key)


@dataclass
class AgentRuntime:
    id: int
    prep: object
    neighbors: list
    buffer: NeighborBuffer
    rng: np.random.Generator
    e: np.ndarray
    s: float
    mode: str = "mpc"
    sol: object = None
    queue: list = field(default_factory=list)
    next_trigger: int = 0
    phase_start: int = 0
    phase_m: int = 1
    certified: bool = False
    H_cur: float | None = None
    last_e: np.ndarray | None = None
    last_u: np.ndarray | None = None
    counters: dict = field(default_factory=lambda: {
        "steps": 0, "solves": 0, "mpc_triggers": 0, "terminal_steps": 0, "solver_failures": 0,
        "fallbacks": 0, "uncertified": 0, "constraint_failures": 0})
    history: dict = field(default_factory=dict)


@dataclass
class RunReport:
    config: object
    agents: dict              # id -> counters
    history: dict             # id -> per-step arrays
    tallies: dict             # check -> {"pass", "fail", "skip"}
    failures: list
    trace: Trace
    elapsed: float
    gates: list

    @property
    def violations(self):
        return sum(t["fail"] for t in self.tallies.values())

    def failed(self, check):
        return self.tallies.get(check, {}).get("fail", 0)


class _Hooks:
    def __init__(self, strict, trace):
        self.strict = strict
        self.trace = trace
        self.tallies = {}
        self.failures = []

    def record(self, k, agent, check, ok, **context):
        t = self.tallies.setdefault(check, {"pass": 0, "fail": 0, "skip": 0})
        if ok is None:
            t["skip"] += 1
            if self.trace.verbosity >= 2:
                self.trace.add(k, agent, "hook-result", check=check, result="skip", **context)
            return
        t["pass" if ok else "fail"] += 1
        if not ok:
            ctx = {"k": k, "agent": agent, **context}
            self.failures.append((check, ctx))
            self.trace.add(k, agent, "hook-result", check=check, result="fail", **context)
            if self.strict:
                raise VerificationError(check, ctx)
        elif self.trace.verbosity >= 2:
            self.trace.add(k, agent, "hook-result", check=check, result="pass", **context)


def _sq(x, M):
    return float(x @ M @ x)


def _terminal_sync_plan(prep, e, s, k, N, T):
    """Nominal sync plan under the terminal feedback, broadcast by terminal-mode agents."""
    ing, model, a = prep.ing, prep.model, prep.cfg
    seq = [s]
    for t in range(N):
        u = ing.K @ e
        ur = prep.u_ref[k + t]
        e = model.step(e, u, ur)
        seq.append(seq[-1] + T * float(a.Y @ u + a.Z @ ur))
    return np.array(seq)


class Simulation:
    def __init__(self, config, prepared, strict=None, verbosity=1):
        self.cfg = config
        self.N = config.N
        self.T = config.T
        self.trace = Trace(verbosity)
        self.hooks = _Hooks(config.strict if strict is None else strict, self.trace)
        ss = np.random.SeedSequence(config.seed)
        rngs = [np.random.default_rng(c) for c in ss.spawn(len(prepared))]
        mu = {p.cfg.id: p.cfg.mu for p in prepared}
        self.agents = []
        for p, rng in sorted(zip(prepared, rngs), key=lambda t: t[0].cfg.id):
            nb = list(config.adjacency.get(p.cfg.id, []))
            buf = NeighborBuffer(mu={j: mu[j] for j in nb})
            a = AgentRuntime(p.cfg.id, p, nb, buf, rng, np.array(p.cfg.e0, float), float(p.cfg.s0))
            steps = config.steps
            a.history = {"e": np.zeros((steps + 1, p.model.n)), "u": np.zeros((steps, p.model.m)),
                         "s": np.zeros(steps + 1), "mode": [], "triggered": [], "solved": [], "m": []}
            a.history["e"][0] = a.e
            a.history["s"][0] = a.s
            self.agents.append(a)
        self.by_id = {a.id: a for a in self.agents}

    # -- per-agent actions ------------------------------------------------------

    def _problem(self, a, k, phi):
        p = a.prep
        assumed, rho = [], []
        for j in a.neighbors:
            try:
                seq = assumed_sequence(a.buffer, j, k, self.N)
                delta = a.buffer.staleness(j, k)
                self.hooks.record(k, a.id, "staleness", delta <= self.N, neighbor=j, delta=delta)
            except KeyError:
                seq = np.full(self.N, float(p.cfg.s0))
            assumed.append(seq)
            rho.append(p.cfg.rho.get(j, 0.0))
        return ocp.OcpProblem(p.model, p.ing, a.e, a.s, p.cfg.Y, p.cfg.Z, self.T, p.u_ref[k:k + self.N],
                              p.boxes, assumed, rho, phi)

    def _trigger(self, a, k, outbox):
        p, ing = a.prep, a.prep.ing
        e = a.e
        vP = _sq(e, ing.P)
        self.trace.add(k, a.id, "sample", norm_P2=vP, mode=a.mode)
        if vP <= ing.eps_r ** 2:
            if a.mode != "terminal":
                self.trace.add(k, a.id, "trigger-decision", m=1, limiting="terminal-mode", literal_m=1)
            a.mode = "terminal"
            a.sol, a.H_cur, a.certified = None, None, False
            a.queue = [ing.K @ e]
            a.next_trigger = k + 1
            a.phase_start, a.phase_m = k, 1
            a.counters["terminal_steps"] += 1
            plan = _terminal_sync_plan(p, e.copy(), a.s, k, self.N, self.T)
            outbox.append(Broadcast(a.id, k, plan))
            return False, 1

        prev_mpc = a.mode == "mpc" and a.sol is not None
        prev_certified = prev_mpc and a.certified
        phi = None
        m_prev = a.phase_m
        if prev_certified:
            psi_eta = p.constants.psi[m_prev - 1] * p.eta
            phi = ocp.phi_bound(a.last_e, a.last_u, a.H_cur, psi_eta, ing)
        a.mode = "mpc"
        problem = self._problem(a, k, phi)

        cand = None
        if prev_mpc:
            cu, ce = ocp.warm_start_from(a.sol.u_seq, m_prev, e, p.model, ing.K, problem.u_ref)
            cand_H = ocp.stage_cost(ing, ce, cu)
            viol = ocp.constraint_violations(problem, cu, ce, cand_H)
            cand_ok = ocp.is_feasible(viol)
            cand = (cu, ce, cand_ok)
            if prev_certified:
                self.hooks.record(k, a.id, "candidate-feasibility", cand_ok,
                                  **{f"viol_{n}": v for n, v in viol.items()})
                term = _sq(ce[-1], ing.P)
                self.hooks.record(k, a.id, "terminal-containment", term <= ing.eps ** 2 + TERMINAL_TOL,
                                  norm_P2=term, bound=ing.eps ** 2, phase=m_prev)
            else:
                self.hooks.record(k, a.id, "candidate-feasibility", None, reason="uncertified-predecessor")
                self.hooks.record(k, a.id, "terminal-containment", None, reason="uncertified-predecessor")

        a.counters["solves"] += 1
        a.counters["mpc_triggers"] += 1
        certified = True
        try:
            sol = ocp.solve(problem, warm_start=None if cand is None else cand[0])
        except InfeasibleProblemError as exc:
            a.counters["solver_failures"] += 1
            name, amount = exc.most_violated
            if cand is not None and cand[2]:
                cu, ce, _ = cand
                sol = ocp._finalize(problem, cu.ravel(), "converged", {"fallback": True})
                a.counters["fallbacks"] += 1
                status = "fallback-candidate"
            else:
                sol = exc.best
                certified = False
                a.counters["uncertified"] += 1
                status = "infeasible"
            self.trace.add(k, a.id, "solve", status=status, worst=name, amount=amount, J=sol.J, H=sol.H)
        else:
            d = sol.diagnostics
            self.trace.add(k, a.id, "solve", status=sol.status, J=sol.J, H=sol.H, coupling=sol.coupling,
                           iterations=d.get("iterations", 0), kkt=d.get("kkt", float("nan")),
                           phi=float("nan") if phi is None else phi)

        if prev_certified and certified:
            e_prev, u_prev = a.last_e, a.last_u
            bound = -_sq(e_prev, ing.Q) - _sq(u_prev, ing.R) + p.constants.psi[m_prev - 1] * p.eta
            self.hooks.record(k, a.id, "lyapunov-decrease", sol.H - a.H_cur <= bound + H_TOL,
                              diff=sol.H - a.H_cur, bound=bound, phase=m_prev, at="trigger")
        elif prev_mpc:
            self.hooks.record(k, a.id, "lyapunov-decrease", None, reason="uncertified")

        if certified:
            dec = decide(sol, e, p.constants, ing, self.N, k)
            m, limit, literal = dec.m, dec.limiting_condition, dec.literal_m
        else:
            m, limit, literal = 1, "uncertified", 1
        self.trace.add(k, a.id, "trigger-decision", m=m, limiting=limit, literal_m=literal)

        a.sol, a.certified = sol, certified
        a.phase_start, a.phase_m = k, m
        a.queue = [u.copy() for u in sol.u_seq[:m]]
        a.next_trigger = k + m
        a.H_cur = sol.H
        self._sandwich(a, k, sol.H)
        outbox.append(Broadcast(a.id, k, sol.s_seq))
        return True, m

    def _in_phase(self, a, k):
        """Shifted candidate at a non-trigger step; checks the per-step cost decrease."""
        p, ing = a.prep, a.prep.ing
        j = k - a.phase_start
        u_ref = p.u_ref[k:k + self.N]
        cu, ce = ocp.warm_start_from(a.sol.u_seq, j, a.e, p.model, ing.K, u_ref)
        H = ocp.stage_cost(ing, ce, cu)
        if a.certified:
            bound = -_sq(a.last_e, ing.Q) - _sq(a.last_u, ing.R) + p.constants.psi[j - 1] * p.eta
            self.hooks.record(k, a.id, "lyapunov-decrease", H - a.H_cur <= bound + H_TOL,
                              diff=H - a.H_cur, bound=bound, phase=j, at="open-loop")
        else:
            self.hooks.record(k, a.id, "lyapunov-decrease", None, reason="uncertified")
        a.H_cur = H
        self._sandwich(a, k, H)

    def _sandwich(self, a, k, H):
        """Quadratic lower/upper envelopes of the cost as a function of ``||e||``."""
        ing, model = a.prep.ing, a.prep.model
        r2 = float(a.e @ a.e)
        lo = ing.lambda_min_Q * r2
        h_max = (self.N * (np.linalg.eigvalsh(ing.Q).max() * model.state_box.max_norm() ** 2
                           + np.linalg.eigvalsh(ing.R).max() * model.input_box.max_norm() ** 2)
                 + ing.lambda_max_P * ing.eps ** 2)
        r_min2 = ing.eps_r ** 2 / ing.lambda_max_P
        hi = max(ing.lambda_max_P, h_max / r_min2) * r2
        self.hooks.record(k, a.id, "iss-envelope", lo - 1e-12 <= H <= hi + 1e-12, H=H, lower=lo, upper=hi)

    def _apply(self, a, k):
        p, ing, model = a.prep, a.prep.ing, a.prep.model
        u = a.queue.pop(0)
        e, ur = a.e, p.u_ref[k]
        d = sample_disturbance(a.rng, model.n, p.eta)
        nominal = model.step(e, u, ur)
        e_next = step_true(model, e, u, d, ur, eta=p.eta if p.eta > 0 else None)
        s_next = a.s + self.T * float(p.cfg.Y @ u + p.cfg.Z @ ur)
        in_u = model.input_box.violation(u) <= ocp.INPUT_TOL
        in_e = model.state_box.violation(e_next) <= STATE_TOL
        if not (in_u and in_e):
            a.counters["constraint_failures"] += 1
        self.hooks.record(k, a.id, "input-admissible", in_u, v=model.input_box.violation(u))
        self.hooks.record(k + 1, a.id, "state-admissible", in_e, v=model.state_box.violation(e_next))
        if a.mode == "terminal":
            ball = ing.lambda_max_sqrtP * p.eta
            fP = np.sqrt(_sq(nominal, ing.P))
            lhs = _sq(e_next, ing.P) - _sq(e, ing.P)
            rhs = -_sq(e, ing.Q_star) + 2 * fP * ball + ball ** 2
            self.hooks.record(k, a.id, "terminal-decrease", lhs <= rhs + 1e-12, diff=lhs, bound=rhs)
        h = a.history
        h["u"][k] = u
        self.trace.add(k, a.id, "apply", u=tuple(float(x) for x in u), d_norm=float(np.linalg.norm(d)))
        a.last_e, a.last_u = e, u
        a.e, a.s = e_next, s_next
        h["e"][k + 1] = e_next
        h["s"][k + 1] = s_next
        a.counters["steps"] += 1

    # -- loop -------------------------------------------------------------------

    def step(self, k):
        outbox = []
        for a in self.agents:
            if k == a.next_trigger:
                solved, m = self._trigger(a, k, outbox)
                a.history["triggered"].append(True)
                a.history["solved"].append(solved)
                a.history["m"].append(m)
            else:
                self._in_phase(a, k)
                a.history["triggered"].append(False)
                a.history["solved"].append(False)
                a.history["m"].append(0)
            a.history["mode"].append(a.mode)
        for a in self.agents:
            self._apply(a, k)
        for b in outbox:
            self.trace.add(k, b.sender, "broadcast", s_first=float(b.s_seq[0]), s_last=float(b.s_seq[-1]))
            for a in self.agents:
                if b.sender in a.neighbors:
                    a.buffer.ingest(b)

    def run(self):
        for k in range(self.cfg.steps):
            self.step(k)


def run(config, enforce_gates=True, strict=None, verbosity=1, gate_samples=None):
    """Simulate ``config``; raises ``ConfigError`` if a fatal offline gate fails."""
    t0 = time.perf_counter()
    gates = []
    if enforce_gates:
        gates, prepared = run_gates(config, **({"samples": gate_samples} if gate_samples else {}))
        if not gates_ok(gates):
            bad = [g for g in gates if g.fatal and not g.ok]
            raise ConfigError("configuration rejected by offline gates:\n" + format_gates(bad))
    else:
        prepared = [prepare_agent(config, a) for a in config.agents]
    sim = Simulation(config, prepared, strict=strict, verbosity=verbosity)
    sim.run()
    hist = {}
    for a in sim.agents:
        h = dict(a.history)
        h["ref_s"] = a.prep.ref_s[:config.steps + 1]
        h["u_ref"] = a.prep.u_ref[:config.steps]
        h["path"] = a.prep.path
        hist[a.id] = h
    return RunReport(config, {a.id: dict(a.counters) for a in sim.agents}, hist, sim.hooks.tallies,
                     sim.hooks.failures, sim.trace, time.perf_counter() - t0, gates)
