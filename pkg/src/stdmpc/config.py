"""Experiment configuration: YAML schema, round-trip serialization, agent
preparation (ingredients, tightening, trigger tables) and the offline gates."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import dynamics as dyn
from .errors import ConfigError, InfeasibleTighteningError, StdmpcError
from .ingredients import (AgentIngredients, estimate_closed_loop_lipschitz, synthesize_validated,
                          validate_lipschitz, validate_terminal_region)
from .tightening import WeightedBall, admissible_eta, check_inclusion, lemma1_eta_bound, tightened_boxes
from .trigger import TriggerConstants

FIXTURES = {"sec5": "sec5.yaml", "sec5_paper": "sec5_paper.yaml"}
GATE_SAMPLES = 2048


def _mat(v, name, shape=None):
    try:
        a = np.atleast_2d(np.asarray(v, float))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: not a numeric matrix ({exc})") from exc
    if shape is not None and a.shape != shape:
        raise ConfigError(f"{name}: expected shape {shape}, got {a.shape}")
    return a


def _vec(v, name, size=None):
    try:
        a = np.asarray(v, float).ravel()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: not a numeric vector ({exc})") from exc
    if size is not None and a.size != size:
        raise ConfigError(f"{name}: expected length {size}, got {a.size}")
    return a


def _plain(x):
    """numpy -> built-in containers for YAML output."""
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


@dataclass
class AgentConfig:
    id: int
    model: dict
    Q: np.ndarray
    R: np.ndarray
    rho: dict
    sigma: float
    eps: float
    eps_r: float
    e0: np.ndarray
    s0: float
    path: dict
    Y: np.ndarray
    Z: np.ndarray
    mu: float
    eta: float | None = None
    path_rate: float = 1.0
    K: np.ndarray | None = None          # explicit terminal gain, else synthesized
    P: np.ndarray | None = None
    L_g: float | None = None             # None -> analytic bound from the model
    L_kappa: float | None = None         # None -> sampled estimate
    margin: float | None = None          # fixed synthesis margin, else escalated

    @classmethod
    def from_dict(cls, d, idx):
        where = f"agents[{idx}]"
        try:
            aid = int(d["id"])
            model = dict(d["model"])
            n = 3 if model.get("kind") == "unicycle" else len(model["G"])
            m = 2 if model.get("kind") == "unicycle" else len(model["H"][0])
            out = cls(
                id=aid, model=model,
                Q=_mat(d["Q"], f"{where}.Q", (n, n)), R=_mat(d["R"], f"{where}.R", (m, m)),
                rho={int(k): float(v) for k, v in dict(d.get("rho", {})).items()},
                sigma=float(d["sigma"]), eps=float(d["eps"]), eps_r=float(d["eps_r"]),
                e0=_vec(d["e0"], f"{where}.e0", n), s0=float(d.get("s0", 0.0)),
                path=dict(d["path"]),
                Y=_vec(d["Y"], f"{where}.Y", m), Z=_vec(d["Z"], f"{where}.Z", m),
                mu=float(d.get("mu", 1.0)),
                eta=None if d.get("eta") is None else float(d["eta"]),
                path_rate=float(d.get("path_rate", 1.0)),
                K=None if d.get("K") is None else _mat(d["K"], f"{where}.K", (m, n)),
                P=None if d.get("P") is None else _mat(d["P"], f"{where}.P", (n, n)),
                L_g=None if d.get("L_g") is None else float(d["L_g"]),
                L_kappa=None if d.get("L_kappa") is None else float(d["L_kappa"]),
                margin=None if d.get("margin") is None else float(d["margin"]),
            )
        except KeyError as exc:
            raise ConfigError(f"{where}: missing field {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{where}: {exc}") from exc
        if (out.K is None) != (out.P is None):
            raise ConfigError(f"{where}: K and P must be given together (or both omitted to synthesize)")
        if not out.eps_r > out.eps:
            raise ConfigError(f"{where}.eps_r: must exceed eps ({out.eps_r} <= {out.eps})")
        if not out.eps > 0:
            raise ConfigError(f"{where}.eps: must be positive")
        if not 0 < out.sigma < 1:
            raise ConfigError(f"{where}.sigma: must lie in (0, 1), got {out.sigma}")
        if any(r < 0 for r in out.rho.values()):
            raise ConfigError(f"{where}.rho: coupling weights must be nonnegative")
        if out.eta is not None and out.eta < 0:
            raise ConfigError(f"{where}.eta: must be nonnegative")
        return out

    def to_dict(self):
        d = {
            "id": self.id, "model": self.model, "Q": self.Q, "R": self.R,
            "rho": {int(k): float(v) for k, v in self.rho.items()},
            "sigma": self.sigma, "eps": self.eps, "eps_r": self.eps_r,
            "e0": self.e0, "s0": self.s0, "path": self.path, "path_rate": self.path_rate,
            "Y": self.Y, "Z": self.Z, "mu": self.mu, "eta": self.eta,
            "K": self.K, "P": self.P, "L_g": self.L_g, "L_kappa": self.L_kappa, "margin": self.margin,
        }
        return _plain(d)


@dataclass
class ExperimentConfig:
    T: float
    N: int
    agents: list
    adjacency: dict
    steps: int = 100
    seed: int = 0
    eta: float | None = None            # global override of the per-agent bounds
    strict: bool = False
    out_dir: str = "out"
    name: str = "experiment"

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        try:
            T = float(d["T"])
            N = int(d["N"])
            agents = [AgentConfig.from_dict(a, i) for i, a in enumerate(d["agents"])]
        except KeyError as exc:
            raise ConfigError(f"missing top-level field {exc.args[0]!r}") from exc
        if not T > 0:
            raise ConfigError(f"T: sampling period must be positive, got {T}")
        if N < 1:
            raise ConfigError(f"N: horizon must be >= 1, got {N}")
        ids = [a.id for a in agents]
        if len(set(ids)) != len(ids):
            raise ConfigError("agents: duplicate agent ids")
        adj_raw = d.get("adjacency")
        if adj_raw is None:
            adjacency = {i: [j for j in ids if j != i] for i in ids}
        else:
            adjacency = {int(k): sorted(int(j) for j in v) for k, v in dict(adj_raw).items()}
        for i, nbrs in adjacency.items():
            if i not in ids or any(j not in ids for j in nbrs):
                raise ConfigError(f"adjacency[{i}]: refers to an unknown agent")
            if i in nbrs:
                raise ConfigError(f"adjacency[{i}]: must be irreflexive")
        for a in agents:
            adjacency.setdefault(a.id, [])
            missing = [j for j in adjacency[a.id] if j not in a.rho]
            for j in missing:
                a.rho[j] = 1.0
        cfg = cls(T=T, N=N, agents=agents, adjacency=adjacency,
                  steps=int(d.get("steps", 100)), seed=int(d.get("seed", 0)),
                  eta=None if d.get("eta") is None else float(d["eta"]),
                  strict=bool(d.get("strict", False)), out_dir=str(d.get("out_dir", "out")),
                  name=str(d.get("name", "experiment")))
        if cfg.steps < 0:
            raise ConfigError("steps: must be nonnegative")
        if cfg.eta is not None and cfg.eta < 0:
            raise ConfigError("eta: must be nonnegative")
        for a in agents:
            if a.eta is None and cfg.eta is None:
                raise ConfigError(f"agents[{a.id}].eta: no disturbance bound (set per agent or globally)")
        return cfg

    def to_dict(self):
        return _plain({
            "name": self.name, "T": self.T, "N": self.N, "steps": self.steps, "seed": self.seed,
            "eta": self.eta, "strict": self.strict, "out_dir": self.out_dir,
            "adjacency": {int(k): list(v) for k, v in self.adjacency.items()},
            "agents": [a.to_dict() for a in self.agents],
        })

    def agent_eta(self, a):
        return self.eta if self.eta is not None else a.eta

    def copy(self, **changes):
        c = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(c, k, v)
        return c


def parse_config(text):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None, width=120)


def load_config(path):
    return parse_config(Path(path).read_text())


def fixture_text(name):
    if name not in FIXTURES:
        raise ConfigError(f"unknown fixture {name!r}; available: {', '.join(sorted(FIXTURES))}")
    return resources.files("stdmpc").joinpath("fixtures").joinpath(FIXTURES[name]).read_text()


def load_fixture(name="sec5"):
    return parse_config(fixture_text(name))


# --- preparation -------------------------------------------------------------

@dataclass
class PreparedAgent:
    cfg: AgentConfig
    model: object
    path: object
    ing: AgentIngredients
    eta: float
    u_ref: np.ndarray            # (steps + N, m)
    ref_s: np.ndarray            # path parameter of the reference point per step
    boxes: list
    constants: TriggerConstants
    margin: float | None = None
    notes: list = field(default_factory=list)


def reference_samples(u_ref, limit=8):
    """Distinct reference inputs (at most ``limit``, evenly spaced) for sampling checks."""
    uniq = np.unique(np.round(u_ref, 6), axis=0)
    if len(uniq) > limit:
        uniq = uniq[np.linspace(0, len(uniq) - 1, limit).round().astype(int)]
    return [tuple(r) for r in uniq]


def build_reference(a, T, total):
    path = dyn.path_from_dict(a.path)
    ref_s = a.s0 + a.path_rate * T * np.arange(total)
    u_ref = np.array([dyn.reference_inputs(path, s, a.path_rate) for s in ref_s]).reshape(total, -1)
    return path, ref_s, u_ref


def prepare_agent(cfg, a, eta=None):
    """Model, ingredients, tightening and trigger tables for one agent.

    Raises ``ConfigError``/``StdmpcError`` when ingredients cannot be formed;
    sampling gates are evaluated separately by ``run_gates``.
    """
    model = dyn.model_from_dict(a.model, T=cfg.T)
    total = cfg.steps + cfg.N + 1
    path, ref_s, u_ref = build_reference(a, cfg.T, total)
    refs = reference_samples(u_ref)
    margin = a.margin
    if a.K is None:
        margins = (a.margin,) if a.margin is not None else None
        kw = {"margins": margins} if margins else {}
        K, P, margin, _ = synthesize_validated(model, a.Q, a.R, a.eps, a.eps_r, refs, **kw)
    else:
        K, P = a.K, a.P
    L_g = a.L_g
    if L_g is None:
        L_g = max(model.lipschitz_g(r) or 0.0 for r in refs)
    L_kappa = a.L_kappa
    if L_kappa is None:
        L_kappa = estimate_closed_loop_lipschitz(model, K, P, a.eps_r, refs)
    ing = AgentIngredients.build(K, P, a.Q, a.R, a.eps, a.eps_r, L_g, L_kappa, model.state_box)
    eta = cfg.agent_eta(a) if eta is None else eta
    boxes = tightened_boxes(model.state_box, ing, eta, cfg.N)
    constants = TriggerConstants.build(a.sigma, eta, ing, cfg.N)
    return PreparedAgent(a, model, path, ing, eta, u_ref, ref_s, boxes, constants, margin)


@dataclass
class Gate:
    name: str
    agent: int
    ok: bool
    detail: str
    fatal: bool = True


def run_gates(cfg, samples=GATE_SAMPLES):
    """Offline checks per agent; returns ``(gates, prepared)``.

    ``prepared`` holds ``None`` for agents whose ingredients could not be built.
    """
    gates, prepared = [], []
    for a in cfg.agents:
        eta = cfg.agent_eta(a)
        try:
            model = dyn.model_from_dict(a.model, T=cfg.T)
            path, _, u_ref = build_reference(a, cfg.T, cfg.steps + cfg.N + 1)
            refs = reference_samples(u_ref)
        except StdmpcError as exc:
            gates.append(Gate("model", a.id, False, str(exc)))
            prepared.append(None)
            continue
        if a.K is not None:
            # ingredients are checked before tightening so a bad P is reported as such
            try:
                AgentIngredients(a.K, a.P, a.Q, a.R, a.eps, a.eps_r, 0.0, 0.0)
            except StdmpcError as exc:
                gates.append(Gate("ingredients", a.id, False, str(exc)))
                prepared.append(None)
                continue
        try:
            pa = prepare_agent(cfg, a)
        except StdmpcError as exc:
            name = "tightening" if isinstance(exc, InfeasibleTighteningError) else "ingredients"
            gates.append(Gate(name, a.id, False, str(exc)))
            prepared.append(None)
            continue
        ing = pa.ing
        gates.append(Gate("ingredients", a.id, True,
                          f"lambda_max(P)={ing.lambda_max_P:.4g} L_g={ing.L_g:.4g} L_kappa={ing.L_kappa:.4g}"
                          + (f" margin={pa.margin}" if pa.margin is not None else "")))
        rep = validate_terminal_region(model, ing, samples, u_refs=refs)
        gates.append(Gate("terminal-region", a.id, rep.ok, rep.summary()))
        rep = validate_lipschitz(model, ing.L_g, samples, u_refs=refs)
        gates.append(Gate("lipschitz-g", a.id, rep.ok, f"L_g={ing.L_g:.4g}: {rep.summary()}"))
        rep = validate_lipschitz(model, ing.L_kappa, samples, u_refs=refs, region=(ing.P, ing.eps_r), gain=ing.K)
        gates.append(Gate("lipschitz-kappa", a.id, rep.ok, f"L_kappa={ing.L_kappa:.4g}: {rep.summary()}"))
        gates.append(Gate("tightening", a.id, True, f"{cfg.N + 1} nonempty boxes"))
        inc = check_inclusion(WeightedBall(ing.P, ing.eps_r), pa.boxes[-1])
        gates.append(Gate("inclusion", a.id, inc,
                          f"Omega(eps_r) {'inside' if inc else 'NOT inside'} tightened box at tau=N"))
        bound = admissible_eta(ing, cfg.N)
        gates.append(Gate("eta-bound", a.id, eta <= bound, f"eta={eta:.6g} admissible={bound:.6g}"))
        ups = max(pa.constants.upsilon)
        gates.append(Gate("upsilon", a.id, ups <= 0,
                          f"max Upsilon={ups:.3e} (eta for all m: {lemma1_eta_bound(ing, cfg.N):.6g})", fatal=False))
        prepared.append(pa)
    return gates, prepared


def gates_ok(gates):
    return all(g.ok for g in gates if g.fatal)


def format_gates(gates):
    return "\n".join(f"[{'PASS' if g.ok else ('FAIL' if g.fatal else 'WARN')}] agent {g.agent} {g.name}: {g.detail}"
                     for g in gates)


