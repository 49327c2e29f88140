from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
from scipy.optimize import minimize

from stdmpc.config import load_fixture, prepare_agent
from stdmpc.sim import run


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


def support_oracle(P, r, j, samples=100_000, seed=0):
    """``max x_j`` over ``x' P x = r^2`` by boundary sampling, then a constrained local polish."""
    n = P.shape[0]
    if r == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((samples, n))
    x = z / np.sqrt(np.einsum("ti,ij,tj->t", z, P, z))[:, None] * r
    x0 = x[np.argmax(x[:, j])]
    res = minimize(lambda v: -v[j], x0, jac=lambda v: -np.eye(n)[j], method="SLSQP",
                   constraints=[{"type": "eq", "fun": lambda v: v @ P @ v - r * r, "jac": lambda v: 2 * P @ v}],
                   options={"ftol": 1e-15, "maxiter": 200})
    cand = res.x * r / np.sqrt(res.x @ P @ res.x)
    return max(float(x0[j]), float(cand[j]))


def stub_ing(**kw):
    """Duck-typed ingredients for formula-level tests."""
    base = dict(eps=0.05, eps_r=0.06, L_g=0.24, L_kappa=0.44, L_Q=1.0, L_Qstar=1.0, L_P=1.0,
                lambda_max_sqrtP=4.2, lambda_max_P=4.2 ** 2, lambda_min_Qstar=1.0, lambda_min_Q=3.0,
                Q=3 * np.eye(3), R=0.01 * np.eye(2))
    base.update(kw)
    return SimpleNamespace(**base)


@pytest.fixture(scope="session")
def sec5():
    return load_fixture("sec5")


@pytest.fixture(scope="session")
def sec5_prepared(sec5):
    return [prepare_agent(sec5, a) for a in sec5.agents]


@pytest.fixture(scope="session")
def sec5_report(sec5):
    return run(sec5)
