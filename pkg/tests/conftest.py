import numpy as np
import pytest

from fblin.sigmodel import PolyNlssModel, bundled_model

ACCEPTANCE_LINES: dict[int, str] = {}


def random_model(rng, n, s, ts=1e-3, radius=0.9, e_scale=0.1):
    """Random stable PNLSS model with ``s`` distinct exponents from 1..5."""
    a = rng.standard_normal((n, n))
    a *= radius / max(np.abs(np.linalg.eigvals(a)).max(), 1e-12)
    exps = tuple(sorted(rng.choice(np.arange(1, 6), size=s, replace=False).tolist()))
    return PolyNlssModel(a_mat=a, b_vec=rng.standard_normal(n), c_vec=rng.standard_normal(n),
                         e_mat=e_scale * rng.standard_normal((n, s)), exponents=exps, ts=ts)


@pytest.fixture(scope="session")
def duffing_model():
    return bundled_model("duffing_nlss")


@pytest.fixture(scope="session")
def beam_model():
    return bundled_model("beam_nlss")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
