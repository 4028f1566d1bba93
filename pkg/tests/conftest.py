import numpy as np
import pytest

from tmmsb.core import Transaction, TransactionLog
from tmmsb.inference import VariationalState


def random_log(rng, m, n, max_recipients=None):
    max_recipients = m - 1 if max_recipients is None else max_recipients
    txns = []
    for _ in range(n):
        s = int(rng.integers(m))
        others = [j for j in range(m) if j != s]
        r = int(rng.integers(1, max_recipients + 1))
        txns.append(Transaction(s, frozenset(rng.choice(others, size=r, replace=False).tolist())))
    return TransactionLog(m, txns)


def random_state(rng, n, m, k, b=None):
    phi = rng.dirichlet(np.ones(k), size=(n, m))
    gamma = rng.uniform(0.2, 4.0, size=(m, k))
    b = rng.uniform(0.05, 0.9, size=(k, k)) if b is None else b
    return VariationalState(gamma, phi, b)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[key])
