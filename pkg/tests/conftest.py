import numpy as np
import pytest

from rtapprox.net import (
    InitialCondition,
    SeirNodeRates,
    SirNodeRates,
    make_network,
)
from rtapprox.sir import NodeProbabilityState

FIG3 = dict(gamma=0.1, phi=[0.8], mu=[1.2], nu=[0.05], a=[[0.0]])


def fig3_rates():
    return SeirNodeRates(**FIG3)


def chain_pairs(n):
    return [(i, i + 1) for i in range(n - 1)]


def sir_chain(n, lam=1.0, gamma=0.1):
    return make_network(n, chain_pairs(n), lam, SirNodeRates(gamma))


def seir_chain(n, rates=None, lam=1.0):
    return make_network(n, chain_pairs(n), lam, rates or fig3_rates())


def source_state(net, source=0, exposed=None):
    ic = InitialCondition.single_source(net.n_nodes, source, net.n_exposed_classes, exposed)
    return ic, NodeProbabilityState.from_initial(ic)


def random_connected_pairs(rng, n, extra_prob=0.4):
    """Random spanning tree plus each remaining pair with ``extra_prob``."""
    perm = rng.permutation(n)
    pairs = set()
    for i in range(1, n):
        j = perm[rng.integers(0, i)]
        u, v = sorted((int(perm[i]), int(j)))
        pairs.add((u, v))
    for u in range(n):
        for v in range(u + 1, n):
            if (u, v) not in pairs and rng.random() < extra_prob:
                pairs.add((u, v))
    return sorted(pairs)


def random_seir_rates(rng, nclass, scale=10.0):
    """Valid multi-class rates with every entry in (0, scale]."""
    phi = rng.random(nclass)
    phi *= rng.random() / phi.sum()
    mu = rng.uniform(0.0, scale, nclass) + 1e-3
    nu = rng.uniform(0.0, scale, nclass) + 1e-3
    a = rng.uniform(0.0, scale, (nclass, nclass)) * (rng.random((nclass, nclass)) < 0.6)
    np.fill_diagonal(a, 0.0)
    return SeirNodeRates(gamma=float(rng.uniform(0.01, scale)), phi=phi, mu=mu, nu=nu, a=a)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
