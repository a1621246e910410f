import math

import numpy as np
import pytest

from conftest import fig3_rates, random_connected_pairs, seir_chain, sir_chain, source_state
from rtapprox.errors import SizeGuardError
from rtapprox.integrate import integrate, sample_grid
from rtapprox.net import (
    GeneratorSpec,
    InitialCondition,
    SeirNodeRates,
    SirNodeRates,
    detect_rooted_tree,
    generate_network,
    make_network,
)
from rtapprox.oracle import build_generator, decode, encode, solve_master, state_space_size
from rtapprox.seir import SeirRootedExact, SeirRta
from rtapprox.sir import SirRootedExact, SirRta, closed_form_chain, pair_prob_is

S, I, R = 0, 1, 2


class TestGenerator:
    def test_single_sir_node(self):
        gen = build_generator(make_network(1, [], 1.0, SirNodeRates(0.1)))
        assert gen.codes.size == 3
        assert gen.outgoing([I]) == {(R,): pytest.approx(0.1)}
        assert gen.outgoing([S]) == {}

    def test_two_node_chain(self):
        gen = build_generator(sir_chain(2))
        assert gen.codes.size == 9
        out = gen.outgoing([I, S])
        assert out == {(R, S): pytest.approx(0.1), (I, I): pytest.approx(1.0)}

    def test_seir_exposed_state(self):
        net = make_network(1, [], 1.0, fig3_rates())
        out = build_generator(net).outgoing([1])
        assert out == {(2,): pytest.approx(1.2), (3,): pytest.approx(0.05)}

    def test_row_sums_zero(self):
        rng = np.random.default_rng(3)
        net = make_network(
            5,
            random_connected_pairs(rng, 5),
            0.7,
            SeirNodeRates(gamma=0.2, phi=[0.5, 0.25], mu=[0.0, 1.0], nu=[0.1, 0.2], a=[[0, 0], [0.5, 0]]),
        )
        Q = build_generator(net).Q
        rows = np.asarray(Q.sum(axis=1)).ravel()
        scale = np.asarray(abs(Q).max(axis=1).todense()).ravel()
        assert np.all(np.abs(rows) <= 1e-14 * np.maximum(scale, 1))

    def test_direct_infection_branch(self):
        # phi = 0.5 sends half the infection hazard straight to I
        net = make_network(2, [(0, 1)], 2.0, SeirNodeRates(gamma=0.1, phi=[0.5], mu=[1.0], nu=[1.0], a=[[0]]))
        out = build_generator(net).outgoing([2, 0])
        assert out[(2, 1)] == pytest.approx(1.0)
        assert out[(2, 2)] == pytest.approx(1.0)
        assert out[(3, 0)] == pytest.approx(0.1)

    def test_size_guard(self):
        net = make_network(13, [], 1.0, SirNodeRates(0.1))
        assert state_space_size(net) == 3**13
        with pytest.raises(SizeGuardError):
            build_generator(net)

    def test_encode_decode(self):
        labels = np.array([[0, 2, 1, 3], [3, 3, 0, 1]])
        assert np.array_equal(decode(encode(labels, 4), 4, 4), labels)


class TestSolve:
    def test_two_node_chain_closed_form(self):
        net = sir_chain(2)
        times = sample_grid(5.0, 0.1)
        sol = solve_master(net, InitialCondition.single_source(2, 0), times)
        exact = 0.1 / 1.1 + np.exp(-1.1 * times) / 1.1
        assert np.max(np.abs(sol.S[:, 1] - exact)) <= 1e-8

    def test_four_node_chain(self):
        net = sir_chain(4)
        times = sample_grid(5.0, 0.25)
        sol = solve_master(net, InitialCondition.single_source(4, 0), times)
        for m, t in enumerate(times):
            for k in range(4):
                s, i, r = closed_form_chain(k, t, 1.0, 0.1)
                assert abs(sol.S[m, k] - s) <= 1e-10
                assert abs(sol.I[m, k] - i) <= 1e-10
                assert abs(sol.R[m, k] - r) <= 1e-10

    def test_marginals_sum_to_one(self):
        net = seir_chain(4)
        sol = solve_master(net, InitialCondition.single_source(4, 0, 1, [0.8]), sample_grid(3.0, 0.5))
        np.testing.assert_allclose(sol.marginals.sum(axis=2), 1.0, atol=1e-12)
        assert sol.E.shape == (7, 4, 1)

    def test_triangle_rta_bound_strict(self):
        net = make_network(3, [(0, 1), (1, 2), (0, 2)], 1.0, SirNodeRates(0.1))
        ic, y0 = source_state(net)
        tr = integrate(SirRta(net, y0), y0, 10.0, sample_dt=0.1)
        sol = solve_master(net, ic, tr.sample_times)
        gap = tr.S - sol.S
        assert np.all(gap >= -1e-9)
        assert np.all(gap[1:, 1:] > 0)

    def test_seir_triangle_rta_bound(self):
        net = make_network(3, [(0, 1), (1, 2), (0, 2)], 1.0, fig3_rates())
        ic, y0 = source_state(net, exposed=[0.8])
        tr = integrate(SeirRta(net, y0), y0, 10.0, sample_dt=0.1)
        sol = solve_master(net, ic, tr.sample_times)
        assert np.all(tr.S - sol.S >= -1e-9)

    @pytest.mark.parametrize("seed", range(4))
    def test_rooted_tree_exactness(self, seed):
        sir = generate_network(GeneratorSpec("prufer_tree", 8, lam=0.8, rates=SirNodeRates(0.3)), seed)
        ic, y0 = source_state(sir, source=seed)
        tree = detect_rooted_tree(sir, ic)
        tr = integrate(SirRootedExact(sir, tree), y0, 6.0, sample_dt=0.2)
        pairs = [(tree.parent[k], k) for k in range(8) if k != tree.root]
        sol = solve_master(sir, ic, tr.sample_times, pairs=pairs)
        assert np.max(np.abs(tr.S - sol.S)) <= 1e-6
        assert np.max(np.abs(tr.I - sol.I)) <= 1e-6
        for p, k in pairs:
            approx = pair_prob_is(sol.S[:, k], sol.S[:, p], 0.8, 0.3)
            assert np.max(np.abs(approx - sol.pairs[(p, k)])) <= 1e-6

        seir = generate_network(
            GeneratorSpec(
                "prufer_tree",
                6,
                rates=SeirNodeRates(gamma=0.2, phi=[0.5, 0.25], mu=[0.0, 1.0], nu=[0.1, 0.2], a=[[0, 0], [0.5, 0]]),
            ),
            seed,
        )
        ic, y0 = source_state(seir, source=seed % 6, exposed=[0.3, 0.1])
        tr = integrate(SeirRootedExact(seir, detect_rooted_tree(seir, ic), y0), y0, 6.0, sample_dt=0.2)
        sol = solve_master(seir, ic, tr.sample_times)
        assert np.max(np.abs(tr.S - sol.S)) <= 1e-6
        assert np.max(np.abs(tr.E - sol.E)) <= 1e-6
        assert np.max(np.abs(tr.I - sol.I)) <= 1e-6

    def test_fractional_initial_law(self):
        # a product-form law on two independent nodes stays product-form
        net = make_network(2, [], 1.0, SirNodeRates(0.5))
        probs = np.array([[0.25, 0.75, 0.0], [0.0, 0.4, 0.6]])
        sol = solve_master(net, probs, sample_grid(2.0, 1.0))
        assert sol.I[-1, 0] == pytest.approx(0.75 * math.exp(-1.0), abs=1e-10)
        assert sol.R[-1, 1] == pytest.approx(0.6 + 0.4 * (1 - math.exp(-1.0)), abs=1e-10)
