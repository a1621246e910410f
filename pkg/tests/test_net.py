import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fig3_rates, sir_chain
from rtapprox.errors import ValidationError
from rtapprox.net import (
    SEIR,
    SIR,
    ContagionNetwork,
    GeneratorSpec,
    InitialCondition,
    SeirNodeRates,
    SirNodeRates,
    canonical_dumps,
    detect_rooted_tree,
    generate_network,
    initial_from_dict,
    initial_to_dict,
    load_initial,
    load_network,
    make_network,
    network_from_dict,
    network_to_dict,
    save_initial,
    save_network,
    upstream_neighbors,
)


def _connected(n, pairs):
    adj = {k: set() for k in range(n)}
    for u, v in pairs:
        adj[u].add(v)
        adj[v].add(u)
    seen, stack = {0}, [0]
    while stack:
        for v in adj[stack.pop()]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n


class TestRates:
    def test_seir_rates_valid(self):
        r = fig3_rates()
        assert r.n_classes == 1
        assert not r.phi.flags.writeable

    @pytest.mark.parametrize(
        "kw",
        [
            dict(phi=[0.7, 0.4], mu=[1, 1], nu=[1, 1], a=[[0, 0], [0, 0]]),
            dict(phi=[0.5], mu=[0.0], nu=[0.0], a=[[0]]),
            dict(phi=[0.5, 0.1], mu=[1, 1], nu=[1, 1], a=[[1, 0], [0, 0]]),
            dict(phi=[-0.1], mu=[1], nu=[1], a=[[0]]),
            dict(phi=[0.5], mu=[1, 2], nu=[1], a=[[0]]),
        ],
    )
    def test_seir_rates_invalid(self, kw):
        with pytest.raises(ValidationError):
            SeirNodeRates(gamma=0.1, **kw)

    def test_negative_gamma(self):
        with pytest.raises(ValidationError):
            SirNodeRates(-1.0)


class TestNetwork:
    def test_edges_sorted_and_zero_rates_dropped(self):
        net = ContagionNetwork(
            n_nodes=3,
            model=SIR,
            edges=((2, 1, 1.0), (0, 1, 0.5), (1, 0, 0.0)),
            node_rates=(SirNodeRates(0.1),) * 3,
        )
        assert net.edges == ((0, 1, 0.5), (2, 1, 1.0))

    @pytest.mark.parametrize(
        "edges",
        [((0, 0, 1.0),), ((0, 1, 1.0), (0, 1, 2.0)), ((0, 5, 1.0),), ((0, 1, -1.0),)],
    )
    def test_bad_edges(self, edges):
        with pytest.raises(ValidationError):
            ContagionNetwork(n_nodes=2, model=SIR, edges=edges, node_rates=(SirNodeRates(0.1),) * 2)

    def test_model_rate_mismatch(self):
        with pytest.raises(ValidationError):
            ContagionNetwork(n_nodes=1, model=SEIR, edges=(), node_rates=(SirNodeRates(0.1),), n_exposed_classes=1)
        with pytest.raises(ValidationError):
            ContagionNetwork(n_nodes=1, model=SIR, edges=(), node_rates=(fig3_rates(),))

    def test_chain3_edges(self):
        net = generate_network(GeneratorSpec("chain", 3), 0)
        assert net.n_nodes == 3
        assert net.edges == ((0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0))

    def test_upstream_neighbors(self):
        net = sir_chain(3)
        assert upstream_neighbors(net, 1) == [0, 2]
        assert upstream_neighbors(net, 0) == [1]
        lone = make_network(1, [], 1.0, SirNodeRates(0.1))
        assert upstream_neighbors(lone, 0) == []
        with pytest.raises(ValidationError):
            upstream_neighbors(net, 3)


class TestInitialCondition:
    def test_single_source(self):
        ic = InitialCondition.single_source(4, 2, 1, exposed=[0.8])
        assert ic.S.tolist() == [1, 1, 0, 1]
        assert ic.E[2, 0] == 0.8
        assert ic.I[2] == pytest.approx(0.2)

    def test_rows_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            InitialCondition(S=[0.5], E=np.zeros((1, 0)), I=[0.4], R=[0.0])

    def test_label_probs(self):
        ic = InitialCondition.single_source(2, 0, 1, exposed=[0.8])
        np.testing.assert_allclose(ic.label_probs(), [[0, 0.8, 0.2, 0], [1, 0, 0, 0]])


class TestRootedTree:
    def test_chain(self):
        net = sir_chain(5)
        info = detect_rooted_tree(net, InitialCondition.single_source(5, 0))
        assert info.root == 0
        assert info.parent == (-1, 0, 1, 2, 3)
        assert info.depth() == [0, 1, 2, 3, 4]

    def test_triangle(self):
        net = make_network(3, [(0, 1), (1, 2), (0, 2)], 1.0, SirNodeRates(0.1))
        assert detect_rooted_tree(net, InitialCondition.single_source(3, 0)) is None

    def test_two_sources(self):
        net = sir_chain(5)
        ic = InitialCondition(S=[0, 1, 1, 1, 0], E=np.zeros((5, 0)), I=[1, 0, 0, 0, 1], R=[0] * 5)
        assert detect_rooted_tree(net, ic) is None

    def test_fractional_root_rejected(self):
        net = sir_chain(3)
        ic = InitialCondition(S=[0.5, 1, 1], E=np.zeros((3, 0)), I=[0.5, 0, 0], R=[0] * 3)
        assert detect_rooted_tree(net, ic) is None

    def test_seir_root_with_mixed_e_i(self):
        net = make_network(3, [(0, 1), (1, 2)], 1.0, fig3_rates())
        info = detect_rooted_tree(net, InitialCondition.single_source(3, 1, 1, [0.8]))
        assert info.root == 1 and info.parent == (1, -1, 1)

    def test_disconnected_rejected(self):
        # n - 1 pairs, but a triangle plus an isolated node
        net = make_network(4, [(0, 1), (1, 2), (0, 2)], 1.0, SirNodeRates(0.1))
        assert detect_rooted_tree(net, InitialCondition.single_source(4, 0)) is None

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 40), seed=st.integers(0, 2**63 - 1), root=st.integers(0, 39))
    def test_prufer_is_rooted_tree(self, n, seed, root):
        net = generate_network(GeneratorSpec("prufer_tree", n), seed)
        pairs = net.undirected_pairs()
        assert len(pairs) == n - 1
        assert _connected(n, pairs)
        info = detect_rooted_tree(net, InitialCondition.single_source(n, root % n))
        assert info is not None
        assert sorted(info.order) == list(range(n))
        for k in info.order[1:]:
            assert info.order.index(info.parent[k]) < info.order.index(k)


class TestGenerators:
    def test_erdos_renyi_edge_count(self):
        counts = [
            len(generate_network(GeneratorSpec("erdos_renyi", 100, p=0.05), s).undirected_pairs())
            for s in range(20)
        ]
        assert all(150 <= c <= 350 for c in counts)
        assert abs(np.mean(counts) - 247.5) < 20

    def test_tree_plus_edges(self):
        for s in range(10):
            net = generate_network(GeneratorSpec("tree_plus_edges", 30, extra_edges=10), s)
            pairs = net.undirected_pairs()
            assert len(pairs) == 39
            assert _connected(30, pairs)

    def test_tree_plus_edges_too_many(self):
        with pytest.raises(ValidationError):
            generate_network(GeneratorSpec("tree_plus_edges", 4, extra_edges=4), 0)

    def test_symmetric_equal_rates(self):
        net = generate_network(GeneratorSpec("erdos_renyi", 30, lam=0.7, p=0.2), 3)
        d = {(j, k): lam for j, k, lam in net.edges}
        assert all(d[(k, j)] == lam for (j, k), lam in d.items())

    def test_erdos_renyi_extremes(self):
        assert generate_network(GeneratorSpec("erdos_renyi", 10, p=0.0), 1).edges == ()
        assert len(generate_network(GeneratorSpec("erdos_renyi", 10, p=1.0), 1).undirected_pairs()) == 45
        with pytest.raises(ValidationError):
            generate_network(GeneratorSpec("erdos_renyi", 10, p=1.5), 1)

    def test_invalid_spec(self):
        with pytest.raises(ValidationError):
            generate_network(GeneratorSpec("chain", 0), 0)
        with pytest.raises(ValidationError):
            generate_network(GeneratorSpec("star", 5), 0)

    @settings(max_examples=25, deadline=None)
    @given(
        kind=st.sampled_from(["chain", "prufer_tree", "erdos_renyi", "tree_plus_edges"]),
        n=st.integers(5, 25),
        seed=st.integers(0, 2**64 - 1),
    )
    def test_pure_function_of_spec_and_seed(self, kind, n, seed):
        spec = GeneratorSpec(kind, n, p=0.3, extra_edges=2)
        a = canonical_dumps(network_to_dict(generate_network(spec, seed)))
        b = canonical_dumps(network_to_dict(generate_network(spec, seed)))
        assert a == b


class TestSerialization:
    def test_network_round_trip(self, tmp_path):
        net = make_network(
            3,
            [(0, 1), (1, 2)],
            0.3,
            SeirNodeRates(gamma=0.1, phi=[0.5, 0.25], mu=[0.0, 1.0], nu=[0.1, 0.2], a=[[0, 0], [0.5, 0]]),
        )
        path = tmp_path / "net.json"
        save_network(net, path)
        back = load_network(path)
        assert canonical_dumps(network_to_dict(back)) == path.read_text()
        np.testing.assert_array_equal(back.a, net.a)

    def test_initial_round_trip(self, tmp_path):
        ic = InitialCondition.single_source(3, 1, 2, exposed=[0.1, 0.3])
        path = tmp_path / "ic.json"
        save_initial(ic, path)
        back = load_initial(path)
        np.testing.assert_array_equal(back.label_probs(), ic.label_probs())
        assert initial_to_dict(initial_from_dict(initial_to_dict(ic))) == initial_to_dict(ic)

    def test_float_precision(self):
        assert canonical_dumps({"b": 0.1, "a": 1}) == '{"a":1,"b":0.10000000000000001}\n'

    def test_per_edge_phi_rejected(self):
        doc = network_to_dict(sir_chain(2))
        doc["edges"][0]["phi"] = [0.5]
        with pytest.raises(ValidationError):
            network_from_dict(doc)

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ValidationError):
            load_network(p)
        with pytest.raises(ValidationError):
            network_from_dict({"model": "SIR"})
        p.write_text(json.dumps({"nodes": [{"S": 1.0}]}))
        with pytest.raises(ValidationError):
            load_initial(p)
