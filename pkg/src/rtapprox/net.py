"""Contact networks, per-node rate parameters, generators and file formats.

Nodes are dense integers ``0..n-1``.  An undirected contact is stored as two
directed edges ``j -> k`` carrying the rate ``lambda_{k<-j}`` at which an
infectious ``j`` infects a susceptible ``k``.  SIR networks are treated as SEIR
networks with zero exposed classes wherever that keeps the numerics uniform.

Exposed-class transition matrices use ``a[v, u]`` for the rate of
``E(u) -> E(v)``.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Union

import networkx as nx
import numpy as np

from .errors import ValidationError

SIR = "SIR"
SEIR = "SEIR"

_SUM_TOL = 1e-12


def _frozen(x, dtype=float):
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SirNodeRates:
    gamma: float

    def __post_init__(self):
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ValidationError(f"gamma must be finite and >= 0, got {self.gamma}")


@dataclass(frozen=True, eq=False)
class SeirNodeRates:
    """Rates of one node in the multi-class SEIR model.

    ``phi[u]`` is the probability that an infection sends the node to E(u);
    with probability ``1 - sum(phi)`` it becomes infectious directly.
    """

    gamma: float
    phi: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        phi = _frozen(np.atleast_1d(self.phi) if np.size(self.phi) else np.zeros(0))
        mu = _frozen(np.atleast_1d(self.mu) if np.size(self.mu) else np.zeros(0))
        nu = _frozen(np.atleast_1d(self.nu) if np.size(self.nu) else np.zeros(0))
        nclass = phi.shape[0]
        a = np.array(self.a, dtype=float)
        if a.size == 0:
            a = np.zeros((nclass, nclass))
        a = _frozen(a)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "gamma", float(self.gamma))

        if phi.ndim != 1 or mu.shape != phi.shape or nu.shape != phi.shape:
            raise ValidationError("phi, mu and nu must be vectors of equal length")
        if a.shape != (nclass, nclass):
            raise ValidationError(f"a must be {nclass}x{nclass}, got {a.shape}")
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ValidationError(f"gamma must be finite and >= 0, got {self.gamma}")
        for name, v in (("phi", phi), ("mu", mu), ("nu", nu), ("a", a)):
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ValidationError(f"{name} entries must be finite and >= 0")
        if phi.sum() > 1 + _SUM_TOL:
            raise ValidationError(f"sum(phi) must not exceed 1, got {phi.sum()}")
        if np.any(np.diag(a) != 0):
            raise ValidationError("a must have a zero diagonal")
        if np.any(mu + nu <= 0):
            # strict diagonal dominance of A^T needs an exit to I or R from every class
            raise ValidationError("mu[u] + nu[u] must be > 0 for every exposed class")

    @property
    def n_classes(self) -> int:
        return self.phi.shape[0]


NodeRates = Union[SirNodeRates, SeirNodeRates]


@dataclass(frozen=True, eq=False)
class ContagionNetwork:
    """Directed-rate contact graph with per-node rates.

    ``edges`` holds ``(from, to, lambda)`` triples; after construction they
    are sorted by ``(from, to)`` and zero-rate edges are dropped.
    """

    n_nodes: int
    model: str
    edges: tuple
    node_rates: tuple
    n_exposed_classes: int = 0

    def __post_init__(self):
        n = int(self.n_nodes)
        if n < 1:
            raise ValidationError("a network needs at least one node")
        if self.model not in (SIR, SEIR):
            raise ValidationError(f"unknown model {self.model!r}")
        if len(self.node_rates) != n:
            raise ValidationError(f"expected {n} node rate entries, got {len(self.node_rates)}")
        nclass = int(self.n_exposed_classes)
        if self.model == SIR:
            if nclass != 0:
                raise ValidationError("SIR networks have no exposed classes")
            if not all(isinstance(r, SirNodeRates) for r in self.node_rates):
                raise ValidationError("SIR networks need SirNodeRates for every node")
        else:
            if not all(isinstance(r, SeirNodeRates) for r in self.node_rates):
                raise ValidationError("SEIR networks need SeirNodeRates for every node")
            bad = [k for k, r in enumerate(self.node_rates) if r.n_classes != nclass]
            if bad:
                raise ValidationError(
                    f"node {bad[0]} has {self.node_rates[bad[0]].n_classes} exposed classes, "
                    f"network declares {nclass}"
                )

        cleaned = {}
        for j, k, lam in self.edges:
            j, k, lam = int(j), int(k), float(lam)
            if not (0 <= j < n and 0 <= k < n):
                raise ValidationError(f"edge ({j}, {k}) references a node outside 0..{n - 1}")
            if j == k:
                raise ValidationError(f"self-edge at node {j}")
            if not (lam >= 0 and math.isfinite(lam)):
                raise ValidationError(f"edge ({j}, {k}) has invalid rate {lam}")
            if (j, k) in cleaned:
                raise ValidationError(f"duplicate edge ({j}, {k})")
            if lam > 0:
                cleaned[(j, k)] = lam
        edges = tuple((j, k, cleaned[(j, k)]) for j, k in sorted(cleaned))
        object.__setattr__(self, "n_nodes", n)
        object.__setattr__(self, "n_exposed_classes", nclass)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "node_rates", tuple(self.node_rates))

    # Dense arrays used by the numerical kernels.

    @cached_property
    def src(self) -> np.ndarray:
        return _frozen([e[0] for e in self.edges], dtype=np.int64)

    @cached_property
    def dst(self) -> np.ndarray:
        return _frozen([e[1] for e in self.edges], dtype=np.int64)

    @cached_property
    def lam(self) -> np.ndarray:
        return _frozen([e[2] for e in self.edges])

    @cached_property
    def gamma(self) -> np.ndarray:
        return _frozen([r.gamma for r in self.node_rates])

    def _stack(self, name, shape):
        if self.model == SIR:
            return _frozen(np.zeros((self.n_nodes,) + shape))
        return _frozen(np.stack([getattr(r, name) for r in self.node_rates]))

    @cached_property
    def phi(self) -> np.ndarray:
        return self._stack("phi", (0,))

    @cached_property
    def mu(self) -> np.ndarray:
        return self._stack("mu", (0,))

    @cached_property
    def nu(self) -> np.ndarray:
        return self._stack("nu", (0,))

    @cached_property
    def a(self) -> np.ndarray:
        return self._stack("a", (0, 0))

    @cached_property
    def _upstream(self):
        ups = [[] for _ in range(self.n_nodes)]
        for j, k, _ in self.edges:
            ups[k].append(j)
        return tuple(tuple(sorted(u)) for u in ups)

    def undirected_pairs(self) -> list:
        return sorted({(min(j, k), max(j, k)) for j, k, _ in self.edges})


def upstream_neighbors(net: ContagionNetwork, k: int) -> list:
    """Nodes ``j`` with ``lambda_{k<-j} > 0``, ascending."""
    if not 0 <= k < net.n_nodes:
        raise ValidationError(f"node {k} is not in 0..{net.n_nodes - 1}")
    return list(net._upstream[k])


@dataclass(frozen=True, eq=False)
class InitialCondition:
    """Per-node initial probabilities of S, E(1..Nu), I and R."""

    S: np.ndarray
    E: np.ndarray
    I: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        S = _frozen(self.S)
        I = _frozen(self.I)
        R = _frozen(self.R)
        E = np.array(self.E, dtype=float)
        if E.size == 0:
            E = np.zeros((S.shape[0], 0))
        E = _frozen(E)
        for name, v in (("S", S), ("I", I), ("R", R)):
            if v.ndim != 1 or v.shape != S.shape:
                raise ValidationError(f"{name} must be a vector with one entry per node")
        if E.ndim != 2 or E.shape[0] != S.shape[0]:
            raise ValidationError("E must have shape (n_nodes, n_exposed_classes)")
        allv = np.concatenate([S, I, R, E.ravel()])
        if not np.all(np.isfinite(allv)) or np.any(allv < 0) or np.any(allv > 1):
            raise ValidationError("initial probabilities must lie in [0, 1]")
        total = S + E.sum(axis=1) + I + R
        bad = np.flatnonzero(np.abs(total - 1) > _SUM_TOL)
        if bad.size:
            raise ValidationError(
                f"initial probabilities of node {bad[0]} sum to {total[bad[0]]!r}, not 1"
            )
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "I", I)
        object.__setattr__(self, "R", R)

    @property
    def n_nodes(self) -> int:
        return self.S.shape[0]

    @property
    def n_exposed_classes(self) -> int:
        return self.E.shape[1]

    @classmethod
    def single_source(
        cls, n_nodes: int, source: int, n_exposed_classes: int = 0, exposed=None
    ) -> "InitialCondition":
        """All nodes susceptible except ``source``.

        The source is infectious, or split between the exposed classes
        (``exposed``) and I when ``exposed`` is given.
        """
        if not 0 <= source < n_nodes:
            raise ValidationError(f"source {source} is not in 0..{n_nodes - 1}")
        S = np.ones(n_nodes)
        E = np.zeros((n_nodes, n_exposed_classes))
        I = np.zeros(n_nodes)
        S[source] = 0.0
        if exposed is not None:
            E[source] = np.asarray(exposed, dtype=float)
        I[source] = 1.0 - E[source].sum()
        return cls(S=S, E=E, I=I, R=np.zeros(n_nodes))

    def label_probs(self) -> np.ndarray:
        """Categorical weights per node in label order S, E(1..Nu), I, R."""
        return np.column_stack([self.S, self.E, self.I, self.R])

    def check_compatible(self, net: ContagionNetwork) -> None:
        if self.n_nodes != net.n_nodes or self.n_exposed_classes != net.n_exposed_classes:
            raise ValidationError(
                f"initial condition has {self.n_nodes} nodes / {self.n_exposed_classes} exposed "
                f"classes, network has {net.n_nodes} / {net.n_exposed_classes}"
            )


@dataclass(frozen=True)
class RootedTreeInfo:
    """Parent map of a rooted tree; ``parent[root] == -1``.

    ``order`` lists nodes breadth-first from the root, so every node appears
    after its parent.
    """

    root: int
    parent: tuple
    order: tuple = field(default=())

    def depth(self) -> list:
        d = [0] * len(self.parent)
        for k in self.order[1:]:
            d[k] = d[self.parent[k]] + 1
        return d


def detect_rooted_tree(
    net: ContagionNetwork, init: InitialCondition
) -> Optional[RootedTreeInfo]:
    """Return the parent map if the network/IC pair is a rooted tree, else None.

    A rooted tree needs a connected tree skeleton, every node but one surely
    susceptible, and the remaining node carrying no S or R mass.
    """
    init.check_compatible(net)
    n = net.n_nodes
    pairs = net.undirected_pairs()
    if len(pairs) != n - 1:
        return None

    not_sus = np.flatnonzero(init.S < 1.0)
    if not_sus.size != 1:
        return None
    root = int(not_sus[0])
    if init.S[root] != 0.0 or init.R[root] != 0.0:
        return None

    adj = [[] for _ in range(n)]
    for u, v in pairs:
        adj[u].append(v)
        adj[v].append(u)
    parent = [-2] * n
    parent[root] = -1
    order = []
    queue = deque([root])
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in sorted(adj[u]):
            if parent[v] == -2:
                parent[v] = u
                queue.append(v)
    if len(order) != n:
        return None
    return RootedTreeInfo(root=root, parent=tuple(parent), order=tuple(order))


# Generators


GENERATOR_KINDS = ("chain", "prufer_tree", "erdos_renyi", "tree_plus_edges")


@dataclass(frozen=True)
class GeneratorSpec:
    """Topology kind plus the uniform rates assigned to every edge and node."""

    kind: str
    n: int
    lam: float = 1.0
    rates: NodeRates = SirNodeRates(gamma=0.1)
    p: float = 0.0
    extra_edges: int = 0


def _prufer_pairs(n: int, rng: np.random.Generator) -> list:
    if n == 1:
        return []
    if n == 2:
        return [(0, 1)]
    seq = rng.integers(0, n, size=n - 2).tolist()
    tree = nx.from_prufer_sequence(seq)
    return sorted((min(u, v), max(u, v)) for u, v in tree.edges())


def _topology(spec: GeneratorSpec, rng: np.random.Generator) -> list:
    n = spec.n
    if spec.kind == "chain":
        return [(i, i + 1) for i in range(n - 1)]
    if spec.kind == "prufer_tree":
        return _prufer_pairs(n, rng)
    if spec.kind == "erdos_renyi":
        if not 0 <= spec.p <= 1:
            raise ValidationError(f"edge probability must be in [0, 1], got {spec.p}")
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.shape[0]) < spec.p
        return list(zip(iu[keep].tolist(), ju[keep].tolist()))
    if spec.kind == "tree_plus_edges":
        tree = _prufer_pairs(n, rng)
        present = set(tree)
        candidates = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in present]
        m = spec.extra_edges
        if m < 0 or m > len(candidates):
            raise ValidationError(
                f"cannot add {m} extra edges: only {len(candidates)} non-tree pairs exist"
            )
        chosen = rng.choice(len(candidates), size=m, replace=False) if m else []
        return sorted(tree + [candidates[c] for c in np.sort(chosen)])
    raise ValidationError(f"unknown generator kind {spec.kind!r}; use one of {GENERATOR_KINDS}")


def generate_network(spec: GeneratorSpec, seed: int) -> ContagionNetwork:
    """Build a network from ``spec``; a pure function of ``(spec, seed)``."""
    if spec.n < 1:
        raise ValidationError("n must be >= 1")
    if not spec.lam > 0:
        raise ValidationError("lambda must be > 0")
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    pairs = _topology(spec, rng)
    edges = []
    for u, v in pairs:
        edges.append((u, v, spec.lam))
        edges.append((v, u, spec.lam))
    if isinstance(spec.rates, SeirNodeRates):
        model, nclass = SEIR, spec.rates.n_classes
    else:
        model, nclass = SIR, 0
    return ContagionNetwork(
        n_nodes=spec.n,
        model=model,
        n_exposed_classes=nclass,
        edges=tuple(edges),
        node_rates=(spec.rates,) * spec.n,
    )


# File formats


def _fmt(x) -> str:
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise ValidationError("non-finite values cannot be serialized")
        return format(x, ".17g")
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, dict):
        items = ",".join(f"{json.dumps(str(k))}:{_fmt(x[k])}" for k in sorted(x))
        return "{" + items + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ",".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialize {type(x).__name__}")


def canonical_dumps(obj) -> str:
    """JSON with sorted keys and 17-significant-digit floats."""
    return _fmt(obj) + "\n"


def network_to_dict(net: ContagionNetwork) -> dict:
    nodes = []
    for r in net.node_rates:
        if isinstance(r, SirNodeRates):
            nodes.append({"gamma": float(r.gamma), "phi": [], "mu": [], "nu": [], "a": []})
        else:
            nodes.append(
                {
                    "gamma": float(r.gamma),
                    "phi": [float(v) for v in r.phi],
                    "mu": [float(v) for v in r.mu],
                    "nu": [float(v) for v in r.nu],
                    "a": [[float(v) for v in row] for row in r.a],
                }
            )
    return {
        "model": net.model,
        "n_nodes": net.n_nodes,
        "n_exposed_classes": net.n_exposed_classes,
        "edges": [{"from": j, "to": k, "lambda": float(lam)} for j, k, lam in net.edges],
        "nodes": nodes,
    }


def network_from_dict(doc: dict) -> ContagionNetwork:
    try:
        model = doc["model"]
        n = int(doc["n_nodes"])
        nclass = int(doc.get("n_exposed_classes", 0))
        if any("phi" in e for e in doc["edges"]):
            raise ValidationError("per-edge phi is not supported; phi depends on the recipient only")
        edges = tuple((int(e["from"]), int(e["to"]), float(e["lambda"])) for e in doc["edges"])
        rates = []
        for nd in doc["nodes"]:
            if model == SIR:
                rates.append(SirNodeRates(gamma=float(nd["gamma"])))
            else:
                rates.append(
                    SeirNodeRates(
                        gamma=float(nd["gamma"]),
                        phi=nd.get("phi", []),
                        mu=nd.get("mu", []),
                        nu=nd.get("nu", []),
                        a=nd.get("a", []),
                    )
                )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed network document: {exc}") from exc
    return ContagionNetwork(
        n_nodes=n, model=model, n_exposed_classes=nclass, edges=edges, node_rates=tuple(rates)
    )


def initial_to_dict(init: InitialCondition) -> dict:
    return {
        "nodes": [
            {
                "S": float(init.S[k]),
                "E": [float(v) for v in init.E[k]],
                "I": float(init.I[k]),
                "R": float(init.R[k]),
            }
            for k in range(init.n_nodes)
        ]
    }


def initial_from_dict(doc: dict, n_exposed_classes: Optional[int] = None) -> InitialCondition:
    try:
        nodes = doc["nodes"]
        S = [float(nd["S"]) for nd in nodes]
        I = [float(nd["I"]) for nd in nodes]
        R = [float(nd.get("R", 0.0)) for nd in nodes]
        E = [[float(v) for v in nd.get("E", [])] for nd in nodes]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed initial-condition document: {exc}") from exc
    nclass = n_exposed_classes if n_exposed_classes is not None else (len(E[0]) if E else 0)
    if any(len(row) != nclass for row in E):
        raise ValidationError(f"every node needs {nclass} exposed-class entries")
    E_arr = np.array(E, dtype=float).reshape(len(nodes), nclass)
    return InitialCondition(S=S, E=E_arr, I=I, R=R)


def save_network(net: ContagionNetwork, path: Union[str, Path]) -> None:
    Path(path).write_text(canonical_dumps(network_to_dict(net)))


def load_network(path: Union[str, Path]) -> ContagionNetwork:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return network_from_dict(doc)


def save_initial(init: InitialCondition, path: Union[str, Path]) -> None:
    Path(path).write_text(canonical_dumps(initial_to_dict(init)))


def load_initial(path: Union[str, Path], net: Optional[ContagionNetwork] = None) -> InitialCondition:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    init = initial_from_dict(doc, None if net is None else net.n_exposed_classes)
    if net is not None:
        init.check_compatible(net)
    return init


def make_network(
    n_nodes: int, pairs: Sequence, lam: float, rates: NodeRates
) -> ContagionNetwork:
    """Symmetric network on explicit undirected ``pairs`` with uniform rates."""
    spec_edges = []
    for u, v in pairs:
        spec_edges.append((u, v, lam))
        spec_edges.append((v, u, lam))
    if isinstance(rates, SeirNodeRates):
        model, nclass = SEIR, rates.n_classes
    else:
        model, nclass = SIR, 0
    return ContagionNetwork(
        n_nodes=n_nodes,
        model=model,
        n_exposed_classes=nclass,
        edges=tuple(spec_edges),
        node_rates=(rates,) * n_nodes,
    )
