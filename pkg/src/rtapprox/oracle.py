"""Exact master-equation solver for small networks.

A joint state is encoded in mixed radix: node ``k`` contributes
``label_k * base**k`` with ``base = Nu + 3`` and the label codes of
:mod:`rtapprox.stochastic`.  Transition rates are the same hazards the
Gillespie simulator uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvariantViolation, SizeGuardError, ValidationError
from .integrate import DEFAULT_DT, _stride, rk4
from .net import ContagionNetwork, InitialCondition

MAX_STATES = 2 ** 20
MASS_TOL = 1e-10
NEG_TOL = 1e-12


def state_space_size(net: ContagionNetwork) -> int:
    return (net.n_exposed_classes + 3) ** net.n_nodes


def _guard(net: ContagionNetwork) -> None:
    size = state_space_size(net)
    if size > MAX_STATES:
        raise SizeGuardError(
            f"{size} joint states exceed the limit of {MAX_STATES} "
            f"({net.n_nodes} nodes, {net.n_exposed_classes} exposed classes)"
        )


def decode(codes: np.ndarray, n: int, base: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    powers = base ** np.arange(n, dtype=np.int64)
    return ((codes[:, None] // powers[None, :]) % base).astype(np.int8)


def encode(labels: np.ndarray, base: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    powers = base ** np.arange(labels.shape[1], dtype=np.int64)
    return labels @ powers


def _transitions(net: ContagionNetwork, codes: np.ndarray):
    """All outgoing transitions ``(from_code, to_code, rate)`` of ``codes``."""
    n, nclass = net.n_nodes, net.n_exposed_classes
    base = nclass + 3
    lab_i, lab_r = nclass + 1, nclass + 2
    labels = decode(codes, n, base)
    infectious = labels == lab_i
    phi, mu, nu, a = net.phi, net.mu, net.nu, net.a

    pressure = np.zeros((codes.size, n))
    for j, k, lam in net.edges:
        pressure[:, k] += lam * infectious[:, j]

    frm, to, rate = [], [], []

    def emit(mask, shift, r):
        if np.ndim(r):
            r = r[mask]
        idx = np.flatnonzero(mask)
        if idx.size and np.any(np.asarray(r) > 0):
            rr = np.broadcast_to(r, idx.shape)
            keep = rr > 0
            frm.append(codes[idx[keep]])
            to.append(codes[idx[keep]] + shift)
            rate.append(np.array(rr[keep], dtype=float))

    for k in range(n):
        bk = base ** k
        sus = (labels[:, k] == 0) & (pressure[:, k] > 0)
        direct = 1.0 - phi[k].sum()
        for u in range(nclass):
            emit(sus, (u + 1) * bk, pressure[:, k] * phi[k, u])
        emit(sus, lab_i * bk, pressure[:, k] * direct)
        for u in range(nclass):
            in_u = labels[:, k] == u + 1
            for v in range(nclass):
                if v != u and a[k, v, u] > 0:
                    emit(in_u, (v - u) * bk, a[k, v, u])
            emit(in_u, (lab_i - (u + 1)) * bk, mu[k, u])
            emit(in_u, (lab_r - (u + 1)) * bk, nu[k, u])
        emit(labels[:, k] == lab_i, bk, net.gamma[k])

    if not frm:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    return np.concatenate(frm), np.concatenate(to), np.concatenate(rate)


@dataclass(frozen=True, eq=False)
class MasterGenerator:
    """Transition-rate matrix on the state list ``codes`` (sorted).

    ``Q[i, j]`` is the rate from ``codes[i]`` to ``codes[j]``; the diagonal
    carries minus the total exit rate.
    """

    codes: np.ndarray
    Q: sp.csr_matrix
    n_nodes: int
    base: int

    def index(self, code: int) -> int:
        i = int(np.searchsorted(self.codes, code))
        if i >= self.codes.size or self.codes[i] != code:
            raise KeyError(code)
        return i

    def outgoing(self, labels: Sequence[int]) -> dict:
        """Off-diagonal rates leaving the state with the given node labels."""
        i = self.index(int(encode(np.atleast_2d(labels), self.base)[0]))
        row = self.Q.getrow(i)
        return {
            tuple(decode(np.array([self.codes[j]]), self.n_nodes, self.base)[0].tolist()): v
            for j, v in zip(row.indices, row.data)
            if j != i
        }


def _assemble(net, codes, frm, to, rate) -> MasterGenerator:
    N = codes.size
    fi = np.searchsorted(codes, frm)
    ti = np.searchsorted(codes, to)
    out_rate = np.bincount(fi, weights=rate, minlength=N)
    rows = np.concatenate([fi, np.arange(N)])
    cols = np.concatenate([ti, np.arange(N)])
    vals = np.concatenate([rate, -out_rate])
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
    return MasterGenerator(codes=codes, Q=Q, n_nodes=net.n_nodes, base=net.n_exposed_classes + 3)


def build_generator(net: ContagionNetwork, support: Optional[np.ndarray] = None) -> MasterGenerator:
    """Generator on the full joint state space, or on the states reachable
    from the state codes in ``support``."""
    _guard(net)
    if support is None:
        codes = np.arange(state_space_size(net), dtype=np.int64)
        frm, to, rate = _transitions(net, codes)
        return _assemble(net, codes, frm, to, rate)

    seen = np.unique(np.asarray(support, dtype=np.int64))
    frontier = seen
    parts = []
    while frontier.size:
        f, t, r = _transitions(net, frontier)
        parts.append((f, t, r))
        new = np.setdiff1d(np.unique(t), seen, assume_unique=True)
        seen = np.union1d(seen, new)
        frontier = new
    frm = np.concatenate([p[0] for p in parts])
    to = np.concatenate([p[1] for p in parts])
    rate = np.concatenate([p[2] for p in parts])
    return _assemble(net, seen, frm, to, rate)


def _initial_distribution(net: ContagionNetwork, probs: np.ndarray):
    """Support codes and probabilities of the product-form initial law."""
    base = net.n_exposed_classes + 3
    codes = np.zeros(1, dtype=np.int64)
    p = np.ones(1)
    for k in range(net.n_nodes):
        labs = np.flatnonzero(probs[k] > 0)
        codes = (codes[:, None] + labs[None, :] * base ** k).ravel()
        p = (p[:, None] * probs[k, labs][None, :]).ravel()
    order = np.argsort(codes)
    return codes[order], p[order]


@dataclass(frozen=True, eq=False)
class MasterSolution:
    """Per-node label marginals ``marginals[t, node, label]`` and optional
    ``<I_j S_k>`` pair marginals keyed by ``(j, k)``."""

    sample_times: np.ndarray
    marginals: np.ndarray
    pairs: dict = field(default_factory=dict)
    n_states: int = 0

    @property
    def n_classes(self) -> int:
        return self.marginals.shape[2] - 3

    @property
    def S(self):
        return self.marginals[:, :, 0]

    @property
    def E(self):
        return self.marginals[:, :, 1 : 1 + self.n_classes]

    @property
    def I(self):
        return self.marginals[:, :, self.n_classes + 1]

    @property
    def R(self):
        return self.marginals[:, :, self.n_classes + 2]


def solve_master(
    net: ContagionNetwork,
    init,
    sample_times: Sequence[float],
    dt: float = DEFAULT_DT,
    pairs: Sequence = (),
) -> MasterSolution:
    """Integrate the forward equation ``dP/dt = P Q`` with RK4.

    Only states reachable from the initial support are carried; all others
    have probability zero for all time.  ``sample_times`` must be a regular
    grid starting at 0 whose spacing is a multiple of ``dt``.
    """
    _guard(net)
    if isinstance(init, InitialCondition):
        init.check_compatible(net)
        probs = init.label_probs()
    else:
        probs = np.asarray(init, dtype=float)
    n, nclass = net.n_nodes, net.n_exposed_classes
    L = nclass + 3
    if probs.shape != (n, L) or np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1) > 1e-12):
        raise ValidationError("initial law must give nonnegative label weights summing to 1 per node")

    times = np.asarray(sample_times, dtype=float)
    if times.size < 1 or times[0] != 0:
        raise ValidationError("sample_times must start at 0")
    stride = 1
    if times.size > 1:
        spacing = times[1] - times[0]
        if np.any(np.abs(np.diff(times) - spacing) > 1e-9 * spacing):
            raise ValidationError("sample_times must be evenly spaced")
        stride = _stride(spacing, dt)

    support, p0 = _initial_distribution(net, probs)
    gen = build_generator(net, support)
    P = np.zeros(gen.codes.size)
    P[np.searchsorted(gen.codes, support)] = p0
    QT = gen.Q.T.tocsr()

    labels = decode(gen.codes, n, nclass + 3)
    rows = np.repeat(np.arange(gen.codes.size), n)
    cols = (np.arange(n)[None, :] * L + labels).ravel()
    onehot = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(gen.codes.size, n * L))
    pair_masks = {}
    for j, k in pairs:
        pair_masks[(j, k)] = (labels[:, j] == nclass + 1) & (labels[:, k] == 0)

    def f(x):
        return QT @ x

    def check(x, t):
        mass = x.sum()
        if abs(mass - 1.0) > MASS_TOL or x.min() < -NEG_TOL:
            raise InvariantViolation(
                f"master distribution invalid at t={t:.6g}: mass {mass!r}, min {x.min()!r}", time=t
            )

    marg = np.empty((times.size, n, L))
    pair_out = {key: np.empty(times.size) for key in pair_masks}

    def record(m, x):
        marg[m] = (onehot.T @ x).reshape(n, L)
        for key, mask in pair_masks.items():
            pair_out[key][m] = x[mask].sum()

    record(0, P)
    t0 = 0.0
    for m in range(1, times.size):
        P = rk4(f, P, dt, 2, stride, check=lambda x, t: check(x, t0 + t))[1]
        t0 += stride * dt
        record(m, P)
    return MasterSolution(sample_times=times, marginals=marg, pairs=pair_out, n_states=gen.codes.size)
