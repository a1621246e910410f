"""SIR node-probability dynamics: exact rooted-tree system, rooted-tree
approximation (RTA) for general networks, and closed-form chain solutions.

Right-hand sides are built once as small callable objects that precompute
edge arrays and then map a flat state vector ``[S, E.ravel(), I]`` to its
time derivative.  R is never integrated; it is the complement of the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .errors import ValidationError
from .net import SIR, ContagionNetwork, InitialCondition, RootedTreeInfo

_R0_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class NodeProbabilityState:
    """Node-state probabilities at one instant; ``R`` is derived."""

    S: np.ndarray
    E: np.ndarray
    I: np.ndarray

    @property
    def R(self) -> np.ndarray:
        return 1.0 - self.S - self.E.sum(axis=1) - self.I

    @property
    def n_nodes(self) -> int:
        return self.S.shape[0]

    @property
    def n_exposed_classes(self) -> int:
        return self.E.shape[1]

    @classmethod
    def from_initial(cls, init: InitialCondition) -> "NodeProbabilityState":
        return cls(S=np.array(init.S), E=np.array(init.E), I=np.array(init.I))

    @classmethod
    def from_flat(cls, y: np.ndarray, n: int, n_classes: int) -> "NodeProbabilityState":
        ne = n * n_classes
        return cls(
            S=np.array(y[:n]),
            E=np.array(y[n : n + ne]).reshape(n, n_classes),
            I=np.array(y[n + ne :]),
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.S, self.E.ravel(), self.I])


@dataclass(frozen=True, eq=False)
class StateDerivative:
    """Time derivative of a NodeProbabilityState; ``R`` balances the rest."""

    S: np.ndarray
    E: np.ndarray
    I: np.ndarray

    @property
    def R(self) -> np.ndarray:
        return -(self.S + self.E.sum(axis=1) + self.I)

    @classmethod
    def from_flat(cls, dy: np.ndarray, n: int, n_classes: int) -> "StateDerivative":
        s = NodeProbabilityState.from_flat(dy, n, n_classes)
        return cls(S=s.S, E=s.E, I=s.I)


def closed_form_chain(k: int, t: float, lam: float, gamma: float):
    """Exact (S, I, R) of the node at depth ``k`` on an infinite uniform chain
    whose root (depth 0) is initially infectious.

    The truncated exponential sums are accumulated as Poisson weights
    ``exp(-x) x**n / n!`` by recurrence, which stays finite for large ``t``.
    """
    if not lam > 0:
        raise ValidationError(f"lambda must be > 0, got {lam}")
    if gamma < 0 or k < 0 or t < 0:
        raise ValidationError("need gamma >= 0, k >= 0 and t >= 0")
    c = lam + gamma
    ratio_k = (lam / c) ** k

    # e^{-ct} sum_{n<k} (ct)^n/n!  and  e^{-ct} sum_{n<k} (lam t)^n/n!
    w_s = math.exp(-c * t)
    w_i = w_s
    sum_s = sum_i = 0.0
    for n in range(k):
        if n:
            w_s *= c * t / n
            w_i *= lam * t / n
        sum_s += w_s
        sum_i += w_i

    decay = math.exp(-gamma * t)
    S = 1.0 - ratio_k + ratio_k * sum_s
    I = decay - sum_i
    R = ratio_k - decay + sum_i - ratio_k * sum_s
    return S, I, R


def pair_prob_is(S_k: float, S_p: float, lambda_k: float, gamma_p: float) -> float:
    """Probability that the parent is infectious while the child is
    susceptible, from node marginals; exact on rooted trees."""
    if not lambda_k > 0:
        raise ValidationError(f"lambda_k must be > 0, got {lambda_k}")
    return (lambda_k + gamma_p) / lambda_k * S_k - S_p - gamma_p / lambda_k


def _require_sir(net: ContagionNetwork):
    if net.model != SIR:
        raise ValidationError(f"expected an SIR network, got {net.model}")


def _edge_rate_lookup(net: ContagionNetwork) -> dict:
    return {(j, k): lam for j, k, lam in net.edges}


class SirRootedExact:
    """Exact closed system on a rooted tree (parent-driven linear ODEs)."""

    n_classes = 0

    def __init__(self, net: ContagionNetwork, tree: Optional[RootedTreeInfo]):
        _require_sir(net)
        if tree is None:
            raise ValidationError("rooted-tree information is required for the exact system")
        n = net.n_nodes
        rates = _edge_rate_lookup(net)
        self.n = n
        self.gamma = np.array(net.gamma)
        children = np.array([k for k in range(n) if k != tree.root], dtype=np.int64)
        parents = np.array([tree.parent[k] for k in children], dtype=np.int64)
        self.children = children
        self.parents = parents
        self.lam_k = np.array([rates.get((p, k), 0.0) for p, k in zip(parents, children)])
        self.gamma_p = self.gamma[parents] if children.size else np.zeros(0)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return _rooted_exact_kernel(
            y, self.children, self.parents, self.lam_k, self.gamma_p, self.gamma
        )


class SirRta:
    """Rooted-tree approximation on a general network.

    Each directed edge ``j -> k`` contributes the clipped bracket
    ``[-gamma_j S_k(0) + (lam + gamma_j) S_k - lam S_j]^+`` to the infection
    flux into ``k``.
    """

    n_classes = 0

    def __init__(self, net: ContagionNetwork, y0: NodeProbabilityState):
        _require_sir(net)
        R0 = y0.R
        if np.any(np.abs(R0) > _R0_TOL):
            k = int(np.argmax(np.abs(R0)))
            raise ValidationError(
                f"node {k} is initially recovered (R0={R0[k]!r}); remove recovered nodes first"
            )
        self.n = net.n_nodes
        self.src = np.array(net.src)
        self.dst = np.array(net.dst)
        lam = np.array(net.lam)
        g = np.array(net.gamma)
        self.gamma = g
        self.lam = lam
        # bracket written as gamma_j (S_k - S_k(0)) + lam (S_k - S_j), which is
        # exactly zero in a fully susceptible neighbourhood
        self.gamma_src = g[self.src]
        self.S0_dst = np.asarray(y0.S, dtype=float)[self.dst]

    def flux(self, S: np.ndarray) -> np.ndarray:
        return _rta_flux(S, self.src, self.dst, self.lam, self.gamma_src, self.S0_dst)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return _rta_kernel(
            y, self.src, self.dst, self.lam, self.gamma_src, self.S0_dst, self.gamma
        )


@numba.njit(cache=True)
def _rooted_exact_kernel(y, children, parents, lam_k, gamma_p, gamma):
    n = gamma.shape[0]
    out = np.empty(2 * n)
    for k in range(n):
        out[k] = 0.0
    for i in range(children.shape[0]):
        k, p = children[i], parents[i]
        out[k] = -(lam_k[i] + gamma_p[i]) * y[k] + lam_k[i] * y[p] + gamma_p[i]
    for k in range(n):
        out[n + k] = -out[k] - gamma[k] * y[n + k]
    return out


@numba.njit(cache=True)
def _rta_flux(S, src, dst, lam, gamma_src, S0_dst):
    flux = np.zeros(S.shape[0])
    for e in range(src.shape[0]):
        Sk = S[dst[e]]
        b = gamma_src[e] * (Sk - S0_dst[e]) + lam[e] * (Sk - S[src[e]])
        if b > 0.0:
            flux[dst[e]] += b
    return flux


@numba.njit(cache=True)
def _rta_kernel(y, src, dst, lam, gamma_src, S0_dst, gamma):
    n = gamma.shape[0]
    flux = _rta_flux(y[:n], src, dst, lam, gamma_src, S0_dst)
    out = np.empty(2 * n)
    for k in range(n):
        out[k] = -flux[k]
        out[n + k] = flux[k] - gamma[k] * y[n + k]
    return out


def rhs_rooted_exact(
    y: NodeProbabilityState, net: ContagionNetwork, tree: Optional[RootedTreeInfo]
) -> StateDerivative:
    dy = SirRootedExact(net, tree)(y.flat())
    return StateDerivative.from_flat(dy, net.n_nodes, 0)


def rhs_rta(
    y: NodeProbabilityState, y0: NodeProbabilityState, net: ContagionNetwork
) -> StateDerivative:
    dy = SirRta(net, y0)(y.flat())
    return StateDerivative.from_flat(dy, net.n_nodes, 0)
