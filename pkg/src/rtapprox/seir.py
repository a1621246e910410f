"""Generalised multi-class SEIR dynamics.

Per node the exposed classes evolve linearly through the matrix ``A``
(diagonal: total exit rate of each class; off-diagonal: minus the class
transfer rates).  Everything the closed systems need from ``A`` is the pair
of row vectors ``mu^T A^{-1}`` and ``nu^T A^{-1}``, obtained once by solving
``A^T x = mu`` and ``A^T x = nu``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
import scipy.linalg

from .errors import InvariantViolation, ValidationError
from .net import SEIR, ContagionNetwork, RootedTreeInfo, SeirNodeRates
from .sir import NodeProbabilityState, StateDerivative

_PIVOT_TOL = 1e-13
_IDENTITY_TOL = 1e-12
_MATCH_TOL = 1e-12


def assemble_A(rates: SeirNodeRates) -> np.ndarray:
    """Exposed-class transition matrix; column ``v`` sums to ``mu[v] + nu[v]``."""
    a = np.asarray(rates.a, dtype=float)
    nclass = rates.phi.shape[0]
    if a.shape != (nclass, nclass) or rates.mu.shape != (nclass,) or rates.nu.shape != (nclass,):
        raise ValidationError("phi, mu, nu and a have inconsistent dimensions")
    A = -a.copy()
    np.fill_diagonal(A, rates.mu + rates.nu + (a.sum(axis=0) - np.diag(a)))
    return A


@dataclass(frozen=True, eq=False)
class SeirDerived:
    A: np.ndarray
    muTAinv: np.ndarray
    nuTAinv: np.ndarray
    muTAinvPhi: float
    nuTAinvPhi: float


def node_projections(A, phi, mu, nu) -> SeirDerived:
    A = np.asarray(A, dtype=float)
    phi = np.asarray(phi, dtype=float)
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    nclass = A.shape[0]
    if nclass == 0:
        z = np.zeros(0)
        return SeirDerived(A=A, muTAinv=z, nuTAinv=z, muTAinvPhi=0.0, nuTAinvPhi=0.0)

    scale = np.max(np.abs(A))
    if not scale > 0:
        raise ValidationError("exposed-class matrix A is zero")
    with warnings.catch_warnings():
        # singularity is reported by the pivot test below
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A.T, check_finite=True)
    if np.min(np.abs(np.diag(lu))) < _PIVOT_TOL * scale:
        raise ValidationError("exposed-class matrix A is numerically singular")
    x_mu = scipy.linalg.lu_solve((lu, piv), mu)
    x_nu = scipy.linalg.lu_solve((lu, piv), nu)

    err = np.max(np.abs(x_mu + x_nu - 1.0))
    if err > _IDENTITY_TOL:
        raise InvariantViolation(f"mu^T A^-1 + nu^T A^-1 deviates from 1 by {err:.3e}")
    return SeirDerived(
        A=A,
        muTAinv=x_mu,
        nuTAinv=x_nu,
        muTAinvPhi=float(x_mu @ phi),
        nuTAinvPhi=float(x_nu @ phi),
    )


class NetworkProjections:
    """Stacked per-node ``A`` and projection vectors for a whole network."""

    def __init__(self, net: ContagionNetwork):
        if net.model != SEIR:
            raise ValidationError(f"expected an SEIR network, got {net.model}")
        n, nclass = net.n_nodes, net.n_exposed_classes
        self.A = np.zeros((n, nclass, nclass))
        self.muP = np.zeros((n, nclass))
        self.nuP = np.zeros((n, nclass))
        cache = {}
        for k, r in enumerate(net.node_rates):
            d = cache.get(id(r))
            if d is None:
                d = node_projections(assemble_A(r), r.phi, r.mu, r.nu)
                cache[id(r)] = d
            self.A[k] = d.A
            self.muP[k] = d.muTAinv
            self.nuP[k] = d.nuTAinv


class _SeirBase:
    def __init__(self, net: ContagionNetwork):
        proj = NetworkProjections(net)
        self.n = net.n_nodes
        self.n_classes = net.n_exposed_classes
        self.A = proj.A
        self.muP = proj.muP
        self.nuP = proj.nuP
        self.phi = np.array(net.phi)
        self.mu = np.array(net.mu)
        self.gamma = np.array(net.gamma)
        self.direct = 1.0 - self.phi.sum(axis=1)


@numba.njit(cache=True)
def _finish(dS, y, A, phi, mu, direct, gamma):
    """Assemble ``[dS, dE, dI]`` given the susceptible derivative."""
    n, nc = phi.shape
    out = np.empty(n * (nc + 2))
    for k in range(n):
        out[k] = dS[k]
        di = -direct[k] * dS[k] - gamma[k] * y[n + n * nc + k]
        for u in range(nc):
            acc = -phi[k, u] * dS[k]
            for v in range(nc):
                acc -= A[k, u, v] * y[n + k * nc + v]
            out[n + k * nc + u] = acc
            di += mu[k, u] * y[n + k * nc + u]
        out[n + n * nc + k] = di
    return out


@numba.njit(cache=True)
def _rta_flux(y, src, dst, lam, coef_k, const, s_weight, muP):
    n, nc = muP.shape
    w = np.empty(n)
    for j in range(n):
        acc = s_weight[j] * y[j]
        for u in range(nc):
            acc += muP[j, u] * y[n + j * nc + u]
        w[j] = acc
    flux = np.zeros(n)
    for e in range(src.shape[0]):
        b = const[e] + coef_k[e] * y[dst[e]] - lam[e] * w[src[e]]
        if b > 0.0:
            flux[dst[e]] += b
    return flux


@numba.njit(cache=True)
def _rooted_dS(y, children, parents, lam_k, gamma_p, nuPphi_p, muP):
    n, nc = muP.shape
    dS = np.zeros(n)
    for i in range(children.shape[0]):
        k, p = children[i], parents[i]
        muPE = 0.0
        for u in range(nc):
            muPE += muP[p, u] * y[n + p * nc + u]
        lk = lam_k[i]
        dS[k] = (
            lk * nuPphi_p[i]
            + gamma_p[i]
            - (lk + gamma_p[i]) * y[k]
            + lk * (1.0 - nuPphi_p[i]) * y[p]
            + lk * muPE
        )
    return dS


class SeirRta(_SeirBase):
    """SEIR rooted-tree approximation; upper-bounds S on any network."""

    def __init__(self, net: ContagionNetwork, y0: NodeProbabilityState):
        super().__init__(net)
        R0 = y0.R
        if np.any(np.abs(R0) > 1e-12):
            k = int(np.argmax(np.abs(R0)))
            raise ValidationError(
                f"node {k} is initially recovered (R0={R0[k]!r}); remove recovered nodes first"
            )
        S0, E0 = np.asarray(y0.S), np.asarray(y0.E)
        self.src = np.array(net.src)
        self.dst = np.array(net.dst)
        lam = np.array(net.lam)
        self.lam = lam
        g_src = self.gamma[self.src]
        self.coef_k = lam + g_src
        # nu^T A^-1 (phi S(0) + E(0)) at each source node
        q0 = np.einsum("ku,ku->k", self.nuP, self.phi * S0[:, None] + E0)
        self.const = -lam * q0[self.src] - g_src * S0[self.dst]
        # coefficient of S_j inside the source weight
        muPphi = np.einsum("ku,ku->k", self.muP, self.phi)
        self.s_weight = self.direct + muPphi

    def flux(self, y: np.ndarray) -> np.ndarray:
        return _rta_flux(
            y, self.src, self.dst, self.lam, self.coef_k, self.const, self.s_weight, self.muP
        )

    def __call__(self, y: np.ndarray) -> np.ndarray:
        dS = -self.flux(y)
        return _finish(dS, y, self.A, self.phi, self.mu, self.direct, self.gamma)


class SeirRootedExact(_SeirBase):
    """Exact closed SEIR system on a rooted tree.

    The root never becomes infected, so its own infection-branching vector
    plays no role in its dynamics; in its parent role it is replaced by the
    root's initial exposed distribution.
    """

    def __init__(
        self,
        net: ContagionNetwork,
        tree: Optional[RootedTreeInfo],
        y0: NodeProbabilityState,
        root_phi=None,
    ):
        super().__init__(net)
        if tree is None:
            raise ValidationError("rooted-tree information is required for the exact system")
        root = tree.root
        E_root = np.asarray(y0.E[root], dtype=float)
        if root_phi is not None and np.max(np.abs(np.asarray(root_phi) - E_root), initial=0) > _MATCH_TOL:
            raise ValidationError(
                "root phi must equal the root's initial exposed probabilities "
                f"(got {list(root_phi)}, initial E {list(E_root)})"
            )
        rates = {(j, k): lam for j, k, lam in net.edges}
        children = np.array([k for k in range(self.n) if k != root], dtype=np.int64)
        parents = np.array([tree.parent[k] for k in children], dtype=np.int64)
        self.children, self.parents = children, parents
        self.lam_k = np.array([rates.get((p, k), 0.0) for p, k in zip(parents, children)])
        phi_parent = self.phi.copy()
        phi_parent[root] = E_root
        nuPphi = np.einsum("ku,ku->k", self.nuP, phi_parent)
        self.gamma_p = self.gamma[parents] if children.size else np.zeros(0)
        self.nuPphi_p = nuPphi[parents] if children.size else np.zeros(0)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        dS = _rooted_dS(
            y, self.children, self.parents, self.lam_k, self.gamma_p, self.nuPphi_p, self.muP
        )
        return _finish(dS, y, self.A, self.phi, self.mu, self.direct, self.gamma)


class SeirChainSingleClass:
    """Scalar single-exposed-class system on a uniform chain rooted at 0."""

    n_classes = 1

    def __init__(self, n, lam, phi, mu, nu, gamma, root_exposed=None):
        self.n = int(n)
        self.lam, self.mu, self.nu, self.gamma = float(lam), float(mu), float(nu), float(gamma)
        self.phi = float(phi)
        if self.mu + self.nu <= 0:
            raise ValidationError("mu + nu must be > 0")
        phis = np.full(self.n, self.phi)
        phis[0] = self.phi if root_exposed is None else float(np.ravel(root_exposed)[0])
        self._phi_parent = phis[:-1]
        self._phi_self = np.full(self.n, self.phi)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        n = self.n
        S, E, I = y[:n], y[n : 2 * n], y[2 * n :]
        lam, mu, nu, g = self.lam, self.mu, self.nu, self.gamma
        out = mu + nu
        fp = self._phi_parent
        dS = np.zeros(n)
        dS[1:] = (
            lam * mu / out * (fp * S[:-1] + E[:-1])
            + lam * (1.0 - fp) * S[:-1]
            - (lam + g) * S[1:]
            + g
            + lam * nu * fp / out
        )
        dE = -self._phi_self * dS - out * E
        dI = -(1.0 - self._phi_self) * dS - g * I + mu * E
        return np.concatenate([dS, dE, dI])


def rhs_rooted_exact_seir(
    y: NodeProbabilityState,
    net: ContagionNetwork,
    tree: Optional[RootedTreeInfo],
    y0: NodeProbabilityState,
    root_phi=None,
) -> StateDerivative:
    f = SeirRootedExact(net, tree, y0, root_phi=root_phi)
    return StateDerivative.from_flat(f(y.flat()), net.n_nodes, net.n_exposed_classes)


def rhs_chain_single_class(
    y: NodeProbabilityState, lam, phi, mu, nu, gamma, root_exposed=None
) -> StateDerivative:
    if y.n_exposed_classes != 1:
        raise ValidationError(f"single-class chain needs 1 exposed class, got {y.n_exposed_classes}")
    f = SeirChainSingleClass(y.n_nodes, lam, phi, mu, nu, gamma, root_exposed=root_exposed)
    return StateDerivative.from_flat(f(y.flat()), y.n_nodes, 1)


def rhs_rta_seir(
    y: NodeProbabilityState, y0: NodeProbabilityState, net: ContagionNetwork
) -> StateDerivative:
    f = SeirRta(net, y0)
    return StateDerivative.from_flat(f(y.flat()), net.n_nodes, net.n_exposed_classes)
