"""Gillespie (direct-method) simulation of the exact network SIR/SEIR process
and Monte-Carlo estimation of node-state probabilities.

Node labels are integer codes: ``0`` is S, ``1..Nu`` are the exposed classes,
``Nu + 1`` is I and ``Nu + 2`` is R.  Label order is also the only direction
in which a node's state can move, apart from transfers between exposed
classes.

Replica ``r`` of an ensemble draws from ``PCG64(mix(master_seed, r))``, so the
estimate depends only on the inputs and the master seed.  Because the seed
is mixed from ``master_seed XOR r``, two master seeds that agree on every bit
at or above ``ceil(log2(n_runs))`` yield the same replica set in a different
order, hence the same estimate; use master seeds that differ in high bits.  Runs are tallied as
integer counts, which makes the merge across workers exact in any grouping.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from .errors import ValidationError
from .net import ContagionNetwork, InitialCondition

MASK64 = 0xFFFFFFFFFFFFFFFF


def mix(master_seed: int, replica: int) -> int:
    """splitmix64 finalizer applied to ``master_seed XOR replica``."""
    z = (int(master_seed) ^ int(replica)) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def label_names(n_classes: int) -> list:
    return ["S"] + [f"E_{u + 1}" for u in range(n_classes)] + ["I", "R"]


class _Kernel:
    """CSR adjacency and per-node rate tables in the layout the jitted code uses."""

    def __init__(self, net: ContagionNetwork):
        n, nclass = net.n_nodes, net.n_exposed_classes
        src, dst, lam = np.array(net.src), np.array(net.dst), np.array(net.lam)
        order = np.lexsort((src, dst))
        self.in_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(dst, minlength=n), out=self.in_ptr[1:])
        self.in_src = src[order].astype(np.int64)
        self.in_lam = lam[order].astype(np.float64)
        order = np.lexsort((dst, src))
        self.out_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=self.out_ptr[1:])
        self.out_dst = dst[order].astype(np.int64)

        self.gamma = np.array(net.gamma, dtype=np.float64)
        self.phi = np.array(net.phi, dtype=np.float64).reshape(n, nclass)
        # trans[k, u, :] = rates E(u) -> E(0..Nu-1), I, R
        trans = np.zeros((n, nclass, nclass + 2))
        if nclass:
            trans[:, :, :nclass] = np.transpose(np.array(net.a), (0, 2, 1))
            trans[:, :, nclass] = net.mu
            trans[:, :, nclass + 1] = net.nu
        self.trans = trans
        self.exit_rate = trans.sum(axis=2)
        self.n = n
        self.n_classes = nclass

    def args(self):
        return (
            self.in_ptr,
            self.in_src,
            self.in_lam,
            self.out_ptr,
            self.out_dst,
            self.gamma,
            self.phi,
            self.trans,
            self.exit_rate,
        )


@numba.njit(cache=True, nogil=True)
def _hazard(k, lab, nclass, press, gamma, exit_rate):
    if lab == 0:
        return press[k]
    if lab <= nclass:
        return exit_rate[k, lab - 1]
    if lab == nclass + 1:
        return gamma[k]
    return 0.0


@numba.njit(cache=True, nogil=True)
def _pressure(k, labels, nclass, in_ptr, in_src, in_lam):
    s = 0.0
    for e in range(in_ptr[k], in_ptr[k + 1]):
        if labels[in_src[e]] == nclass + 1:
            s += in_lam[e]
    return s


@numba.njit(cache=True, nogil=True)
def _sample_labels(rng, probs):
    n, L = probs.shape
    labels = np.empty(n, dtype=np.int64)
    for k in range(n):
        best = 0
        for c in range(L):
            if probs[k, c] > probs[k, best]:
                best = c
        if probs[k, best] == 1.0:
            labels[k] = best
            continue
        u = rng.random()
        acc = 0.0
        labels[k] = -1
        last = 0
        for c in range(L):
            if probs[k, c] > 0:
                last = c
            acc += probs[k, c]
            if u < acc:
                labels[k] = c
                break
        if labels[k] < 0:
            labels[k] = last
    return labels


@numba.njit(cache=True, nogil=True)
def _simulate(
    rng,
    labels,
    t_max,
    in_ptr,
    in_src,
    in_lam,
    out_ptr,
    out_dst,
    gamma,
    phi,
    trans,
    exit_rate,
):
    n = labels.shape[0]
    nclass = phi.shape[1]
    lab_i = nclass + 1
    lab_r = nclass + 2
    press = np.zeros(n)
    haz = np.zeros(n)
    for k in range(n):
        if labels[k] == 0:
            press[k] = _pressure(k, labels, nclass, in_ptr, in_src, in_lam)
        haz[k] = _hazard(k, labels[k], nclass, press, gamma, exit_rate)

    cap = 4 * n + 16
    ev_t = np.empty(cap)
    ev_node = np.empty(cap, dtype=np.int64)
    ev_lab = np.empty(cap, dtype=np.int64)
    n_ev = 0
    t = 0.0
    while True:
        total = 0.0
        for k in range(n):
            total += haz[k]
        if total <= 0.0:
            break
        t += rng.exponential(1.0 / total)
        if t > t_max:
            break
        target = rng.random() * total
        acc = 0.0
        pick = -1
        for k in range(n):
            if haz[k] > 0.0:
                pick = k
                acc += haz[k]
                if target < acc:
                    break
        old = labels[pick]
        if old == 0:
            u = rng.random()
            new = lab_i
            acc = 0.0
            for c in range(nclass):
                acc += phi[pick, c]
                if u < acc:
                    new = c + 1
                    break
        elif old <= nclass:
            row = trans[pick, old - 1]
            target = rng.random() * exit_rate[pick, old - 1]
            acc = 0.0
            new = -1
            for c in range(nclass + 2):
                if row[c] > 0.0:
                    new = c
                    acc += row[c]
                    if target < acc:
                        break
            # column c maps to E(c+1) for c < nclass, then I, then R
            new = new + 1
        else:
            new = lab_r
        labels[pick] = new
        haz[pick] = _hazard(pick, new, nclass, press, gamma, exit_rate)

        if old == lab_i or new == lab_i:
            for e in range(out_ptr[pick], out_ptr[pick + 1]):
                d = out_dst[e]
                if labels[d] == 0:
                    press[d] = _pressure(d, labels, nclass, in_ptr, in_src, in_lam)
                    haz[d] = press[d]

        if n_ev == cap:
            cap *= 2
            t2 = np.empty(cap)
            n2 = np.empty(cap, dtype=np.int64)
            l2 = np.empty(cap, dtype=np.int64)
            t2[:n_ev] = ev_t[:n_ev]
            n2[:n_ev] = ev_node[:n_ev]
            l2[:n_ev] = ev_lab[:n_ev]
            ev_t, ev_node, ev_lab = t2, n2, l2
        ev_t[n_ev] = t
        ev_node[n_ev] = pick
        ev_lab[n_ev] = new
        n_ev += 1
    return ev_t[:n_ev], ev_node[:n_ev], ev_lab[:n_ev]


@numba.njit(cache=True, nogil=True)
def _accumulate(diff, labels0, ev_t, ev_node, ev_lab, sample_times):
    n = labels0.shape[0]
    T = sample_times.shape[0]
    cur = labels0.copy()
    start = np.zeros(n, dtype=np.int64)
    for e in range(ev_t.shape[0]):
        k = ev_node[e]
        # samples at or after the event time see the new label
        idx = np.searchsorted(sample_times, ev_t[e])
        if idx > start[k]:
            diff[k, cur[k], start[k]] += 1
            diff[k, cur[k], idx] -= 1
            start[k] = idx
        cur[k] = ev_lab[e]
    for k in range(n):
        diff[k, cur[k], start[k]] += 1
        diff[k, cur[k], T] -= 1


@numba.njit(cache=True, nogil=True)
def _run_one(
    rng,
    probs,
    sample_times,
    diff,
    in_ptr,
    in_src,
    in_lam,
    out_ptr,
    out_dst,
    gamma,
    phi,
    trans,
    exit_rate,
):
    labels0 = _sample_labels(rng, probs)
    labels = labels0.copy()
    t_max = sample_times[sample_times.shape[0] - 1]
    ev_t, ev_node, ev_lab = _simulate(
        rng, labels, t_max, in_ptr, in_src, in_lam, out_ptr, out_dst, gamma, phi, trans, exit_rate
    )
    _accumulate(diff, labels0, ev_t, ev_node, ev_lab, sample_times)


def _check_categorical(probs: np.ndarray, n: int, nclass: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (n, nclass + 3):
        raise ValidationError(f"categorical IC must have shape {(n, nclass + 3)}, got {probs.shape}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-12):
        raise ValidationError("categorical IC weights must be nonnegative and sum to 1 per node")
    return np.ascontiguousarray(probs)


def _as_probs(init, net: ContagionNetwork) -> np.ndarray:
    if isinstance(init, InitialCondition):
        init.check_compatible(net)
        init = init.label_probs()
    return _check_categorical(init, net.n_nodes, net.n_exposed_classes)


@dataclass(frozen=True, eq=False)
class GillespieRun:
    initial_labels: np.ndarray
    events: list  # (time, node, new label code)

    def labels_at(self, t: float) -> np.ndarray:
        labels = self.initial_labels.copy()
        for te, k, lab in self.events:
            if te > t:
                break
            labels[k] = lab
        return labels


def gillespie_run(net: ContagionNetwork, init, t_max: float, rng: np.random.Generator) -> GillespieRun:
    """One exact stochastic trajectory up to ``t_max``.

    ``init`` is either an integer label per node or per-node categorical
    weights (an ``InitialCondition`` or an ``(n, Nu + 3)`` array) that are
    sampled with ``rng``.
    """
    if not t_max > 0:
        raise ValidationError("t_max must be > 0")
    kern = _Kernel(net)
    arr = init.label_probs() if isinstance(init, InitialCondition) else np.asarray(init)
    if arr.ndim == 1:
        labels0 = arr.astype(np.int64)
        if labels0.shape != (net.n_nodes,) or labels0.min() < 0 or labels0.max() > kern.n_classes + 2:
            raise ValidationError("initial labels must be codes 0..Nu+2, one per node")
    else:
        labels0 = _sample_labels(rng, _as_probs(arr, net))
    labels = labels0.copy()
    ev_t, ev_node, ev_lab = _simulate(rng, labels, float(t_max), *kern.args())
    events = list(zip(ev_t.tolist(), ev_node.tolist(), ev_lab.tolist()))
    return GillespieRun(initial_labels=labels0, events=events)


@dataclass(frozen=True, eq=False)
class EnsembleEstimate:
    """Label probabilities ``probs[t, node, label]`` and their standard errors."""

    sample_times: np.ndarray
    counts: np.ndarray
    n_runs: int

    @property
    def n_classes(self) -> int:
        return self.counts.shape[2] - 3

    @property
    def probs(self) -> np.ndarray:
        return self.counts / self.n_runs

    @property
    def stderr(self) -> np.ndarray:
        p = self.probs
        return np.sqrt(p * (1.0 - p) / self.n_runs)

    def wilson(self, z: float = 3.0):
        """Wilson score interval ``(lower, upper)`` for every probability."""
        return wilson_interval(self.probs, self.n_runs, z)

    @property
    def S(self):
        return self.probs[:, :, 0]

    @property
    def E(self):
        return self.probs[:, :, 1 : 1 + self.n_classes]

    @property
    def I(self):
        return self.probs[:, :, self.n_classes + 1]

    @property
    def R(self):
        return self.probs[:, :, self.n_classes + 2]


def wilson_interval(p, n_runs: int, z: float = 3.0):
    """Wilson score interval for binomial proportions ``p`` from ``n_runs`` trials.

    Unlike ``p +- z * sqrt(p (1 - p) / n)`` it keeps a nonzero width when
    ``p`` is 0 or 1 and stays honest when only a handful of runs differ.
    """
    p = np.asarray(p, dtype=float)
    if n_runs < 1:
        raise ValidationError("n_runs must be >= 1")
    z2n = z * z / n_runs
    centre = (p + 0.5 * z2n) / (1.0 + z2n)
    half = z * np.sqrt(p * (1.0 - p) / n_runs + 0.25 * z2n / n_runs) / (1.0 + z2n)
    lower = np.where(p <= 0.0, 0.0, np.clip(centre - half, 0.0, 1.0))
    upper = np.where(p >= 1.0, 1.0, np.clip(centre + half, 0.0, 1.0))
    return lower, upper


def default_workers() -> int:
    env = os.environ.get("CONTAGION_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"CONTAGION_THREADS must be an integer, got {env!r}")
    return 1


def _run_block(kern_args, probs, sample_times, master_seed, lo, hi, shape):
    diff = np.zeros(shape, dtype=np.int64)
    for r in range(lo, hi):
        rng = np.random.Generator(np.random.PCG64(mix(master_seed, r)))
        _run_one(rng, probs, sample_times, diff, *kern_args)
    return diff


def ensemble_estimate(
    net: ContagionNetwork,
    init,
    n_runs: int,
    sample_times: Sequence[float],
    master_seed: int,
    workers: Optional[int] = None,
) -> EnsembleEstimate:
    sample_times = np.ascontiguousarray(sample_times, dtype=np.float64)
    if sample_times.size == 0:
        raise ValidationError("sample_times must not be empty")
    if np.any(np.diff(sample_times) <= 0) or sample_times[0] < 0:
        raise ValidationError("sample_times must be nonnegative and strictly increasing")
    if n_runs < 1:
        raise ValidationError("n_runs must be >= 1")
    probs = _as_probs(init, net)
    kern = _Kernel(net)
    workers = default_workers() if workers is None else max(1, int(workers))
    T, L = sample_times.size, kern.n_classes + 3
    shape = (net.n_nodes, L, T + 1)

    bounds = np.linspace(0, n_runs, min(workers, n_runs) + 1).astype(np.int64)
    blocks = list(zip(bounds[:-1].tolist(), bounds[1:].tolist()))
    args = (kern.args(), probs, sample_times, int(master_seed))
    if len(blocks) == 1:
        diffs = [_run_block(*args, *blocks[0], shape)]
    else:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            diffs = list(pool.map(lambda b: _run_block(*args, b[0], b[1], shape), blocks))
    total = np.zeros(shape, dtype=np.int64)
    for d in diffs:
        total += d
    counts = np.cumsum(total, axis=2)[:, :, :T].transpose(2, 0, 1)
    return EnsembleEstimate(
        sample_times=sample_times, counts=np.ascontiguousarray(counts), n_runs=int(n_runs)
    )
