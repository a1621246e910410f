"""Fixed-step classical Runge-Kutta integration on a regular sample grid."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numba
import numpy as np

from .errors import InvariantViolation, ValidationError
from .sir import NodeProbabilityState

PROB_TOL = 1e-9
DEFAULT_DT = 1e-3
DEFAULT_SAMPLE_DT = 0.05


def sample_grid(t_end: float, sample_dt: float) -> np.ndarray:
    """Times ``0, sample_dt, 2*sample_dt, ...`` not exceeding ``t_end``."""
    if not (sample_dt > 0 and t_end >= sample_dt):
        raise ValidationError(f"need 0 < sample_dt <= t_end, got {sample_dt}, {t_end}")
    m = int(math.floor(t_end / sample_dt + 1e-9))
    return np.arange(m + 1) * sample_dt


def _stride(sample_dt: float, dt: float) -> int:
    ratio = sample_dt / dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * max(1.0, ratio):
        raise ValidationError(f"sample_dt={sample_dt} is not an integer multiple of dt={dt}")
    return stride


def rk4(
    f: Callable[[np.ndarray], np.ndarray],
    y0: np.ndarray,
    dt: float,
    n_records: int,
    stride: int,
    check: Optional[Callable[[np.ndarray, float], None]] = None,
) -> np.ndarray:
    """Integrate the autonomous system ``y' = f(y)``; record every ``stride`` steps.

    Row ``m`` of the result is the state after ``m * stride`` steps.
    """
    y = np.array(y0, dtype=float)
    out = np.empty((n_records, y.size))
    out[0] = y
    half = 0.5 * dt
    sixth = dt / 6.0
    step = 0
    for m in range(1, n_records):
        for _ in range(stride):
            k1 = f(y)
            k2 = f(y + half * k1)
            k3 = f(y + half * k2)
            k4 = f(y + dt * k3)
            y = y + sixth * (k1 + 2.0 * (k2 + k3) + k4)
            step += 1
            if check is not None:
                check(y, step * dt)
        out[m] = y
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    sample_times: np.ndarray
    S: np.ndarray  # (T, n)
    E: np.ndarray  # (T, n, Nu)
    I: np.ndarray  # (T, n)

    @property
    def R(self) -> np.ndarray:
        return 1.0 - self.S - self.E.sum(axis=2) - self.I

    @property
    def n_nodes(self) -> int:
        return self.S.shape[1]

    def state(self, m: int) -> NodeProbabilityState:
        return NodeProbabilityState(S=self.S[m], E=self.E[m], I=self.I[m])

    @property
    def states(self) -> list:
        return [self.state(m) for m in range(len(self.sample_times))]


@numba.njit(cache=True)
def _first_bad_node(y, n, n_classes, tol):
    ne = n * n_classes
    for k in range(n):
        s = y[k]
        rest = 1.0 - s - y[n + ne + k]
        ok = -tol <= s <= 1.0 + tol and -tol <= y[n + ne + k] <= 1.0 + tol
        for u in range(n_classes):
            e = y[n + k * n_classes + u]
            rest -= e
            ok = ok and -tol <= e <= 1.0 + tol
        if not (ok and -tol <= rest <= 1.0 + tol):
            return k
    return -1


def _probability_check(n: int, n_classes: int, tol: float = PROB_TOL):
    ne = n * n_classes

    def check(y, t):
        node = _first_bad_node(y, n, n_classes, tol)
        if node >= 0:
            e = y[n + node * n_classes : n + (node + 1) * n_classes]
            comps = [float(y[node]), *e.tolist(), float(y[n + ne + node])]
            comps.append(1.0 - sum(comps))
            raise InvariantViolation(
                f"probability left [-{tol:g}, 1+{tol:g}] at t={t:.6g}, node {node}: {comps}",
                time=t,
                node=node,
            )

    return check


def integrate(
    rhs,
    y0: NodeProbabilityState,
    t_end: float,
    dt: float = DEFAULT_DT,
    sample_dt: float = DEFAULT_SAMPLE_DT,
    check: bool = True,
) -> Trajectory:
    """RK4 with fixed step ``dt``; the state is recorded every ``sample_dt``.

    ``rhs`` maps the flat state ``[S, E.ravel(), I]`` to its derivative.
    """
    if not (0 < dt <= sample_dt <= t_end):
        raise ValidationError(f"need 0 < dt <= sample_dt <= t_end, got {dt}, {sample_dt}, {t_end}")
    stride = _stride(sample_dt, dt)
    times = sample_grid(t_end, sample_dt)
    n, nclass = y0.n_nodes, y0.n_exposed_classes
    guard = _probability_check(n, nclass) if check else None
    rows = rk4(rhs, y0.flat(), dt, len(times), stride, guard)
    ne = n * nclass
    return Trajectory(
        sample_times=times,
        S=rows[:, :n],
        E=rows[:, n : n + ne].reshape(len(times), n, nclass),
        I=rows[:, n + ne :],
    )
