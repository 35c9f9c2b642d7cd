"""Stage-correction algebra for multirate explicit Runge-Kutta stepping.

For an explicit scheme with stages ``k_i = F(u + dt * sum_j a_ij k_j)`` the
stage vector of the linear test problem factors as ``K = C P(dt) D`` where
``D = (d/dt u, d^2/dt^2 u, ...)`` at the step start, ``P(dt)`` is the diagonal
of dt powers and ``C`` is lower triangular with entries derived from the
tableau.  Converting stage vectors between step sizes (and shifting the
expansion point by ``delta``) is then the conjugation

    M(delta, dt_from -> dt_to) = C P(dt_to) B(delta) P(dt_from)^-1 C^-1

with ``B`` the truncated Taylor-shift of the derivative vector.  The product
order follows the stage factorization above; it is pinned operationally by
the polynomial-forcing exactness tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ButcherTableau:
    """Explicit tableau: strictly lower-triangular a, weights w."""

    name: str
    a: tuple[tuple[float, ...], ...]
    w: tuple[float, ...]
    order: int

    @property
    def stages(self) -> int:
        return len(self.w)

    def __post_init__(self):
        p = self.stages
        if len(self.a) != p:
            raise ValueError("tableau a must have one row per stage")
        for i, row in enumerate(self.a):
            if len(row) != p:
                raise ValueError("tableau a rows must be square")
            if any(row[j] != 0.0 for j in range(i, p)):
                raise ValueError("tableau must be explicit (strictly lower triangular a)")
        if abs(sum(self.w) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    @property
    def c(self) -> tuple[float, ...]:
        return tuple(sum(row) for row in self.a)


def _tab(name, a, w, order):
    p = len(w)
    rows = tuple(tuple(a[i] + [0.0] * (p - len(a[i]))) for i in range(p))
    return ButcherTableau(name, rows, tuple(w), order)


TABLEAUS: dict[str, ButcherTableau] = {
    "euler": _tab("euler", [[]], [1.0], 1),
    "rk2": _tab("rk2", [[], [0.5]], [0.0, 1.0], 2),
    "rk3": _tab("rk3", [[], [0.5], [-1.0, 2.0]], [1 / 6, 2 / 3, 1 / 6], 3),
    "rk4": _tab(
        "rk4",
        [[], [0.5], [0.0, 0.5], [0.0, 0.0, 1.0]],
        [1 / 6, 1 / 3, 1 / 3, 1 / 6],
        4,
    ),
}


def get_tableau(name: str) -> ButcherTableau:
    try:
        return TABLEAUS[name]
    except KeyError:
        raise ValueError(f"unknown tableau {name!r}; choose from {sorted(TABLEAUS)}") from None


def build_C(tab: ButcherTableau) -> np.ndarray:
    """Lower-triangular stage-to-derivative coefficients.

    c[i][0] = 1 and c[i][j] = sum_m a[i][m] * c[m][j-1], the Taylor
    expansion of the stages for the linear test problem.
    """
    p = tab.stages
    C = np.zeros((p, p))
    C[:, 0] = 1.0
    for j in range(1, p):
        for i in range(p):
            C[i, j] = sum(tab.a[i][m] * C[m, j - 1] for m in range(i))
    return C


def build_B(delta: float, p: int) -> np.ndarray:
    """Upper-triangular Taylor shift of a length-p derivative vector."""
    if p < 1:
        raise ValueError("p must be >= 1")
    B = np.zeros((p, p))
    for i in range(p):
        for j in range(i, p):
            B[i, j] = delta ** (j - i) / math.factorial(j - i)
    return B


def build_P(dt: float, p: int) -> np.ndarray:
    return np.diag([dt**j for j in range(p)])


def stage_transfer_matrix(
    tab: ButcherTableau, delta: float, dt_from: float, dt_to: float
) -> np.ndarray:
    """Map stages of a ``dt_from`` step at t0 to stages of a ``dt_to`` step
    starting at ``t0 + delta``."""
    p = tab.stages
    C = build_C(tab)
    C_inv = np.linalg.inv(C)
    M = C @ build_P(dt_to, p) @ build_B(delta, p) @ np.diag(
        [dt_from**-j for j in range(p)]
    ) @ C_inv
    return M


@dataclass
class CorrectionSet:
    """Correction operators for a fine/coarse step pair with dt_c = 2 dt_f."""

    tableau: ButcherTableau
    dt_f: float
    C: np.ndarray = field(init=False)
    C_inv: np.ndarray = field(init=False)
    M1_fc: np.ndarray = field(init=False)
    M1_fc_inv: np.ndarray = field(init=False)
    M2_cf: np.ndarray = field(init=False)

    def __post_init__(self):
        tab, dtf = self.tableau, self.dt_f
        self.C = build_C(tab)
        self.C_inv = np.linalg.inv(self.C)
        self.M1_fc = stage_transfer_matrix(tab, 0.0, dtf, 2 * dtf)
        self.M1_fc_inv = stage_transfer_matrix(tab, 0.0, 2 * dtf, dtf)
        self.M2_cf = stage_transfer_matrix(tab, dtf, 2 * dtf, dtf)

    def P(self, dt: float) -> np.ndarray:
        return build_P(dt, self.tableau.stages)

    def B(self, delta: float) -> np.ndarray:
        return build_B(delta, self.tableau.stages)


def build_M(tab: ButcherTableau, dt_f: float, dt_c: float):
    """(M1_fc, M1_fc_inv, M2_cf) for a 2:1 step-size pair."""
    if not np.isclose(dt_c, 2.0 * dt_f, rtol=1e-12, atol=0.0):
        raise ValueError(f"dt_c must equal 2*dt_f, got dt_f={dt_f} dt_c={dt_c}")
    cs = CorrectionSet(tab, dt_f)
    return cs.M1_fc, cs.M1_fc_inv, cs.M2_cf


def apply_correction(M: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Pointwise matrix-vector product over the leading stage axis."""
    K = np.asarray(K)
    if M.shape[1] != K.shape[0]:
        raise ValueError(f"stage count mismatch: M is {M.shape}, K has {K.shape[0]} stages")
    return np.tensordot(M, K, axes=([1], [0]))


def rk_step(f, u, t: float, dt: float, tab: ButcherTableau):
    """One explicit step of ``u' = f(t, u)``; returns (u_next, stages)."""
    p = tab.stages
    k = []
    for i in range(p):
        ui = u
        for j in range(i):
            if tab.a[i][j] != 0.0:
                ui = ui + dt * tab.a[i][j] * k[j]
        k.append(f(t + tab.c[i] * dt, ui))
    u_next = u
    for i in range(p):
        if tab.w[i] != 0.0:
            u_next = u_next + dt * tab.w[i] * k[i]
    return u_next, k


def forcing_stages(g, t0: float, dt: float, tab: ButcherTableau) -> np.ndarray:
    """Stage vector of ``u' = g(t)`` for a step of size ``dt`` from ``t0``."""
    return np.array([g(t0 + ci * dt) for ci in tab.c])
