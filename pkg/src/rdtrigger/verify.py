"""Independent oracles and post-hoc monitors for kernels, stepping and triggering.

Nothing here reuses the code path it checks: the stepping oracle is a dense
matrix exponential, Volterra residuals are evaluated column-wise rather than by
marching, and the bound monitors recompute every right-hand side from the
recorded trace.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .kernels import KernelSet
from .pde_core import CoupledSystem, SimState, step_coupled
from .trigger_params import TriggerParams
from .triggering import SimResult, StcConstants

GAMMA_TOL = 1e-12
BOUND_RTOL = 1e-9
# "m > 0" is strict; anything at or above -tiny counts as a violation
POSITIVE_TOL = -np.finfo(float).tiny


@dataclass(frozen=True)
class OracleReport:
    name: str
    max_violation: float
    location: object
    tolerance: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.max_violation <= self.tolerance)

    def row(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{self.name:<24s} {flag}  max_violation={self.max_violation:.4e}  at {self.location}"


class MonitorNotApplicable(ValueError):
    pass


# ---------------------------------------------------------------------------
# time-stepping oracle


def _augmented(sys: CoupledSystem, U: float) -> np.ndarray:
    """[[A, b U], [0, 0]] so that the held input becomes part of the state."""
    N = 2 * sys.n
    M = np.zeros((N + 1, N + 1))
    M[:N, :N] = sys.A.toarray()
    M[:N, N] = sys.b * U
    return M


def matexp_reference(s: SimState, sys: CoupledSystem, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact flow of the semi-discrete system over dt with U held."""
    if sys.n * 2 > 2 * 401:
        raise ValueError("dense exponential oracle is limited to nx <= 400")
    z = np.concatenate([s.u, s.uhat, [1.0]])
    out = sla.expm(dt * _augmented(sys, s.U_held)) @ z
    return out[: sys.n], out[sys.n : 2 * sys.n]


def euler_error(s: SimState, sys: CoupledSystem, dt: float, T: float) -> float:
    """Euclidean error after integrating [0, T] with implicit Euler against the exponential."""
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-9 * T:
        raise ValueError("T must be a positive multiple of dt")
    ref_u, ref_uh = matexp_reference(s, sys, T)
    cur = s
    for _ in range(steps):
        cur = step_coupled(cur, sys, dt)
    return float(np.linalg.norm(np.concatenate([cur.u - ref_u, cur.uhat - ref_uh])))


# ---------------------------------------------------------------------------
# Volterra composition


def _lower_residual(A: np.ndarray, B: np.ndarray, h: float) -> np.ndarray:
    """R(x, y) = B - A - int_y^x A(x, s) B(s, y) ds on the lower triangle, column by column."""
    n = A.shape[0] - 1
    R = np.zeros_like(A)
    for j in range(n + 1):
        rows = np.arange(j, n + 1)
        seg = np.tril(A[j:, j:])  # A(x_i, s_l) for s_l in [y_j, x_i]
        col = B[j:, j]  # B(s_l, y_j)
        integral = h * (seg @ col) - 0.5 * h * (A[j:, j] * B[j, j] + np.diagonal(A)[j:] * col)
        integral[0] = 0.0
        R[rows, j] = B[j:, j] - A[j:, j] - integral
    return R


def volterra_residual(ks: KernelSet, tol: float = 1e-6) -> list[OracleReport]:
    """Max-norm residuals of the K/L and P/Q inverse-pair identities."""
    h = ks.grid.h
    x = ks.x
    out = []
    R = _lower_residual(ks.K, ks.L, h)
    i, j = np.unravel_index(np.argmax(np.abs(R)), R.shape)
    out.append(OracleReport("volterra_KL", float(np.abs(R).max()), (x[i], x[j]), tol))
    if ks.P is not None:
        if ks.plant.collocated:
            R = _lower_residual(ks.P[::-1, ::-1], ks.Q[::-1, ::-1], h)[::-1, ::-1]
        else:
            R = _lower_residual(ks.P, ks.Q, h)
        i, j = np.unravel_index(np.argmax(np.abs(R)), R.shape)
        out.append(OracleReport("volterra_PQ", float(np.abs(R).max()), (x[i], x[j]), tol))
    return out


# ---------------------------------------------------------------------------
# theorem monitors


def _worst(values: np.ndarray, t: np.ndarray):
    k = int(np.argmax(values))
    return float(values[k]), float(t[k])


def gamma_monitor(tr: SimResult) -> OracleReport:
    """Gamma^c <= 0 at every step.

    CETC is judged after the scheduler acted (its own detection is the
    pre-update crossing); PETC and STC promise Gamma^c <= 0 up to and
    including the instant before an update, so the pre-update value is used.
    """
    g = tr.gamma_c if tr.scheme == "cetc" else np.maximum(tr.gamma_c_pre, tr.gamma_c)
    v, t = _worst(g, tr.t)
    return OracleReport("gamma_c<=0", v, t, GAMMA_TOL)


def m_positive_monitor(tr: SimResult) -> OracleReport:
    v, t = _worst(-tr.m, tr.t)
    return OracleReport("m>0", v, t, POSITIVE_TOL)


def event_times(tr: SimResult) -> np.ndarray:
    return tr.t[tr.event]


def dwell_monitor(tr: SimResult, tau: float) -> OracleReport:
    """Consecutive events at least tau - dt apart (CETC, STC)."""
    te = event_times(tr)
    if te.size < 2:
        return OracleReport("dwell>=tau-dt", -math.inf, None, 0.0)
    short = (tau - tr.dt) - np.diff(te)
    k = int(np.argmax(short))
    return OracleReport("dwell>=tau-dt", float(short[k]), float(te[k + 1]), 1e-12)


def petc_grid_monitor(tr: SimResult, h: float) -> OracleReport:
    """Every event after t = 0 sits on the sampling grid, and h <= tau."""
    steps = np.flatnonzero(tr.event)
    stride = int(round(h / tr.dt))
    off = (steps % stride != 0).astype(float)
    v = float(off.max()) if off.size else 0.0
    where = float(tr.t[steps[int(np.argmax(off))]]) if v > 0 else None
    if h > tr.tau * (1 + 1e-12):
        v, where = max(v, h - tr.tau), "h > tau"
    return OracleReport("petc_on_grid", v, where, 0.0)


def zeno_monitor(tr: SimResult, period: float) -> OracleReport:
    """Event count on [0, T] at most T/period + 1."""
    T = tr.t[-1]
    count = int(tr.event.sum())
    return OracleReport("zeno_count", count - (T / period + 1), count, 0.0)


def theorem_monitors(tr: SimResult, tp: TriggerParams) -> list[OracleReport]:
    out = [gamma_monitor(tr), m_positive_monitor(tr)]
    if tr.scheme == "petc":
        out.append(petc_grid_monitor(tr, tr.h))
        out.append(zeno_monitor(tr, tr.h))
    else:
        out.append(dwell_monitor(tr, tp.tau))
        out.append(zeno_monitor(tr, tp.tau))
    return out


# ---------------------------------------------------------------------------
# lemma bounds


def _relative_excess(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """(lhs - rhs) relative to the size of either side; <= rtol means satisfied."""
    scale = np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), np.finfo(float).tiny)
    return (lhs - rhs) / scale


def _report(name, excess, t, mask=None):
    if mask is not None:
        excess, t = excess[mask], t[mask]
    if excess.size == 0:
        return OracleReport(name, -math.inf, None, BOUND_RTOL)
    v, where = _worst(excess, t)
    return OracleReport(name, v, where, BOUND_RTOL)


def lemma1_monitor(tr: SimResult, tp: TriggerParams) -> OracleReport:
    """(d')^2 <= rho1 d^2 + alpha1 |uhat|^2 + alpha2 uhat(1)^2 + alpha3 utilde_s^2.

    d' is the backward difference of the recorded d, which for implicit Euler
    is the semi-discrete derivative at the new time level. The additive slack
    2|d'| e + e^2, with e = (dt/2)|d''| estimated from the neighbouring
    difference inside the same inter-event interval, covers the quotient error.
    """
    d, dt = tr.d, tr.dt
    n = d.size
    dd = np.zeros(n)
    dd[1:] = np.diff(d) / dt
    valid = np.ones(n, dtype=bool)
    valid[0] = False
    valid[tr.event] = False  # d is reset at the step itself
    jump = np.zeros(n)
    both = valid[1:] & valid[:-1]
    jump[1:][both] = np.abs(np.diff(dd))[both]
    ahead = np.zeros(n)
    ahead[:-1] = jump[1:]
    e = 0.5 * np.maximum(jump, ahead)
    lhs = dd**2
    rhs = (tp.rho1 * d**2 + tp.alpha1 * tr.norm_uhat**2 + tp.alpha2 * tr.uhat1**2
           + tp.alpha3 * tr.utilde_sensor**2) + 2 * np.abs(dd) * e + e**2
    return _report("lemma1", _relative_excess(lhs, rhs), tr.t, valid)


def lemma2_monitor(tr: SimResult, tp: TriggerParams) -> OracleReport:
    """Gamma^c(t) <= ((a+g rho) d^2(nh) e^{a s} - g rho d^2(nh) - g a m(nh)) e^{-eta s} / a."""
    if tr.scheme != "petc":
        raise MonitorNotApplicable("lemma2 bounds PETC traces only")
    stride = int(round(tr.h / tr.dt))
    idx = np.arange(tr.t.size)
    base = (idx // stride) * stride
    s = tr.t - tr.t[base]
    a, g, gr = tp.a, tp.gamma, tp.gamma * tp.rho
    d2, m = tr.d[base] ** 2, tr.m[base]
    rhs = ((a + gr) * d2 * np.exp(a * s) - gr * d2 - g * a * m) * np.exp(-tp.eta * s) / a
    lhs = tr.gamma_c_pre.copy()
    lhs[base == idx] = tr.gamma_c[base == idx]  # at nh the sample itself is post-update
    return _report("lemma2", _relative_excess(lhs, rhs), tr.t, idx > 0)


def _stc_intervals(tr: SimResult, sc: StcConstants):
    ev = np.flatnonzero(tr.event)
    idx = np.arange(tr.t.size)
    last = ev[np.searchsorted(ev, idx, side="right") - 1]
    H = np.array([sc.H(tr.norm_uhat[j], tr.t[j]) for j in ev])
    Hj = H[np.searchsorted(ev, idx, side="right") - 1]
    return last, Hj


def lemma3_monitors(tr: SimResult, tp: TriggerParams, sc: StcConstants) -> list[OracleReport]:
    """d^2(t) <= H(t_j) e^{2 varrho s}; m(t) >= its lower envelope from t_j."""
    if tr.scheme != "stc":
        raise MonitorNotApplicable("lemma3 bounds STC traces only")
    last, Hj = _stc_intervals(tr, sc)
    s = tr.t - tr.t[last]
    # the value just before an event belongs to the previous interval
    ev = tr.event.copy()
    ev[0] = False
    prev_last = last.copy()
    e_idx = np.flatnonzero(ev)
    ev_all = np.flatnonzero(tr.event)
    pos = np.searchsorted(ev_all, e_idx) - 1
    prev_last[e_idx] = ev_all[pos]
    Hprev = Hj.copy()
    Hprev[e_idx] = Hj[prev_last[e_idx]]
    s_pre = tr.t - tr.t[prev_last]

    d_pre = tr.d.copy()
    # pre-update d at an event step from Gamma^c before the update
    d_pre[e_idx] = np.sqrt(np.maximum(tr.gamma_c_pre[e_idx] + tp.gamma * tr.m[e_idx], 0.0))
    rhs_d = Hprev * np.exp(2 * sc.varrho * s_pre)
    r1 = _report("lemma3_d", _relative_excess(d_pre**2, rhs_d), tr.t)

    c = 2 * sc.varrho + tp.eta
    m_j = tr.m[prev_last]
    env = (m_j * np.exp(-tp.eta * s_pre)
           - tp.rho * Hprev / c * np.exp(-tp.eta * s_pre) * np.expm1(c * s_pre))
    r2 = _report("lemma3_m", _relative_excess(env, tr.m), tr.t)
    return [r1, r2]


def psi0_monitor(tr: SimResult, sc: StcConstants) -> OracleReport:
    """|utilde(1, t)| <= Psi0 e^{-sigma* t}."""
    rhs = sc.Psi0 * np.exp(-sc.sigma_star * tr.t)
    return _report("psi0", _relative_excess(np.abs(tr.utilde1), rhs), tr.t)


def lemma_bound_monitor(tr: SimResult, which: str, tp: TriggerParams,
                        sc: StcConstants | None = None) -> list[OracleReport]:
    if which == "lemma1":
        return [lemma1_monitor(tr, tp)]
    if which == "lemma2":
        return [lemma2_monitor(tr, tp)]
    if which in ("lemma3", "psi0"):
        if tr.scheme != "stc" or sc is None:
            raise MonitorNotApplicable(f"{which} needs an STC trace and its constants")
        return lemma3_monitors(tr, tp, sc) if which == "lemma3" else [psi0_monitor(tr, sc)]
    raise ValueError(f"unknown monitor {which!r}")


# ---------------------------------------------------------------------------
# decay rate


def decay_fit(tr: SimResult, floor: float = 1e-250) -> tuple[float, float]:
    """Least-squares rate b of |u| + |uhat| ~ M e^{-b t} over the second half.

    Samples at or below ``floor`` are dropped (converged to numerical zero).
    Returns (b_hat, rms residual of the log fit).
    """
    t = np.asarray(tr.t)
    y = np.asarray(tr.norm_u) + np.asarray(tr.norm_uhat)
    half = t.size // 2
    t, y = t[half:], y[half:]
    keep = y > floor
    t, y = t[keep], y[keep]
    if t.size < 2:
        raise ValueError("not enough positive samples to fit a decay rate")
    A = np.vstack([t, np.ones_like(t)]).T
    coef, *_ = np.linalg.lstsq(A, np.log(y), rcond=None)
    resid = np.log(y) - A @ coef
    return float(-coef[0]), float(np.sqrt(np.mean(resid**2)))
