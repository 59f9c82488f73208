"""Continuous, periodic and self-triggered event schedulers and the closed loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelSet, PlantParams
from .pde_core import (
    CoupledSystem,
    SpatialGrid,
    apply_control,
    boundary_terms,
    holding_error,
    initial_state,
    l2_norm,
    step_coupled,
    step_m,
)
from .trigger_params import TriggerParams

SCHEMES = ("cetc", "petc", "stc")
M_FLOOR = 1e-30


class SchemeError(ValueError):
    pass


@dataclass
class EventLog:
    times: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    H: list = field(default_factory=list)  # STC only
    waits: list = field(default_factory=list)  # STC only

    def record(self, step: int, t: float, U: float):
        self.steps.append(step)
        self.times.append(t)
        self.inputs.append(U)

    @property
    def dwell(self) -> np.ndarray:
        return np.diff(np.asarray(self.times, dtype=float))

    def __len__(self):
        return len(self.times)


@dataclass
class SimResult:
    scheme: str
    dt: float
    tau: float
    h: float | None
    t: np.ndarray
    norm_u: np.ndarray
    norm_uhat: np.ndarray
    U_held: np.ndarray
    d: np.ndarray
    m: np.ndarray
    gamma_c: np.ndarray  # after any update at the step
    gamma_c_pre: np.ndarray  # before the scheduler acts
    event: np.ndarray
    uhat1: np.ndarray
    utilde1: np.ndarray
    utilde_sensor: np.ndarray
    u_final: np.ndarray | None = None
    uhat_final: np.ndarray | None = None
    violations: list = field(default_factory=list)

    def __len__(self):
        return self.t.size


# ---------------------------------------------------------------------------
# trigger rules


def gamma_c(d: float, m: float, tp: TriggerParams) -> float:
    return d * d - tp.gamma * m


def cetc_should_fire(d: float, m: float, tp: TriggerParams) -> bool:
    return gamma_c(d, m, tp) > 0.0


def gamma_p(d: float, m: float, tp: TriggerParams, h: float) -> float:
    g, a, gr = tp.gamma, tp.a, tp.gamma * tp.rho
    return (a + gr) * math.exp(a * h) * d * d - gr * d * d - g * a * m


def petc_should_fire(d: float, m: float, tp: TriggerParams, h: float) -> bool:
    """Evaluated only on the sampling grid t = n h."""
    return gamma_p(d, m, tp, h) > 0.0


@dataclass(frozen=True)
class StcConstants:
    varrho: float
    sigma_star: float
    M1: float
    Omega1: float
    Omega2: float
    Psi0: float
    Psi0_star: float
    Psi1: float
    Psi2: float
    k_norm: float
    eps: float
    lam: float
    t_max: float = 1e3

    def H(self, norm_uhat: float, t: float) -> float:
        """Bound coefficient used by the self-trigger at an event time t."""
        kn2 = self.k_norm**2
        v2 = norm_uhat**2
        return 2 * kn2 * (2 * v2 + self.eps**2 * kn2 / (self.lam * self.varrho) * v2
                          + self.Psi0_star**2 * math.exp(-2 * self.sigma_star * t) / self.varrho)


def stc_constants(ks: KernelSet, p: PlantParams, psi1: float, psi2: float,
                  uhat0: np.ndarray, sigma_star: float | None = None,
                  t_max: float = 1e3) -> StcConstants:
    if not p.collocated:
        raise SchemeError("self-triggering is only defined for collocated sensing (theta2 = 1)")
    if p.lam <= 0:
        raise SchemeError("self-triggering constants need lam > 0")
    smax = p.eps * math.pi**2 / 4
    if sigma_star is None:
        sigma_star = smax
    if not 0 < sigma_star <= smax * (1 + 1e-12):
        raise SchemeError(f"sigma* must lie in (0, {smax:g}]")
    q, eps = p.q, p.eps
    M1 = 2 * q + 2 * eps * q**2 / (smax + 2 * eps * q - sigma_star)
    O1, O2 = ks.norms["Omega1"], ks.norms["Omega2"]
    n = uhat0.size - 1
    grid = SpatialGrid(n)
    uh_norm = l2_norm(uhat0, grid)
    uh_x_norm = l2_norm(np.gradient(uhat0, grid.dx, edge_order=2), grid)
    c = (M1 + 1) * O1 + O2
    Psi0 = (c * psi1 + psi2 + c * uh_norm + uh_x_norm) / math.sqrt(2)
    Psi0_star = Psi0 * math.sqrt(eps**2 * ks.p10**2 / p.lam + 0.5)
    varrho = p.lam + ks.norms["p1_norm"] ** 2 / 2
    return StcConstants(varrho=varrho, sigma_star=sigma_star, M1=M1, Omega1=O1, Omega2=O2,
                        Psi0=Psi0, Psi0_star=Psi0_star, Psi1=psi1, Psi2=psi2,
                        k_norm=ks.norms["k_norm"], eps=eps, lam=p.lam, t_max=t_max)


def stc_next_wait(norm_uhat: float, m: float, t_j: float, tp: TriggerParams,
                  sc: StcConstants) -> tuple[float, float]:
    """Waiting time G >= tau until the next event, and H(t_j)."""
    H = sc.H(norm_uhat, t_j)
    m = max(m, M_FLOOR)
    if H <= 0.0:
        return max(tp.tau, sc.t_max), H
    c = 2 * sc.varrho + tp.eta
    shift = tp.gamma * tp.rho * H / c
    arg = (tp.gamma * m + shift) / (H + shift)
    return max(tp.tau, math.log(arg) / c), H


# ---------------------------------------------------------------------------
# closed loop


def default_h(tau: float, dt: float) -> float:
    steps = math.floor(tau / dt * (1 + 1e-12))
    if steps < 1:
        raise SchemeError(f"tau={tau:g} is below dt={dt:g}; no admissible sampling period")
    return steps * dt


def run_scheme(scheme: str, sys: CoupledSystem, tp: TriggerParams, u0, uhat0,
               dt: float, horizon: float, h: float | None = None,
               stc: StcConstants | None = None) -> tuple[SimResult, EventLog]:
    """Simulate the closed loop on [0, horizon] with step dt."""
    if scheme not in SCHEMES:
        raise SchemeError(f"unknown scheme {scheme!r}")
    if dt <= 0 or horizon < 0:
        raise SchemeError("need dt > 0 and horizon >= 0")
    nsteps = int(round(horizon / dt))
    stride = None
    if scheme == "petc":
        h = default_h(tp.tau, dt) if h is None else h
        stride = int(round(h / dt))
        if stride < 1 or abs(stride * dt - h) > 1e-9 * h:
            raise SchemeError(f"h={h:g} is not a multiple of dt={dt:g}")
        if h > tp.tau * (1 + 1e-12):
            raise SchemeError(f"h={h:g} exceeds the minimal dwell time {tp.tau:g}")
    if scheme == "stc":
        if stc is None:
            raise SchemeError("STC needs its constants")
        if not sys.plant.collocated:
            raise SchemeError("self-triggering is only defined for collocated sensing")

    size = nsteps + 1
    out = {k: np.zeros(size) for k in ("norm_u", "norm_uhat", "U_held", "d", "m", "gamma_c",
                                       "gamma_c_pre", "uhat1", "utilde1", "utilde_sensor")}
    event = np.zeros(size, dtype=bool)
    grid = sys.grid
    log = EventLog()
    n_nodes, si = sys.n, sys.sensor_index

    # the loop below is a flattened copy of step_coupled / holding_error /
    # step_m / apply_control; dataclass churn costs more than the solve here
    s = initial_state(sys, u0, uhat0, tp.m0)
    z = np.concatenate([s.u, s.uhat])
    U, m = s.U_held, s.m
    lu = sys.factor(dt) if nsteps else None
    b_dt = dt * sys.b
    kw = sys.kw
    W = np.zeros((2, 2 * n_nodes))
    W[0, :n_nodes] = W[1, n_nodes:] = grid.weights
    g_, rho, eta = tp.gamma, tp.rho, tp.eta
    b1, b2, b3 = tp.beta1, tp.beta2, tp.beta3
    next_step = None

    def schedule(n, uh_norm, m, t):
        G, H = stc_next_wait(uh_norm, m, t, tp, stc)
        log.H.append(H)
        log.waits.append(G)
        return n + max(1, math.ceil(G / dt - 1e-9))

    def store(n, sq, d, gpre):
        out["norm_u"][n] = math.sqrt(sq[0])
        out["norm_uhat"][n] = math.sqrt(sq[1])
        out["U_held"][n] = U
        out["d"][n] = d
        out["m"][n] = m
        out["gamma_c"][n] = d * d - g_ * m
        out["gamma_c_pre"][n] = gpre
        out["uhat1"][n] = z[-1]
        out["utilde1"][n] = z[n_nodes - 1] - z[-1]
        out["utilde_sensor"][n] = z[si] - z[n_nodes + si]

    # t = 0 is always an event; initial_state already applied the input
    log.record(0, 0.0, U)
    event[0] = True
    sq = W @ (z * z)
    if scheme == "stc":
        next_step = schedule(0, math.sqrt(sq[1]), m, 0.0)
    store(0, sq, 0.0, -g_ * m)

    for n in range(1, size):
        z = lu.solve(z + U * b_dt)
        sq = W @ (z * z)
        if not (math.isfinite(sq[0]) and math.isfinite(sq[1])):
            raise FloatingPointError(f"non-finite state at t={n * dt:g}")
        d = U - float(kw @ z[n_nodes:])
        et = z[si] - z[n_nodes + si]
        m = (m + dt * (-rho * d * d + b1 * sq[1] + b2 * z[-1] ** 2 + b3 * et * et)) / (1.0 + eta * dt)
        gpre = d * d - g_ * m
        if scheme == "cetc":
            fire_now = gpre > 0.0
        elif scheme == "petc":
            fire_now = n % stride == 0 and petc_should_fire(d, m, tp, h)
        else:
            fire_now = n == next_step
        if fire_now:
            U = float(kw @ z[n_nodes:])
            d = 0.0
            log.record(n, n * dt, U)
            event[n] = True
            if scheme == "stc":
                next_step = schedule(n, math.sqrt(sq[1]), m, n * dt)
        store(n, sq, d, gpre)

    res = SimResult(scheme=scheme, dt=dt, tau=tp.tau, h=h if scheme == "petc" else None,
                    t=np.arange(size) * dt, event=event, u_final=z[:n_nodes].copy(),
                    uhat_final=z[n_nodes:].copy(), **out)
    return res, log
