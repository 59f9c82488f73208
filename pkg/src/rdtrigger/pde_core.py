"""Finite-difference plant/observer pair with zero-order-hold boundary input.

The unknown vector stacks the plant and observer nodal values,
``z = [u_0..u_N, uhat_0..uhat_N]``. The semi-discrete system is
``z' = A z + b U`` where U is the held input. Robin and Neumann conditions
use ghost-node elimination; Dirichlet nodes are frozen at zero.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import splu

from .kernels import KernelSet, PlantParams, trapezoid_weights


@dataclass(frozen=True)
class SpatialGrid:
    nx: int

    def __post_init__(self):
        if self.nx < 8:
            raise ValueError("spatial grid needs nx >= 8")

    @property
    def dx(self) -> float:
        return 1.0 / self.nx

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nx + 1)

    @cached_property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.nx)


def l2_norm(f, g: SpatialGrid) -> float:
    f = np.asarray(f, dtype=float)
    if f.shape != (g.nx + 1,):
        raise ValueError(f"profile has {f.size} samples, grid expects {g.nx + 1}")
    return float(np.sqrt(g.weights @ (f * f)))


def resample(values: np.ndarray, nx: int) -> np.ndarray:
    """Map samples on a uniform [0, 1] grid to nx + 1 uniform nodes."""
    n = values.size - 1
    if n % nx == 0:
        return values[:: n // nx].copy()
    src = np.linspace(0.0, 1.0, n + 1)
    return CubicSpline(src, values)(np.linspace(0.0, 1.0, nx + 1))


@dataclass(frozen=True)
class SimState:
    t: float
    u: np.ndarray
    uhat: np.ndarray
    U_held: float
    m: float
    last_event_time: float
    uhat_at_event: np.ndarray


class CoupledSystem:
    """Discrete operator of the closed loop between events.

    Holds the gains resampled to the spatial grid and caches one sparse LU
    factorisation of ``I - dt A`` per step size.
    """

    def __init__(self, plant: PlantParams, ks: KernelSet, grid: SpatialGrid):
        self.plant = plant
        self.ks = ks
        self.grid = grid
        self.k = resample(ks.k, grid.nx)
        self.p1 = resample(ks.p1, grid.nx) if ks.p1 is not None else np.zeros(grid.nx + 1)
        self.p10 = ks.p10 or 0.0
        self.kw = self.k * grid.weights
        self.A, self.b = self._assemble()
        self._lu = {}

    @property
    def n(self) -> int:
        return self.grid.nx + 1

    @property
    def sensor_index(self) -> int:
        return self.grid.nx if self.plant.collocated else 0

    def _assemble(self):
        p, N, dx = self.plant, self.grid.nx, self.grid.dx
        eps, lam, q = p.eps, p.lam, p.q
        n = N + 1
        D = sp.lil_matrix((n, n))
        r = eps / dx**2
        for i in range(1, N):
            D[i, i - 1] = r
            D[i, i] = -2 * r + lam
            D[i, i + 1] = r
        if p.theta1:
            D[0, 0] = -2 * r + lam
            D[0, 1] = 2 * r
        D[N, N - 1] = 2 * r
        D[N, N] = -2 * r - 2 * eps * q / dx + lam
        D = D.tocsr()

        # output injection acts through the observer error at the sensor node
        s = self.sensor_index
        inj = sp.lil_matrix((n, 2 * n))
        col = self.p1.copy()
        if p.theta2:
            col[0] = 0.0  # Dirichlet node stays frozen
            col[N] += 2 * eps * self.p10 / dx
        else:
            col[0] -= 2 * eps * self.p10 / dx
        for i in range(n):
            if col[i] != 0.0:
                inj[i, s] = col[i]
                inj[i, n + s] = -col[i]

        A = sp.bmat([[D, None], [None, D]], format="csr") + sp.bmat(
            [[sp.csr_matrix((n, 2 * n))], [inj.tocsr()]], format="csr"
        )
        b = np.zeros(2 * n)
        b[N] = b[n + N] = 2 * eps / dx
        return A.tocsc(), b

    def factor(self, dt: float):
        lu = self._lu.get(dt)
        if lu is None:
            M = sp.identity(2 * self.n, format="csc") - dt * self.A
            lu = splu(M.tocsc())
            self._lu[dt] = lu
        return lu

    def project(self, u: np.ndarray) -> np.ndarray:
        """Enforce Dirichlet data at x = 0 on a profile."""
        u = np.array(u, dtype=float)
        if self.plant.theta2:
            u[0] = 0.0
        return u

    def control(self, uhat: np.ndarray) -> float:
        return float(self.kw @ uhat)


def step_coupled(s: SimState, sys: CoupledSystem, dt: float) -> SimState:
    """One implicit-Euler step of plant and observer, input held fixed."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = sys.n
    rhs = np.concatenate([s.u, s.uhat]) + dt * s.U_held * sys.b
    z = sys.factor(dt).solve(rhs)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite state after implicit step")
    return replace(s, t=s.t + dt, u=z[:n], uhat=z[n:])


def holding_error(s: SimState, sys: CoupledSystem) -> float:
    """d(t) = int k (uhat(t_j) - uhat(t)) dy."""
    return float(sys.kw @ (s.uhat_at_event - s.uhat))


def boundary_terms(s: SimState, sys: CoupledSystem) -> tuple[float, float, float]:
    """(||uhat||^2, uhat(1)^2, observer error squared at the sensor)."""
    w = sys.grid.weights
    i = sys.sensor_index
    return float(w @ (s.uhat * s.uhat)), float(s.uhat[-1] ** 2), float((s.u[i] - s.uhat[i]) ** 2)


def m_forcing(tp, d: float, terms) -> float:
    """Right-hand side of the dynamic-variable ODE minus the -eta m term."""
    uh2, ub2, ut2 = terms
    return -tp.rho * d * d + tp.beta1 * uh2 + tp.beta2 * ub2 + tp.beta3 * ut2


def step_m(m: float, tp, dt: float, d: float, terms) -> float:
    """Implicit Euler for m' = -eta m + forcing, forcing at the new time level."""
    return (m + dt * m_forcing(tp, d, terms)) / (1.0 + tp.eta * dt)


def apply_control(s: SimState, sys: CoupledSystem) -> SimState:
    return replace(
        s,
        U_held=sys.control(s.uhat),
        uhat_at_event=s.uhat.copy(),
        last_event_time=s.t,
    )


def initial_state(sys: CoupledSystem, u0, uhat0, m0: float) -> SimState:
    u0 = sys.project(u0)
    uhat0 = sys.project(uhat0)
    s = SimState(t=0.0, u=u0, uhat=uhat0, U_held=0.0, m=float(m0),
                 last_event_time=0.0, uhat_at_event=uhat0.copy())
    return apply_control(s, sys)
