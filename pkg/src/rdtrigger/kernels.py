"""Backstepping kernels and gains for the reaction-diffusion plant and its observer.

All kernels are Goursat problems of the form

    G_xx - G_yy = s * G          on 0 <= y <= x <= 1
    G(x, x)     = slope * x
    + one condition on y = 0    (Dirichlet, Neumann or Robin)

The control kernel K and both observer kernels P are instances of this
problem after a change of variables; the inverse kernels L and Q are
obtained by inverting the Volterra operator on the same grid.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_trapezoid


class KernelError(ValueError):
    """Raised when a kernel problem is ill-posed or fails to converge."""


class AssumptionViolation(KernelError):
    """Plant parameters violate the Robin margin condition on q."""


@dataclass(frozen=True)
class PlantParams:
    eps: float
    lam: float
    q: float
    theta1: int = 0
    theta2: int = 1

    def __post_init__(self):
        if self.theta1 not in (0, 1) or self.theta2 not in (0, 1) or self.theta1 + self.theta2 != 1:
            raise KernelError(f"exactly one of theta1/theta2 must be 1, got {self.theta1}, {self.theta2}")
        if self.eps <= 0 or self.q <= 0 or self.lam < 0:
            raise KernelError("eps, q must be positive and lam non-negative")

    @property
    def collocated(self) -> bool:
        return self.theta2 == 1

    @property
    def qbar(self) -> float:
        """Robin coefficient of the control target system, q - lam/(2 eps)."""
        return self.q - self.lam / (2 * self.eps)

    @property
    def margin(self) -> float:
        return self.q - self.lam / (2 * self.eps) - self.theta1 / 2

    def check(self) -> None:
        if self.margin <= 0:
            raise AssumptionViolation(
                f"q={self.q} must exceed lam/(2 eps) + theta1/2 = {self.q - self.margin:g}"
            )


@dataclass(frozen=True)
class TriangularGrid:
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise KernelError("triangular grid needs n >= 2")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n + 1)

    def lower_mask(self) -> np.ndarray:
        i = np.arange(self.n + 1)
        return i[None, :] <= i[:, None]


@dataclass(frozen=True)
class KernelSet:
    """Discretised kernels and gains on an (n+1) x (n+1) node grid.

    ``K``, ``L`` live on the lower triangle ``j <= i``. ``P``, ``Q`` live on
    the lower triangle when theta1 = 1 and on the upper triangle ``j >= i``
    when theta2 = 1. Entries outside the support are zero.
    """

    plant: PlantParams
    grid: TriangularGrid
    K: np.ndarray
    L: np.ndarray
    k: np.ndarray
    dk: np.ndarray
    d2k: np.ndarray
    P: np.ndarray | None = None
    Q: np.ndarray | None = None
    p1: np.ndarray | None = None
    p10: float | None = None
    norms: dict = field(default_factory=dict)

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    @property
    def k0(self) -> float:
        return float(self.k[0])

    @property
    def k1(self) -> float:
        return float(self.k[-1])

    @property
    def dk1(self) -> float:
        return float(self.dk[-1])

    def observer_mask(self) -> np.ndarray:
        m = self.grid.lower_mask()
        return m.T if self.plant.collocated else m


# ---------------------------------------------------------------------------
# quadrature helpers (composite trapezoid everywhere)


def trapezoid_weights(n: int) -> np.ndarray:
    w = np.full(n + 1, 1.0 / n)
    w[0] = w[-1] = 0.5 / n
    return w


def _row_integrals(F: np.ndarray, h: float) -> np.ndarray:
    """Row-wise trapezoid of F[i, 0..i] (lower triangle), length n+1."""
    n = F.shape[0] - 1
    mask = np.tri(n + 1, dtype=bool)
    Fm = np.where(mask, F, 0.0)
    full = Fm.sum(axis=1) * h
    diag = np.diagonal(F)
    return full - 0.5 * h * (Fm[:, 0] + diag)


def lower_triangle_integral(F: np.ndarray, h: float) -> float:
    """Trapezoid approximation of int_0^1 int_0^x F(x, y) dy dx."""
    inner = _row_integrals(F, h)
    return float(trapezoid_weights(F.shape[0] - 1) @ inner)


def upper_triangle_integral(F: np.ndarray, h: float) -> float:
    """Trapezoid approximation of int_0^1 int_x^1 F(x, y) dy dx."""
    return lower_triangle_integral(F[::-1, ::-1], h)


def second_derivative(f: np.ndarray, h: float) -> np.ndarray:
    """Second-order central second derivative with one-sided endpoint stencils."""
    d2 = np.empty_like(f)
    d2[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / h**2
    d2[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h**2
    d2[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / h**2
    return d2


# ---------------------------------------------------------------------------
# Goursat solver


@dataclass
class GoursatSolution:
    G: np.ndarray  # G[i, j] = G(x_i, y_j), lower triangle
    Gx_edge: np.ndarray  # G_x(1, y_j)
    iterations: int


def solve_goursat(
    n: int,
    s: float,
    slope: float,
    bc: str = "dirichlet",
    q: float = 0.0,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> GoursatSolution:
    """Successive approximation of the Goursat kernel problem.

    In characteristic variables xi = x + y, eta = x - y the problem becomes
    the integral equation

        G(xi, eta) = phi(eta) + slope/2 (xi - eta)
                     + int_eta^xi int_0^eta s/4 G(tau, r) dr dtau

    where phi(eta) = G(eta, 0) is the trace on y = 0: zero for Dirichlet, and
    for the Robin condition G_y(x, 0) = q G(x, 0) it solves
    phi' + q phi = slope + 2 int_0^x s/4 G(x, r) dr, phi(0) = 0
    (Neumann is q = 0).
    """
    if bc not in ("dirichlet", "neumann", "robin"):
        raise KernelError(f"unknown boundary condition {bc!r}")
    if bc == "neumann":
        q = 0.0
    h = 1.0 / n
    a = np.arange(2 * n + 1)[:, None]
    b = np.arange(n + 1)[None, :]
    dom = (b <= a) & (a + b <= 2 * n)
    xi, eta = a * h, b * h
    base = np.where(dom, 0.5 * slope * (xi - eta), 0.0)
    diag_idx = np.arange(n + 1)
    decay = np.exp(-q * h)

    def sweep(G):
        F = 0.25 * s * G
        S = cumulative_trapezoid(F, dx=h, axis=1, initial=0.0)
        C = cumulative_trapezoid(S, dx=h, axis=0, initial=0.0)
        I = C - C[diag_idx, diag_idx][None, :]
        if bc == "dirichlet":
            phi = np.zeros(n + 1)
            rhs = None
        else:
            rhs = slope + 2.0 * S[diag_idx, diag_idx]
            phi = np.empty(n + 1)
            phi[0] = 0.0
            for m in range(n):
                phi[m + 1] = decay * phi[m] + 0.5 * h * (decay * rhs[m] + rhs[m + 1])
        return np.where(dom, phi[None, :] + base + I, 0.0), F, S, phi, rhs

    G = base.copy()
    for it in range(1, max_iter + 1):
        G_new, F, S, phi, rhs = sweep(G)
        change = np.max(np.abs(G_new - G))
        G = G_new
        if change < tol * max(1.0, np.max(np.abs(G))):
            break
    else:
        raise KernelError(
            f"successive approximation did not converge in {max_iter} iterations "
            f"(s={s:g} too large for n={n}?)"
        )
    G, F, S, phi, rhs = sweep(G)

    i = np.arange(n + 1)
    Gxy = np.zeros((n + 1, n + 1))
    ii, jj = np.tril_indices(n + 1)
    Gxy[ii, jj] = G[ii + jj, ii - jj]

    # gradient along x = 1 from the integral equation itself
    E = cumulative_trapezoid(F, dx=h, axis=0, initial=0.0)
    ae, be = n + i, n - i
    G_xi = 0.5 * slope + S[ae, be]
    dphi = np.zeros(n + 1) if bc == "dirichlet" else rhs - q * phi
    G_eta = dphi[be] - 0.5 * slope - S[be, be] + (E[ae, be] - E[be, be])
    return GoursatSolution(G=Gxy, Gx_edge=G_xi + G_eta, iterations=it)


def volterra_inverse(K: np.ndarray, h: float) -> np.ndarray:
    """Kernel L of the inverse of (I - K), K lower triangular.

    Solves L(x, y) = K(x, y) + int_y^x K(x, s) L(s, y) ds by marching in x
    with the trapezoid rule; the discrete identity holds to round-off.
    """
    n = K.shape[0] - 1
    L = np.zeros_like(K)
    for i in range(n + 1):
        L[i, i] = K[i, i]
        if i == 0:
            continue
        row = K[i, :i]  # K(x_i, s) for s < x_i
        # sum_s w_s K(i,s) L(s,j) over s in [j, i-1] with half weight at s=j
        acc = h * (row @ L[:i, :i]) - 0.5 * h * K[i, :i] * np.diagonal(L)[:i]
        L[i, :i] = (K[i, :i] + acc) / (1.0 - 0.5 * h * K[i, i])
    return L


# ---------------------------------------------------------------------------
# public operations


def solve_control_kernel(p: PlantParams, g: TriangularGrid) -> KernelSet:
    """Control kernel K, its inverse L and the nominal gain k(y).

    The gain k(y) = K_x(1, y) + qbar K(1, y) removes u_hat(1, t) from the
    nominal law.
    """
    p.check()
    n, h = g.n, g.h
    c = p.lam / p.eps
    if p.lam == 0:
        Z = np.zeros((n + 1, n + 1))
        z = np.zeros(n + 1)
        return KernelSet(p, g, K=Z, L=Z.copy(), k=z, dk=z.copy(), d2k=z.copy())
    sol = solve_goursat(n, c, -0.5 * c, "dirichlet" if p.collocated else "neumann")
    K = sol.G
    L = volterra_inverse(K, h)
    k = sol.Gx_edge + p.qbar * K[n, :]
    dk = np.gradient(k, h, edge_order=2)
    return KernelSet(p, g, K=K, L=L, k=k, dk=dk, d2k=second_derivative(k, h))


def solve_observer_kernel(p: PlantParams, g: TriangularGrid) -> dict:
    """Observer kernels P, Q and output-injection gains p1(x), p10.

    Collocated sensing: P(x, y) = G(y, x) on x <= y with G the Dirichlet
    kernel; p1(x) = -eps (P_y(x, 1) + q P(x, 1)), p10 = lam/(2 eps).
    Anti-collocated: P(x, y) = G(1 - y, 1 - x) on y <= x with G the Robin(q)
    kernel; p1(x) = eps P_y(x, 0), p10 = -lam/(2 eps).
    """
    p.check()
    n, h = g.n, g.h
    c = p.lam / p.eps
    if p.lam == 0:
        Z = np.zeros((n + 1, n + 1))
        return dict(P=Z, Q=Z.copy(), p1=np.zeros(n + 1), p10=0.0)
    if p.collocated:
        sol = solve_goursat(n, c, -0.5 * c, "dirichlet")
        P = sol.G.T.copy()
        Q = volterra_inverse(P[::-1, ::-1], h)[::-1, ::-1].copy()
        p1 = -p.eps * (sol.Gx_edge + p.q * sol.G[n, :])
        p10 = p.lam / (2 * p.eps)
    else:
        sol = solve_goursat(n, c, -0.5 * c, "robin", q=p.q)
        P = sol.G[::-1, ::-1].T.copy()
        Q = volterra_inverse(P, h)
        p1 = -p.eps * sol.Gx_edge[::-1]
        p10 = -p.lam / (2 * p.eps)
    return dict(P=P, Q=Q, p1=p1, p10=p10)


def _dx_on_support(Q: np.ndarray, h: float, collocated: bool) -> np.ndarray:
    """d/dx of Q restricted to its triangle, column by column."""
    n = Q.shape[0] - 1
    Qx = np.zeros_like(Q)
    for j in range(n + 1):
        rows = slice(0, j + 1) if collocated else slice(j, n + 1)
        col = Q[rows, j]
        if col.size >= 3:
            Qx[rows, j] = np.gradient(col, h, edge_order=2)
        elif col.size == 2:
            Qx[rows, j] = (col[1] - col[0]) / h
    return Qx


def derived_norms(ks: KernelSet) -> KernelSet:
    p, n, h = ks.plant, ks.grid.n, ks.grid.h
    if n < 2:
        raise KernelError("quadrature needs n >= 2")
    w = trapezoid_weights(n)
    norms = {}
    norms["k_norm"] = float(np.sqrt(w @ ks.k**2))
    norms["L_tilde"] = 1.0 + np.sqrt(lower_triangle_integral(ks.L**2, h))
    norms["L_check"] = float(np.sqrt(w @ ks.L[n, :] ** 2))
    if ks.p1 is not None:
        norms["p1_norm"] = float(np.sqrt(w @ ks.p1**2))
        # g(x) = p1(x) - theta1 lam/2 K(x,0) - int_0^x K(x,y) p1(y) dy
        conv = _row_integrals(ks.K * ks.p1[None, :], h)
        gx = ks.p1 - p.theta1 * p.lam / 2 * ks.K[:, 0] - conv
        norms["g"] = gx
        norms["g_norm"] = float(np.sqrt(w @ gx**2))
    if ks.Q is not None:
        integ = upper_triangle_integral if p.collocated else lower_triangle_integral
        norms["Q_diag_max"] = float(np.max(np.abs(np.diagonal(ks.Q))))
        norms["Omega1"] = 1.0 + np.sqrt(integ(ks.Q**2, h))
        Qx = _dx_on_support(ks.Q, h, p.collocated)
        norms["Omega2"] = norms["Q_diag_max"] + np.sqrt(integ(Qx**2, h))
    return replace(ks, norms=norms)


def compute_kernels(p: PlantParams, n: int = 256) -> KernelSet:
    """Control and observer kernels plus every derived norm."""
    g = TriangularGrid(n)
    ks = solve_control_kernel(p, g)
    obs = solve_observer_kernel(p, g)
    return derived_norms(replace(ks, **obs))


def write_kernels_csv(ks: KernelSet, path) -> None:
    """Two row-major tables: (x, y, K, L) on the lower triangle, then (x, y, P, Q)."""
    x = ks.x
    n = ks.grid.n
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y", "K", "L"])
        for i in range(n + 1):
            for j in range(i + 1):
                wr.writerow([repr(x[i]), repr(x[j]), repr(ks.K[i, j]), repr(ks.L[i, j])])
        if ks.P is not None:
            wr.writerow([])
            wr.writerow(["x", "y", "P", "Q"])
            mask = ks.observer_mask()
            for i in range(n + 1):
                for j in range(n + 1):
                    if mask[i, j]:
                        wr.writerow([repr(x[i]), repr(x[j]), repr(ks.P[i, j]), repr(ks.Q[i, j])])
