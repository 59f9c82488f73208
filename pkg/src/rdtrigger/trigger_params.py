"""Event-trigger constants and the feasibility check on B, kappa1..kappa3."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .kernels import AssumptionViolation, KernelSet, PlantParams, trapezoid_weights


class InfeasibleParameters(ValueError):
    pass


# large defaults stand in for "some kappa2, kappa3 > 0" when none are given
DEFAULT_KAPPA = 1e6


@dataclass(frozen=True)
class TriggerParams:
    gamma: float
    eta: float
    sigma: float
    alpha1: float
    alpha2: float
    alpha3: float
    beta1: float
    beta2: float
    beta3: float
    rho: float
    rho1: float
    a: float
    tau: float
    B: float
    kappa1: float
    kappa2: float
    kappa3: float
    m0: float

    def as_dict(self) -> dict:
        return asdict(self)


def compute_alphas(ks: KernelSet, p: PlantParams | None = None) -> tuple[float, float, float]:
    p = p or ks.plant
    w = trapezoid_weights(ks.grid.n)
    k, k1 = ks.k, ks.k1
    integrand = p.eps * ks.d2k + p.eps * k1 * k + p.lam * k
    a1 = 4.0 * float(w @ integrand**2)
    a2 = 4.0 * (p.eps * p.q * k1 + p.eps * ks.dk1) ** 2
    p1 = ks.p1 if ks.p1 is not None else np.zeros_like(k)
    boundary_k = p.theta1 * ks.k0 + p.theta2 * k1
    a3 = 4.0 * (p.lam * boundary_k / 2 + float(w @ (k * p1))) ** 2
    return a1, a2, a3


def compute_betas(alphas, gamma: float, sigma: float) -> tuple[float, float, float]:
    if not 0 < sigma < 1:
        raise InfeasibleParameters(f"sigma must lie in (0, 1), got {sigma}")
    if gamma <= 0:
        raise InfeasibleParameters("gamma must be positive")
    scale = gamma * (1 - sigma)
    return tuple(a / scale for a in alphas)


def compute_rho(p: PlantParams, B: float, kappa1: float) -> float:
    return p.eps * kappa1 * B / 2


def compute_rho1(ks: KernelSet) -> float:
    return 4 * ks.plant.eps**2 * ks.k1**2


def compute_mdt(sigma: float, a: float, gamma: float, rho: float) -> float:
    """Minimal dwell time (1/a) ln(1 + sigma a / ((1 - sigma)(a + gamma rho)))."""
    if not 0 < sigma < 1:
        raise InfeasibleParameters(f"sigma must lie in (0, 1), got {sigma}")
    if a <= 0 or gamma * rho < 0:
        raise InfeasibleParameters("need a > 0 and gamma rho >= 0")
    return math.log1p(sigma * a / ((1 - sigma) * (a + gamma * rho))) / a


def _bracket(ks: KernelSet, p: PlantParams, kappa1, kappa2, kappa3) -> float:
    lead = p.eps * min(p.margin, 0.5)
    if lead <= 0:
        raise AssumptionViolation("q must exceed lam/(2 eps) + theta1/2")
    g2 = ks.norms.get("g_norm", 0.0) ** 2
    return (lead - p.eps / (2 * kappa1)
            - p.lam * (5 * p.theta1 + 2 * p.theta2) / (8 * kappa2)
            - g2 / kappa3)


def _beta_burden(ks: KernelSet, betas) -> float:
    b1, b2, _ = betas
    Lt, Lc = ks.norms["L_tilde"], ks.norms["L_check"]
    return 2 * b1 * Lt**2 + 2 * b2 + 4 * b2 * Lc**2


def check_assumption2(ks: KernelSet, p: PlantParams, betas, B: float, kappa1: float,
                      kappa2: float = DEFAULT_KAPPA, kappa3: float = DEFAULT_KAPPA) -> float:
    """Signed margin of the B-inequality; feasible iff the result is positive."""
    return B * _bracket(ks, p, kappa1, kappa2, kappa3) - _beta_burden(ks, betas)


def default_kappas(ks: KernelSet, p: PlantParams) -> tuple[float, float]:
    """kappa2, kappa3 so that each of their terms costs 25% of eps * min{...}."""
    budget = 0.25 * p.eps * min(p.margin, 0.5)
    if budget <= 0:
        raise AssumptionViolation("q must exceed lam/(2 eps) + theta1/2")
    k2 = p.lam * (5 * p.theta1 + 2 * p.theta2) / (8 * budget)
    g2 = ks.norms.get("g_norm", 0.0) ** 2
    k3 = g2 / budget
    # zero-cost terms: any positive kappa works
    return (k2 if k2 > 0 else 1.0), (k3 if k3 > 0 else 1.0)


def suggest_B(ks: KernelSet, p: PlantParams, betas, kappa1: float) -> tuple[float, float, float]:
    """Smallest B whose margin equals 10% of the beta burden; returns (B, kappa2, kappa3)."""
    k2, k3 = default_kappas(ks, p)
    bracket = _bracket(ks, p, kappa1, k2, k3)
    if bracket <= 0:
        raise InfeasibleParameters(
            f"kappa1={kappa1} leaves no room in the B bracket ({bracket:.3g})"
        )
    burden = _beta_burden(ks, betas)
    if burden == 0:
        return 1.0, k2, k3
    return 1.1 * burden / bracket, k2, k3


def build_trigger_params(ks: KernelSet, gamma: float, eta: float, sigma: float,
                         kappa1: float, m0: float, B: float | None = None,
                         kappa2: float | None = None, kappa3: float | None = None,
                         check: bool = True) -> TriggerParams:
    """Derive every trigger constant from the kernels and the design choices."""
    p = ks.plant
    if m0 <= 0:
        raise InfeasibleParameters("m(0) must be positive")
    if eta <= 0:
        raise InfeasibleParameters("eta must be positive")
    alphas = compute_alphas(ks, p)
    betas = compute_betas(alphas, gamma, sigma)
    if B is None:
        B, k2, k3 = suggest_B(ks, p, betas, kappa1)
        kappa2 = kappa2 or k2
        kappa3 = kappa3 or k3
    kappa2 = kappa2 or DEFAULT_KAPPA
    kappa3 = kappa3 or DEFAULT_KAPPA
    if check:
        margin = check_assumption2(ks, p, betas, B, kappa1, kappa2, kappa3)
        if margin <= 0:
            raise InfeasibleParameters(f"B-inequality violated, margin {margin:.4g}")
    rho = compute_rho(p, B, kappa1)
    rho1 = compute_rho1(ks)
    a = 1 + rho1 + eta
    tau = compute_mdt(sigma, a, gamma, rho)
    return TriggerParams(gamma=gamma, eta=eta, sigma=sigma,
                         alpha1=alphas[0], alpha2=alphas[1], alpha3=alphas[2],
                         beta1=betas[0], beta2=betas[1], beta3=betas[2],
                         rho=rho, rho1=rho1, a=a, tau=tau, B=B,
                         kappa1=kappa1, kappa2=kappa2, kappa3=kappa3, m0=m0)
