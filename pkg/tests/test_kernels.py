import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import iv, jv

from rdtrigger.kernels import (
    AssumptionViolation,
    KernelError,
    PlantParams,
    TriangularGrid,
    compute_kernels,
    lower_triangle_integral,
    solve_control_kernel,
    solve_goursat,
    solve_observer_kernel,
    volterra_inverse,
    write_kernels_csv,
)

from conftest import FAST, REF, kernels


def bessel_kernel(n, c, neumann=False, inverse=False):
    """Closed forms -c y I1(z)/z (Dirichlet), -c x I1(z)/z (Neumann), -c y J1(z)/z (inverse)."""
    x = np.linspace(0, 1, n + 1)
    X, Y = np.meshgrid(x, x, indexing="ij")
    z = np.sqrt(np.maximum(c * (X**2 - Y**2), 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        f = (jv(1, z) if inverse else iv(1, z)) / z
    f = np.where(z > 0, f, 0.5)
    out = -c * (X if neumann else Y) * f
    return np.where(Y <= X, out, 0.0)


# -- plant parameters --------------------------------------------------------


def test_theta_flags_must_be_exclusive():
    with pytest.raises(KernelError):
        PlantParams(1.0, 1.0, 2.0, theta1=1, theta2=1)
    with pytest.raises(KernelError):
        PlantParams(1.0, 1.0, 2.0, theta1=0, theta2=0)


def test_robin_margin_enforced():
    # q must exceed lam/(2 eps) + theta1/2
    with pytest.raises(AssumptionViolation):
        compute_kernels(PlantParams(1.0, 8.0, 4.0), 16)
    with pytest.raises(AssumptionViolation):
        compute_kernels(PlantParams(1.0, 8.0, 4.4, theta1=1, theta2=0), 16)


# -- control kernel ------------------------------------------------------------


def test_zero_reaction_gives_zero_kernels():
    ks = compute_kernels(PlantParams(0.3, 0.0, 1.0), 32)
    for arr in (ks.K, ks.L, ks.k, ks.P, ks.Q, ks.p1):
        assert np.all(arr == 0)
    assert ks.p10 == 0.0
    assert ks.norms["L_tilde"] == 1.0 and ks.norms["L_check"] == 0.0
    assert ks.norms["Omega1"] == 1.0 and ks.norms["Omega2"] == 0.0


@pytest.mark.parametrize("p", [REF, FAST])
def test_dirichlet_kernel_matches_bessel(p):
    c = p.lam / p.eps
    ks = kernels(p, 256)
    assert np.max(np.abs(ks.K - bessel_kernel(256, c))) < 1e-4 * max(1.0, c)


def test_neumann_kernel_matches_bessel():
    p = PlantParams(1.0, 8.0, 9.0, theta1=1, theta2=0)
    ks = solve_control_kernel(p, TriangularGrid(128))
    exact = bessel_kernel(128, 8.0, neumann=True)
    assert np.max(np.abs(ks.K - exact)) < 1e-4 * np.max(np.abs(exact))


def test_inverse_kernel_matches_bessel(ref_ks):
    err = np.max(np.abs(ref_ks.L - bessel_kernel(256, 10.0, inverse=True)))
    assert err < 1e-4


def test_grid_convergence_second_order():
    # n = 128 vs 256 vs 512 of the fast plant, compared on the shared coarse nodes
    K = {n: kernels(FAST, n).K for n in (64, 128, 256)}
    exact = bessel_kernel(64, 8.0)
    e = [np.max(np.abs(K[n][:: n // 64, :: n // 64] - exact)) for n in (64, 128, 256)]
    assert e[0] / e[1] >= 3 and e[1] / e[2] >= 3
    # Richardson-style self comparison without the closed form
    d1 = np.max(np.abs(K[64] - K[128][::2, ::2]))
    d2 = np.max(np.abs(K[128][::2, ::2] - K[256][::4, ::4]))
    assert d1 / d2 >= 3


def test_gain_removes_boundary_value(ref_ks):
    # k(y) = K_x(1, y) + qbar K(1, y) against the differentiated closed form
    c, n = 10.0, 256
    y = np.linspace(0, 1, n + 1)
    # closed-form K_x(1, y) = -c y d/dx[I1(z)/z] at x = 1
    z = np.sqrt(c * (1 - y**2))
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(z > 0, iv(2, z) / z**2, 0.125)
    Kx = -c * y * c * g  # d/dx (I1(z)/z) = (I2(z)/z) dz/dx = c x I2(z)/z^2
    K1 = -c * y * np.where(z > 0, iv(1, z) / np.where(z > 0, z, 1), 0.5)
    k_exact = Kx + REF.qbar * K1
    assert np.max(np.abs(ref_ks.k - k_exact)) < 1e-3 * np.max(np.abs(k_exact))
    assert ref_ks.k1 == pytest.approx(-13.0, rel=1e-6)


def test_goursat_rejects_unknown_bc():
    with pytest.raises(KernelError):
        solve_goursat(8, 1.0, -0.5, bc="periodic")


def test_goursat_nonconvergence_is_reported():
    with pytest.raises(KernelError):
        solve_goursat(16, 1e4, -5e3, max_iter=3)


def test_robin_kernel_satisfies_boundary_condition():
    q, c, n = 6.0, 8.0, 256
    G = solve_goursat(n, c, -c / 2, "robin", q=q).G
    h = 1 / n
    # G_y(x, 0) = q G(x, 0), second-order one-sided difference
    Gy = (-3 * G[2:, 0] + 4 * G[2:, 1] - G[2:, 2]) / (2 * h)
    assert np.max(np.abs(Gy - q * G[2:, 0])) < 5e-3


# -- inverse and observer kernels ---------------------------------------------


def test_volterra_inverse_identity_random_kernel():
    rng = np.random.default_rng(3)
    n = 40
    K = np.tril(rng.normal(size=(n + 1, n + 1)))
    L = volterra_inverse(K, 1 / n)
    # discrete operator (I - K W)^(-1) = I + L W with row-trapezoid weights
    h = 1 / n
    for i in range(2, n + 1):
        for j in range(i):
            s = np.arange(j, i + 1)
            w = np.full(s.size, h)
            w[0] = w[-1] = h / 2
            assert L[i, j] == pytest.approx(K[i, j] + np.sum(w * K[i, s] * L[s, j]), abs=1e-9)


def test_q_diagonal_peak(ref_ks):
    assert ref_ks.norms["Q_diag_max"] == pytest.approx(5.0, rel=1e-3)
    ks = kernels(FAST, 128)
    assert ks.norms["Q_diag_max"] == pytest.approx(4.0, rel=1e-3)


def test_observer_gains_reference(ref_ks):
    assert ref_ks.p10 == pytest.approx(5.0)
    assert ref_ks.norms["p1_norm"] == pytest.approx(0.035386, rel=1e-3)
    assert ref_ks.norms["Omega2"] >= ref_ks.norms["Q_diag_max"]


def test_anticollocated_observer():
    p = PlantParams(0.001, 0.01, 6.0, theta1=1, theta2=0)
    ks = compute_kernels(p, 128)
    assert ks.p10 == pytest.approx(-5.0)
    assert ks.norms["Q_diag_max"] == pytest.approx(5.0, rel=1e-3)
    # P lives on the lower triangle for this configuration
    assert np.all(ks.P[np.triu_indices(129, 1)] == 0)


def test_alpha_stability_under_refinement():
    from rdtrigger.trigger_params import compute_alphas

    a256 = np.array(compute_alphas(kernels(REF, 256)))
    a512 = np.array(compute_alphas(kernels(REF, 512)))
    assert np.all(np.abs(a256 - a512) / a512 < 0.02)


@settings(max_examples=15, deadline=None)
@given(lam=st.floats(0.1, 10.0), eps=st.floats(0.5, 2.0))
def test_kernel_diagonal_and_finite(lam, eps):
    p = PlantParams(eps, lam, lam / (2 * eps) + 1.0)
    ks = compute_kernels(p, 32)
    x = ks.x
    assert np.allclose(np.diagonal(ks.K), -lam / (2 * eps) * x, atol=1e-12)
    assert np.all(np.isfinite(ks.K)) and np.all(np.isfinite(ks.Q))
    assert ks.norms["Q_diag_max"] == pytest.approx(lam / (2 * eps), rel=1e-3)


def test_kernel_csv_layout(tmp_path, ref_ks):
    ks = kernels(REF, 8)
    out = tmp_path / "k.csv"
    write_kernels_csv(ks, out)
    blocks = out.read_text().split("\n\n")
    assert blocks[0].startswith("x,y,K,L")
    assert blocks[1].startswith("x,y,P,Q")
    assert len(blocks[0].strip().splitlines()) == 1 + 9 * 10 // 2


def test_triangle_integral_of_constant():
    assert lower_triangle_integral(np.ones((65, 65)), 1 / 64) == pytest.approx(0.5)
