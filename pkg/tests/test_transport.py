from __future__ import annotations

import math

import numpy as np
import pytest

from entropic_ricci import models
from entropic_ricci.errors import BoundaryDensity, DimensionMismatch, LeftInterior, NegativeTime
from entropic_ricci.logmean import theta
from entropic_ricci.markov import dirichlet_form, generator_apply
from entropic_ricci.transport import (
    action,
    assemble_forms,
    canonical_potential,
    continuity_rhs,
    entropy,
    entropy_decay_check,
    geodesic_integrate,
    heat_flow,
    hessian_B,
    make_density,
    reduced_forms,
    rho_hat,
    solve_potential,
    w_distance,
)

from conftest import random_density, random_potential


@pytest.fixture(scope="module")
def chain():
    return models.random_reversible_chain(9, 11)


def scaled_geodesic_data(t, rng, speed=0.1, scale=0.3):
    rho = random_density(t, rng, scale)
    psi = random_potential(t, rng)
    psi *= speed / math.sqrt(action(t, rho, psi))
    return rho, psi


# ----------------------------------------------------------------------------
# edge means, action, Hessian


def test_rho_hat_examples(chain, rng):
    t = chain
    np.testing.assert_allclose(rho_hat(t, np.ones(t.n)), 1.0, rtol=1e-15)
    rho = random_density(t, rng)
    rho[0] = 0.0
    rh = rho_hat(t, rho)
    assert np.all(rh[(t.src == 0) | (t.dst == 0)] == 0.0)
    rho = random_density(t, rng)
    expect = [theta(rho[x], rho[y]) for x, y in zip(t.src, t.dst)]
    np.testing.assert_array_equal(rho_hat(t, rho), expect)
    np.testing.assert_array_equal(rho_hat(t, rho), rho_hat(t, rho)[t.reverse_edge])


def test_action_direct_sum(chain, rng):
    t = chain
    rho, psi = random_density(t, rng), random_potential(t, rng)
    Q = t.dense_rates()
    ref = 0.0
    for x in range(t.n):
        for y in range(t.n):
            if Q[x, y] > 0:
                ref += 0.5 * t.pi[x] * Q[x, y] * theta(rho[x], rho[y]) * (psi[y] - psi[x]) ** 2
    assert action(t, rho, psi) == pytest.approx(ref, rel=1e-13)
    assert action(t, rho, np.full(t.n, 3.0)) == 0.0


def test_constant_shift_invariance(chain, rng):
    t = chain
    rho, psi = random_density(t, rng), random_potential(t, rng)
    assert action(t, rho, psi + 4.0) == pytest.approx(action(t, rho, psi), rel=1e-12)
    assert hessian_B(t, rho, psi + 4.0) == pytest.approx(hessian_B(t, rho, psi), rel=1e-10)
    assert hessian_B(t, rho, np.full(t.n, 2.0)) == 0.0


def test_chain_rule_identity(chain, rng):
    t = chain
    for _ in range(50):
        rho = random_density(t, rng, 1.5)
        a = action(t, rho, np.log(rho))
        assert abs(a - dirichlet_form(t, rho, np.log(rho))) < 1e-10 * max(1.0, a)


def test_hessian_along_log_density(chain, rng):
    t = chain
    for _ in range(50):
        rho = random_density(t, rng, 1.0)
        Lr = generator_apply(t, rho)
        ref = 0.5 * t.pi @ (Lr * generator_apply(t, np.log(rho))) + 0.5 * t.pi @ (Lr**2 / rho)
        assert abs(hessian_B(t, rho, np.log(rho)) - ref) < 1e-9 * max(1.0, abs(ref))


def test_hessian_needs_interior_density(chain):
    rho = np.ones(chain.n)
    rho[2] = 0.0
    with pytest.raises(BoundaryDensity):
        hessian_B(chain, rho / (chain.pi @ rho), np.arange(chain.n, dtype=float))


def test_assembled_forms_match_direct_evaluation(chain, rng):
    t = chain
    rho = random_density(t, rng)
    forms = assemble_forms(t, rho)
    np.testing.assert_allclose(forms.A_mat, forms.A_mat.T, atol=1e-12)
    np.testing.assert_allclose(forms.B_mat, forms.B_mat.T, atol=1e-12)
    ev = np.linalg.eigvalsh(forms.A_mat)
    assert ev[0] > -1e-12 and abs(ev[0]) < 1e-12 and ev[1] > 1e-8
    for _ in range(20):
        psi = random_potential(t, rng)
        assert psi @ forms.A_mat @ psi == pytest.approx(action(t, rho, psi), rel=1e-10)
        assert psi @ forms.B_mat @ psi == pytest.approx(hessian_B(t, rho, psi), rel=1e-10, abs=1e-12)
    basis = forms.basis
    np.testing.assert_allclose(basis.T @ (t.pi[:, None] * basis), np.eye(t.n - 1), atol=1e-12)
    np.testing.assert_allclose(t.pi @ basis, 0.0, atol=1e-13)


def test_two_point_forms_are_one_dimensional(rng):
    t = models.two_point(1.0, 3.0).triple
    rho = random_density(t, rng)
    forms = assemble_forms(t, rho)
    assert forms.A_reduced.shape == (1, 1)
    psi = np.array([0.4, -1.0])
    ratio = forms.B_reduced[0, 0] / forms.A_reduced[0, 0]
    assert ratio == pytest.approx(hessian_B(t, rho, psi) / action(t, rho, psi), rel=1e-12)


def test_tree_coordinates_match_forms(chain, rng):
    t = chain
    rho = random_density(t, rng)
    B, A = reduced_forms(t, rho)
    forms = assemble_forms(t, rho)
    P = t.tree_basis.toarray()
    np.testing.assert_allclose(A, P.T @ forms.A_mat @ P, atol=1e-12)
    np.testing.assert_allclose(B, P.T @ forms.B_mat @ P, atol=1e-11)


# ----------------------------------------------------------------------------
# continuity equation and potentials


def test_continuity_rhs(chain, rng):
    t = chain
    rho, psi = random_density(t, rng), random_potential(t, rng)
    np.testing.assert_array_equal(continuity_rhs(t, rho, np.full(t.n, 1.5)), 0.0)
    out = continuity_rhs(t, rho, psi)
    assert abs(t.pi @ out) < 1e-13
    Q = t.dense_rates()
    ref = np.array([-sum(Q[x, y] * theta(rho[x], rho[y]) * (psi[y] - psi[x]) for y in range(t.n)) for x in range(t.n)])
    np.testing.assert_allclose(out, ref, atol=1e-13)
    with pytest.raises(DimensionMismatch):
        continuity_rhs(t, rho, psi[:-1])


def test_solve_potential_round_trip(chain, rng):
    t = chain
    rho = random_density(t, rng)
    np.testing.assert_allclose(solve_potential(t, rho, np.zeros(t.n)).values, 0.0, atol=1e-14)
    sigma = rng.normal(size=t.n)
    sigma -= t.pi @ sigma
    psi = solve_potential(t, rho, sigma).values
    assert abs(t.pi @ psi) < 1e-13
    np.testing.assert_allclose(-continuity_rhs(t, rho, psi), sigma, atol=1e-10)


def test_solve_potential_two_point(rng):
    p, q = 1.0, 3.0
    t = models.two_point(p, q).triple
    rho = random_density(t, rng)
    s1 = 0.7
    sigma = np.array([-s1 * t.pi[1] / t.pi[0], s1])
    psi = solve_potential(t, rho, sigma).values
    # K_rho grad psi (1) = Q(1,0) rho_hat (psi0 - psi1) = sigma(1)
    assert psi[0] - psi[1] == pytest.approx(s1 / (q * theta(rho[0], rho[1])), rel=1e-12)


def test_make_density_and_potential(chain):
    t = chain
    with pytest.raises(DimensionMismatch):
        make_density(t, np.full(t.n, 2.0))
    d = make_density(t, np.ones(t.n))
    assert d.interior
    assert abs(t.pi @ canonical_potential(t, np.arange(t.n, dtype=float)).values) < 1e-14


# ----------------------------------------------------------------------------
# geodesics


def test_zero_potential_geodesic_is_constant(chain, rng):
    rho = random_density(chain, rng)
    traj = geodesic_integrate(chain, rho, np.zeros(chain.n), steps=50)
    for s in traj:
        np.testing.assert_array_equal(s.rho, rho)


def test_geodesic_conserves_speed_and_mass(chain, rng):
    t = chain
    for _ in range(5):
        rho, psi = scaled_geodesic_data(t, rng, speed=0.2)
        traj = geodesic_integrate(t, rho, psi, steps=1000)
        speeds = np.array([action(t, s.rho, s.psi) for s in traj])
        assert np.max(np.abs(speeds / speeds[0] - 1)) < 1e-6
        masses = np.array([t.pi @ s.rho for s in traj])
        assert np.max(np.abs(masses - 1)) < 1e-12


def test_geodesic_leaving_interior_keeps_partial_trajectory():
    t = models.two_point().triple
    with pytest.raises(LeftInterior) as info:
        geodesic_integrate(t, np.array([0.05, 1.95]), np.array([5.0, -5.0]), steps=200)
    partial = info.value.partial
    assert 0 < len(partial) < 201
    assert np.all(partial[-1].rho > 0)


def test_entropy_curvature_along_geodesic(chain, rng):
    t = chain
    rho, psi = scaled_geodesic_data(t, rng, speed=0.5)
    h = 1e-3
    traj = geodesic_integrate(t, rho, psi, steps=2, t_end=h)
    back = geodesic_integrate(t, rho, -psi, steps=2, t_end=h)
    d2 = (entropy(t, traj[-1].rho) - 2 * entropy(t, rho) + entropy(t, back[-1].rho)) / h**2
    B = hessian_B(t, rho, psi)
    assert abs(d2 - B) < 1e-4 * max(1.0, abs(B))


def test_entropy_along_geodesic_model_chain(rng):
    b = models.random_transposition(3)
    t = b.triple
    for _ in range(5):
        rho, psi = scaled_geodesic_data(t, rng, speed=0.3)
        steps = 400
        traj = geodesic_integrate(t, rho, psi, steps=steps)
        H = np.array([entropy(t, s.rho) for s in traj])
        ds = 1.0 / steps
        d2 = (H[2:] - 2 * H[1:-1] + H[:-2]) / ds**2
        assert np.min(d2 - b.kappa_formula.value * action(t, rho, psi)) > -1e-4


# ----------------------------------------------------------------------------
# entropy and heat flow


def test_equilibrium(chain):
    t = chain
    one = np.ones(t.n)
    assert entropy(t, one) == 0.0
    np.testing.assert_allclose(heat_flow(t, one, 2.0), one, rtol=1e-12)


def test_heat_flow_monotone_entropy_and_mass(chain, rng):
    t = chain
    rho = random_density(t, rng, 2.0)
    times = np.linspace(0, 3, 31)
    H = [entropy(t, heat_flow(t, rho, s)) for s in times]
    assert all(a >= b for a, b in zip(H, H[1:]))
    for s in times:
        r = heat_flow(t, rho, s)
        assert abs(t.pi @ r - 1) < 1e-12 and np.all(r >= 0)


def test_heat_flow_methods_agree(chain, rng):
    rho = random_density(chain, rng)
    np.testing.assert_allclose(heat_flow(chain, rho, 0.7), heat_flow(chain, rho, 0.7, method="rk4"), rtol=1e-9)
    with pytest.raises(NegativeTime):
        heat_flow(chain, rho, -1.0)


def test_heat_flow_is_entropy_gradient_flow(chain, rng):
    t = chain
    rho = random_density(t, rng, 1.5)
    for s in (0.0, 0.3, 1.0):
        h = 1e-5
        rs = heat_flow(t, rho, s)
        dH = (entropy(t, heat_flow(t, rho, s + h)) - entropy(t, heat_flow(t, rho, max(s - h, 0.0)))) / (
            s + h - max(s - h, 0.0)
        )
        if s == 0.0:
            # one-sided: use a second-order forward stencil instead
            dH = (-3 * entropy(t, rs) + 4 * entropy(t, heat_flow(t, rho, h)) - entropy(t, heat_flow(t, rho, 2 * h))) / (2 * h)
        E = dirichlet_form(t, rs, np.log(rs))
        assert abs(dH + E) < 1e-6 * E


def test_entropy_decay_check_at_equilibrium(chain):
    _, value = entropy_decay_check(chain, np.ones(chain.n), 1.0)
    assert abs(value) < 1e-14


def test_entropy_decay_check_equals_twice_hessian(chain, rng):
    # pi[L rho L log rho] + pi[(L rho)^2 / rho] = 2 B(rho, log rho)
    t = chain
    rho = random_density(t, rng)
    _, v = entropy_decay_check(t, rho, 0.0)
    assert v == pytest.approx(2 * hessian_B(t, rho, np.log(rho)), rel=1e-10)


# ----------------------------------------------------------------------------
# transport distance


@pytest.fixture(scope="module")
def small_chain():
    return models.random_reversible_chain(5, 2)


def test_w_distance_zero_and_symmetry(small_chain, rng):
    t = small_chain
    rho0, rho1 = random_density(t, rng, 0.4), random_density(t, rng, 0.4)
    assert w_distance(t, rho0, rho0).value == 0.0
    a, b = w_distance(t, rho0, rho1), w_distance(t, rho1, rho0)
    assert abs(a.value - b.value) < 1e-6
    steps = [k for k, _ in a.history]
    vals = [v for _, v in a.history]
    assert steps == sorted(steps)
    assert all(x >= y - 1e-9 for x, y in zip(vals, vals[1:]))


def test_w_distance_triangle_inequality(small_chain, rng):
    t = small_chain
    for _ in range(3):
        r = [random_density(t, rng, 0.4) for _ in range(3)]
        d01 = w_distance(t, r[0], r[1])
        d12 = w_distance(t, r[1], r[2])
        d02 = w_distance(t, r[0], r[2])
        assert d02.value <= d01.value + d12.value + d02.gap + 1e-6


def test_w_distance_matches_short_geodesic(small_chain, rng):
    t = small_chain
    rho, psi = scaled_geodesic_data(t, rng, speed=0.1, scale=0.2)
    end = geodesic_integrate(t, rho, psi, steps=400)[-1].rho
    w = w_distance(t, rho, end)
    assert w.value == pytest.approx(0.1, rel=1e-4)
