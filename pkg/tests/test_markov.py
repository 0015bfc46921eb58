from __future__ import annotations

import numpy as np
import pytest

from entropic_ricci import models
from entropic_ricci.errors import (
    BadInverse,
    DimensionMismatch,
    GeneratorMismatch,
    InvalidRate,
    NotIrreducible,
    NotReversible,
    ParseError,
    ReversibilityIdentityFailed,
)
from entropic_ricci.markov import (
    build_mapping_representation,
    build_triple,
    dirichlet_form,
    generator_apply,
    spectral_gap,
    transposition_representation,
    triple_from_json,
    validation_report,
)


def naive_generator(t, f):
    Q = t.dense_rates()
    out = np.zeros(t.n)
    for x in range(t.n):
        for y in range(t.n):
            out[x] += Q[x, y] * (f[y] - f[x])
    return out


def test_two_state_stationary_measure():
    t = build_triple([0, 1], [(0, 1, 1.0), (1, 0, 3.0)])
    np.testing.assert_allclose(t.pi, [0.75, 0.25], rtol=1e-15)


def test_symmetric_rates_give_uniform_measure(rng):
    C = np.triu(rng.uniform(0.1, 2.0, (6, 6)), 1)
    C += C.T
    i, j = np.nonzero(C)
    t = build_triple(range(6), zip(i, j, C[i, j]))
    np.testing.assert_allclose(t.pi, np.full(6, 1 / 6), rtol=1e-12)


def test_directed_cycle_is_not_reversible():
    with pytest.raises(NotReversible):
        build_triple("abc", [("a", "b", 1), ("b", "c", 1), ("c", "a", 1)])


def test_kolmogorov_violation_is_not_reversible():
    # all edges present both ways, but the cycle product of rates is not balanced
    entries = [(0, 1, 1), (1, 0, 1), (1, 2, 1), (2, 1, 1), (2, 0, 2), (0, 2, 1)]
    with pytest.raises(NotReversible):
        build_triple(range(3), entries)
    rep = validation_report(range(3), entries)
    assert rep["irreducible"] and not rep["reversible"]


def test_disconnected_chain_is_not_irreducible():
    with pytest.raises(NotIrreducible):
        build_triple(range(4), [(0, 1, 1), (1, 0, 1), (2, 3, 1), (3, 2, 1)])
    assert validation_report(range(4), [(0, 1, 1), (1, 0, 1), (2, 3, 1), (3, 2, 1)])["irreducible"] is False


@pytest.mark.parametrize("entry", [(0, 0, 1.0), (0, 1, -1.0), (0, 1, float("nan"))])
def test_invalid_rate_entries(entry):
    with pytest.raises(InvalidRate):
        build_triple(range(2), [entry, (1, 0, 1.0), (0, 1, 1.0)])


def test_triple_invariants_on_random_chains():
    for seed in range(10):
        t = models.random_reversible_chain(15, seed)
        assert abs(t.pi.sum() - 1) < 1e-12
        assert np.all(t.pi > 0)
        assert t.detailed_balance_residual() < 1e-10
        assert t.stationarity_residual() < 1e-10
        rep = validation_report(t.states, zip(t.src, t.dst, t.rate))
        assert rep["reversible"] and rep["worst_detailed_balance_residual"] < 1e-10


def test_measure_with_extreme_ratios():
    b = models.birth_death(1.0, "linear", 20)
    # Poisson(1) truncated at 20
    from math import factorial

    w = np.array([1 / factorial(k) for k in range(21)])
    np.testing.assert_allclose(b.triple.pi, w / w.sum(), rtol=1e-12)


def test_chain_spec_json():
    t = triple_from_json('{"states": ["a", "b"], "rates": [["a", "b", 2], ["b", "a", 1]]}')
    np.testing.assert_allclose(t.pi, [1 / 3, 2 / 3])
    with pytest.raises(ParseError):
        triple_from_json("{not json")
    with pytest.raises(ParseError):
        triple_from_json('{"states": ["a"]}')


# ----------------------------------------------------------------------------
# generator and Dirichlet form


def test_generator_of_constant_vanishes():
    t = models.random_reversible_chain(10, 3)
    np.testing.assert_allclose(generator_apply(t, np.full(10, 2.5)), 0, atol=1e-14)


def test_generator_two_point():
    t = models.two_point().triple
    np.testing.assert_array_equal(generator_apply(t, [0.0, 1.0]), [1.0, -1.0])


def test_generator_against_double_loop(rng):
    t = models.random_reversible_chain(12, 5)
    f = rng.normal(size=12)
    Lf = generator_apply(t, f)
    np.testing.assert_allclose(Lf, naive_generator(t, f), atol=1e-13)
    assert abs(t.pi @ Lf) < 1e-12


def test_generator_dimension_check():
    t = models.two_point().triple
    with pytest.raises(DimensionMismatch):
        generator_apply(t, [1.0, 2.0, 3.0])


def test_dirichlet_form_properties(rng):
    t = models.random_reversible_chain(12, 7)
    phi, psi = rng.normal(size=12), rng.normal(size=12)
    assert abs(dirichlet_form(t, np.ones(12), psi)) < 1e-14
    assert dirichlet_form(t, phi, psi) == pytest.approx(dirichlet_form(t, psi, phi), rel=1e-13)
    assert dirichlet_form(t, psi, psi) >= 0
    ibp = -float(t.pi @ (phi * generator_apply(t, psi)))
    assert abs(dirichlet_form(t, phi, psi) - ibp) < 1e-10


def test_dirichlet_form_two_point():
    t = models.two_point(1.0, 3.0).triple
    psi = np.array([0.2, -1.3])
    assert dirichlet_form(t, psi, psi) == pytest.approx(0.75 * 1.5**2, rel=1e-14)


# ----------------------------------------------------------------------------
# spectral gap


def test_gap_two_point():
    assert spectral_gap(models.two_point(1, 1).triple) == pytest.approx(2.0, rel=1e-12)
    assert spectral_gap(models.two_point(1, 3).triple) == pytest.approx(4.0, rel=1e-12)


@pytest.mark.parametrize("m", [3, 5, 8])
def test_gap_complete_graph(m):
    t = build_triple(range(m), [(i, j, 1.0) for i in range(m) for j in range(m) if i != j])
    assert spectral_gap(t) == pytest.approx(m, rel=1e-12)


def test_gap_of_product_is_min():
    a, b = models.two_point(1, 3), models.random_reversible_chain(5, 1)
    t = models.product_chain(a, b)
    assert spectral_gap(t) == pytest.approx(min(spectral_gap(a.triple), spectral_gap(b)), rel=1e-10)


def test_gap_sparse_path_matches_dense():
    from entropic_ricci import markov

    t = models.zero_range(4, 9).triple
    dense = spectral_gap(t)
    old = markov.MAX_DENSE_STATES
    markov.MAX_DENSE_STATES = 10
    try:
        sparse = spectral_gap(t)
    finally:
        markov.MAX_DENSE_STATES = old
    assert sparse == pytest.approx(dense, rel=1e-8)


# ----------------------------------------------------------------------------
# mapping representations


def test_transposition_representation_on_random_chains(rng):
    for seed in range(5):
        t = models.random_reversible_chain(10, seed)
        rep = transposition_representation(t)
        f = rng.normal(size=t.n)
        np.testing.assert_allclose(rep.apply_generator(f), generator_apply(t, f), atol=1e-12)
        assert rep.reversibility_residual()[0] < 1e-10


def _bd_moves(cap):
    return {
        "+": lambda s: str(min(int(s) + 1, cap)),
        "-": lambda s: str(max(int(s) - 1, 0)),
    }


def test_birth_death_moves_by_action_maps():
    cap = 6
    t = models.birth_death(1.0, "linear", cap).triple
    rates = lambda s, g: (1.0 if int(s) < cap else 0.0) if g == "+" else float(s)
    rep = build_mapping_representation(t, _bd_moves(cap), rates, {"+": "-", "-": "+"})
    assert rep.moves == ("+", "-")
    np.testing.assert_array_equal(rep.inverse, [1, 0])


def test_wrong_inverse_is_rejected():
    cap = 6
    t = models.birth_death(1.0, "linear", cap).triple
    rates = lambda s, g: (1.0 if int(s) < cap else 0.0) if g == "+" else float(s)
    with pytest.raises(BadInverse):
        build_mapping_representation(t, _bd_moves(cap), rates, {"+": "+", "-": "-"})


def test_wrong_rates_are_rejected():
    cap = 4
    t = models.birth_death(1.0, "linear", cap).triple
    rates = lambda s, g: 2.0 if g == "+" and int(s) < cap else (0.0 if g == "+" else float(s))
    with pytest.raises(GeneratorMismatch):
        build_mapping_representation(t, _bd_moves(cap), rates, {"+": "-", "-": "+"})


def test_reversibility_identity_failure_reports_witness():
    # a consistent generator split across two moves whose inverses are crossed:
    # each move is undone by the other, but the rates do not balance per move
    t = build_triple(range(2), [(0, 1, 2.0), (1, 0, 2.0)])
    target = np.array([[1, 1], [0, 0]])
    c = np.array([[1.5, 0.5], [1.5, 0.5]])
    with pytest.raises(ReversibilityIdentityFailed) as info:
        build_mapping_representation(t, ["a", "b"], c, [1, 0], targets=target)
    assert info.value.residual == pytest.approx(0.5)  # pi = 1/2: 0.75 - 0.25
    assert info.value.witness is not None


def test_model_representations_reproduce_generator(shipped_bundles, rng):
    for name, b in shipped_bundles.items():
        f = rng.normal(size=b.triple.n)
        np.testing.assert_allclose(b.rep.apply_generator(f), generator_apply(b.triple, f), atol=1e-12, err_msg=name)
        assert b.rep.reversibility_residual()[0] < 1e-10, name
