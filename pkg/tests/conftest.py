from __future__ import annotations

import numpy as np
import pytest

from entropic_ricci import models


def random_density(t, rng, scale=1.0):
    rho = np.exp(rng.normal(scale=scale, size=t.n))
    return rho / (t.pi @ rho)


def random_potential(t, rng):
    return rng.normal(size=t.n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def shipped_bundles():
    """Every model family with a kernel, at desk scale."""
    return {
        "two_point": models.two_point(1.0, 3.0),
        "birth_death": models.birth_death(1.0, "linear", 6),
        "birth_death_general": models.birth_death([3.0, 2.5, 2.0, 1.0, 0.7, 0.0], [0.0, 0.5, 1.5, 2.0, 3.5, 4.0], 5),
        "zero_range": models.zero_range(3, 4),
        "zero_range_affine": models.zero_range(3, 3, "affine:1,0.3"),
        "bernoulli_laplace": models.bernoulli_laplace(4, 2),
        "bernoulli_laplace_inhom": models.bernoulli_laplace(5, 2, [1.0, 1.02, 1.05, 1.08, 1.1]),
        "random_transposition_3": models.random_transposition(3),
        "random_transposition_4": models.random_transposition(4),
        "hypercube_3": models.hypercube_bundle(3),
    }
