"""Riemannian calculus on densities over a reversible Markov triple.

Conventions: ``rho`` is a density with respect to ``pi`` (``pi[rho] = 1``),
``psi`` a potential, and edge quantities are arrays indexed like
``t.src``/``t.dst``.  Pairings on edges carry the factor 1/2 that compensates
for each unordered edge appearing twice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize
import scipy.sparse as sp
from scipy.sparse import linalg as spla
from scipy.special import xlogy

from .errors import (
    BlowUp,
    BoundaryDensity,
    DimensionMismatch,
    LeftInterior,
    NegativeTime,
    NonConvergence,
    SingularSystem,
)
from .logmean import theta, theta_grad, theta_hessian
from .markov import MarkovTriple

INTERIOR_FLOOR = 1e-12


@dataclass(frozen=True)
class Density:
    values: np.ndarray

    @property
    def interior(self) -> bool:
        return bool(np.all(self.values > 0))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class Potential:
    values: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def make_density(t: MarkovTriple, values, tol: float = 1e-12) -> Density:
    rho = t.check_vector(values, "rho")
    if np.any(rho < 0):
        raise BoundaryDensity("densities are nonnegative")
    if abs(float(t.pi @ rho) - 1.0) > tol:
        raise DimensionMismatch(f"density has pi-mean {float(t.pi @ rho)!r}, expected 1")
    return Density(rho.copy())


def normalize_density(t: MarkovTriple, values) -> np.ndarray:
    rho = t.check_vector(values, "rho")
    return rho / float(t.pi @ rho)


def canonical_potential(t: MarkovTriple, psi) -> Potential:
    psi = t.check_vector(psi, "psi")
    return Potential(psi - float(t.pi @ psi))


def _interior(t: MarkovTriple, rho) -> np.ndarray:
    rho = t.check_vector(rho, "rho")
    if np.any(rho < INTERIOR_FLOOR):
        raise BoundaryDensity(f"density entry {rho.min():.3e} below the interior floor {INTERIOR_FLOOR}")
    return rho


# ----------------------------------------------------------------------------
# edge means, action, Hessian


def rho_hat(t: MarkovTriple, rho) -> np.ndarray:
    rho = t.check_vector(rho, "rho")
    return theta(rho[t.src], rho[t.dst])


def action(t: MarkovTriple, rho, psi) -> float:
    """``A(rho, psi) = || grad psi ||_rho^2``."""
    rho = t.check_vector(rho, "rho")
    psi = t.check_vector(psi, "psi")
    g = t.grad(psi)
    return 0.5 * float(np.sum(t.edge_weight * rho_hat(t, rho) * g * g))


def lhat_rho(t: MarkovTriple, rho: np.ndarray) -> np.ndarray:
    """Edge field ``theta1 * L rho(x) + theta2 * L rho(y)``."""
    Lrho = t.generator @ rho
    th1, th2 = theta_grad(rho[t.src], rho[t.dst])
    return th1 * Lrho[t.src] + th2 * Lrho[t.dst]


def hessian_B(t: MarkovTriple, rho, psi) -> float:
    """Entropy Hessian ``<Hess H(rho) grad psi, grad psi>_rho``."""
    rho = _interior(t, rho)
    psi = t.check_vector(psi, "psi")
    return hessian_from_grad(t, rho, t.grad(psi))


def hessian_from_grad(t: MarkovTriple, rho: np.ndarray, g: np.ndarray) -> float:
    """``B(rho, psi)`` from the edge gradient ``g = grad psi``."""
    w = t.edge_weight
    gL = t.grad(np.bincount(t.src, t.rate * g, t.n))  # grad of L psi
    first = 0.25 * np.sum(w * lhat_rho(t, rho) * g * g)
    second = 0.5 * np.sum(w * rho_hat(t, rho) * g * gL)
    return float(first - second)


def action_from_grad(t: MarkovTriple, rho: np.ndarray, g: np.ndarray) -> float:
    return 0.5 * float(np.sum(t.edge_weight * theta(rho[t.src], rho[t.dst]) * g * g))


@dataclass(frozen=True)
class QuadraticFormPair:
    """Matrices of ``A(rho, .)`` and ``B(rho, .)``, plus their restriction to
    the pi-mean-zero subspace in a pi-orthonormal basis."""

    rho: np.ndarray
    A_mat: np.ndarray
    B_mat: np.ndarray
    basis: np.ndarray = field(repr=False)

    @property
    def A_reduced(self) -> np.ndarray:
        return self.basis.T @ self.A_mat @ self.basis

    @property
    def B_reduced(self) -> np.ndarray:
        return self.basis.T @ self.B_mat @ self.basis


def _edge_quadratic(t: MarkovTriple, coeff: np.ndarray) -> np.ndarray:
    """Matrix of ``psi -> sum_e coeff[e] * (grad psi)[e]**2``."""
    n = t.n
    M = np.zeros((n, n))
    np.add.at(M, (t.src, t.src), coeff)
    np.add.at(M, (t.dst, t.dst), coeff)
    np.add.at(M, (t.src, t.dst), -coeff)
    np.add.at(M, (t.dst, t.src), -coeff)
    return M


def action_matrix(t: MarkovTriple, rho: np.ndarray) -> np.ndarray:
    return _edge_quadratic(t, 0.5 * t.edge_weight * rho_hat(t, rho))


def assemble_forms(t: MarkovTriple, rho) -> QuadraticFormPair:
    rho = _interior(t, rho)
    A = action_matrix(t, rho)
    L = t.dense_generator
    AL = A @ L
    B = _edge_quadratic(t, 0.25 * t.edge_weight * lhat_rho(t, rho)) - 0.5 * (AL + AL.T)
    return QuadraticFormPair(rho=rho.copy(), A_mat=A, B_mat=0.5 * (B + B.T), basis=t.mean_zero_basis)


def action_grad_rho(t: MarkovTriple, rho: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Gradient of ``rho -> A(rho, psi)``."""
    return action_grad_from_grad(t, rho, t.grad(psi))


def action_grad_from_grad(t: MarkovTriple, rho: np.ndarray, g: np.ndarray) -> np.ndarray:
    th1, th2 = theta_grad(rho[t.src], rho[t.dst])
    a = 0.5 * t.edge_weight * g * g
    return np.bincount(t.src, a * th1, t.n) + np.bincount(t.dst, a * th2, t.n)


def hessian_grad_rho(t: MarkovTriple, rho: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Gradient of ``rho -> B(rho, psi)``."""
    return hessian_grad_from_grad(t, rho, t.grad(psi))


def hessian_grad_from_grad(t: MarkovTriple, rho: np.ndarray, g: np.ndarray) -> np.ndarray:
    n, s, d = t.n, t.src, t.dst
    w = t.edge_weight
    gL = t.grad(np.bincount(s, t.rate * g, n))
    Lrho = t.generator @ rho
    th1, th2 = theta_grad(rho[s], rho[d])
    t11, t12, t22 = theta_hessian(rho[s], rho[d])
    a = 0.25 * w * g * g
    out = np.bincount(s, a * (t11 * Lrho[s] + t12 * Lrho[d]), n)
    out += np.bincount(d, a * (t12 * Lrho[s] + t22 * Lrho[d]), n)
    y = np.bincount(s, a * th1, n) + np.bincount(d, a * th2, n)
    out += t.generator.T @ y
    b = -0.5 * w * g * gL
    out += np.bincount(s, b * th1, n) + np.bincount(d, b * th2, n)
    return out


_DENSE_FACTOR_LIMIT = 4_000_000


def _tree_factors(t: MarkovTriple):
    """``G = D P`` and the edge gradients of ``L P``; dense when small."""
    cached = t.__dict__.get("_tree_factors")
    if cached is None:
        G = t.tree_incidence
        S = sp.csr_matrix((t.rate, (t.src, np.arange(t.n_edges))), shape=(t.n, t.n_edges))
        DSG = (t.incidence @ (S @ G)).tocsr()
        if G.shape[0] * G.shape[1] <= _DENSE_FACTOR_LIMIT:
            G, DSG = G.toarray(), DSG.toarray()
        cached = t.__dict__["_tree_factors"] = (G, DSG)
    return cached


def _weighted_gram(X, w, Y):
    """``X^T diag(w) Y`` as a dense array, for dense or sparse factors."""
    if sp.issparse(X):
        return (X.T @ sp.diags(w) @ Y).toarray()
    return X.T @ (w[:, None] * Y)


def reduced_action(t: MarkovTriple, rho: np.ndarray) -> np.ndarray:
    """Matrix of ``A(rho, .)`` in tree increments."""
    G, _ = _tree_factors(t)
    A = _weighted_gram(G, 0.5 * t.edge_weight * rho_hat(t, rho), G)
    return 0.5 * (A + A.T)


def reduced_forms(t: MarkovTriple, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Matrices of ``B(rho, .)`` and ``A(rho, .)`` in tree increments.

    Assembled from edge quantities only, so no entry involves cancellation
    between large potential values.
    """
    G, DSG = _tree_factors(t)
    w = t.edge_weight
    wa = 0.5 * w * rho_hat(t, rho)
    A = _weighted_gram(G, wa, G)
    AL = _weighted_gram(G, wa, DSG)
    B = _weighted_gram(G, 0.25 * w * lhat_rho(t, rho), G) - 0.5 * (AL + AL.T)
    return 0.5 * (B + B.T), 0.5 * (A + A.T)


# ----------------------------------------------------------------------------
# tangent vectors and potentials


def continuity_rhs(t: MarkovTriple, rho, psi) -> np.ndarray:
    """``d rho / dt = -K_rho grad psi`` for the continuity equation."""
    rho = t.check_vector(rho, "rho")
    psi = t.check_vector(psi, "psi")
    flux = t.rate * rho_hat(t, rho) * t.grad(psi)
    return -np.bincount(t.src, flux, t.n)


def solve_potential(t: MarkovTriple, rho, sigma, tol: float = 1e-8) -> Potential:
    """Find the pi-mean-zero ``psi`` with ``K_rho grad psi = sigma``.

    Multiplying by ``pi`` turns this into a graph-Laplacian system with
    symmetric edge weights ``rho_hat * Q * pi``.
    """
    rho = _interior(t, rho)
    sigma = t.check_vector(sigma, "sigma")
    if abs(float(t.pi @ sigma)) > tol:
        raise DimensionMismatch(f"tangent vector has pi-mean {float(t.pi @ sigma):.3e}")
    lap = _edge_quadratic(t, 0.5 * t.edge_weight * rho_hat(t, rho))  # = Laplacian of the weights
    M = lap + np.outer(t.pi, t.pi)
    rhs = -t.pi * sigma
    try:
        psi = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        raise SingularSystem("potential system is singular") from None
    K = -continuity_rhs(t, rho, psi)
    resid = float(np.max(np.abs(K - sigma)))
    if not np.isfinite(resid) or resid > tol * max(1.0, float(np.max(np.abs(sigma)))):
        raise SingularSystem(f"potential solve residual {resid:.3e}")
    return Potential(psi - float(t.pi @ psi))


# ----------------------------------------------------------------------------
# geodesics


@dataclass(frozen=True)
class GeodesicState:
    rho: np.ndarray
    psi: np.ndarray
    time: float


def geodesic_rhs(t: MarkovTriple, rho: np.ndarray, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = t.grad(psi)
    s, d = t.src, t.dst
    th1, _ = theta_grad(rho[s], rho[d])
    drho = -np.bincount(s, t.rate * theta(rho[s], rho[d]) * g, t.n)
    dpsi = -0.5 * np.bincount(s, t.rate * g * g * th1, t.n)
    return drho, dpsi


def rk4_step(f: Callable, y, h: float):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def geodesic_integrate(
    t: MarkovTriple, rho0, psi0, steps: int = 1000, t_end: float = 1.0
) -> list[GeodesicState]:
    """RK4 integration of the geodesic equations from ``(rho0, psi0)``.

    Raises ``LeftInterior`` (carrying the partial trajectory) when a density
    entry drops below the interior floor, ``BlowUp`` on non-finite values.
    """
    rho0 = _interior(t, rho0)
    psi0 = t.check_vector(psi0, "psi")
    n = t.n
    h = t_end / steps

    def f(y):
        rho, psi = y[:n], y[n:]
        if np.any(rho < INTERIOR_FLOOR):
            raise _Exit
        drho, dpsi = geodesic_rhs(t, rho, psi)
        return np.concatenate([drho, dpsi])

    y = np.concatenate([rho0, psi0])
    traj = [GeodesicState(rho0.copy(), psi0.copy(), 0.0)]
    for k in range(1, steps + 1):
        try:
            y = rk4_step(f, y, h)
        except _Exit:
            raise LeftInterior(f"geodesic left the interior before s={k * h:.6g}", partial=traj) from None
        if not np.all(np.isfinite(y)):
            raise BlowUp(f"non-finite values at s={k * h:.6g}", partial=traj)
        if np.any(y[:n] < INTERIOR_FLOOR):
            raise LeftInterior(f"geodesic left the interior at s={k * h:.6g}", partial=traj)
        traj.append(GeodesicState(y[:n].copy(), y[n:].copy(), k * h))
    return traj


class _Exit(Exception):
    pass


# ----------------------------------------------------------------------------
# entropy and heat flow


def entropy(t: MarkovTriple, rho) -> float:
    rho = t.check_vector(rho, "rho")
    return float(t.pi @ xlogy(rho, rho))


def heat_flow(t: MarkovTriple, rho0, time: float, method: str = "expm") -> np.ndarray:
    """``exp(time * L) rho0``."""
    if time < 0:
        raise NegativeTime("heat flow runs forward in time only")
    rho0 = t.check_vector(rho0, "rho")
    if time == 0:
        return rho0.copy()
    if method == "expm":
        out = spla.expm_multiply(time * t.generator.tocsc(), rho0)
        return np.maximum(out, 0.0)
    if method == "rk4":
        rate = float(np.max(np.abs(t.generator.diagonal()))) or 1.0
        steps = max(100, int(math.ceil(20 * rate * time)))
        y = rho0.copy()
        G = t.generator
        for _ in range(steps):
            y = rk4_step(lambda v: G @ v, y, time / steps)
        return y
    raise ValueError(f"unknown heat flow method {method!r}")


def entropy_decay_check(t: MarkovTriple, rho, alpha: float) -> tuple[bool, float]:
    """Sign and value of ``pi[L rho L log rho] + pi[(L rho)^2 / rho] - alpha E(rho, log rho)``."""
    rho = _interior(t, rho)
    Lrho = t.generator @ rho
    logr = np.log(rho)
    lhs = float(t.pi @ (Lrho * (t.generator @ logr))) + float(t.pi @ (Lrho**2 / rho))
    dissip = 0.5 * float(np.sum(t.edge_weight * t.grad(rho) * t.grad(logr)))
    value = lhs - alpha * dissip
    return value >= 0.0, value


# ----------------------------------------------------------------------------
# transport distance


@dataclass(frozen=True)
class WDistanceResult:
    value: float
    gap: float
    steps: int
    history: tuple[tuple[int, float], ...]

    def __float__(self) -> float:
        return self.value


class _PathProblem:
    """Discrete action over piecewise-linear density paths.

    Interior nodes are parametrised by ``rho_k = exp(v_k) / pi[exp(v_k)]``.
    On each interval the flux is optimised out exactly: with conductances
    ``g_e`` (the harmonic mean of ``pi Q theta`` at the two ends) the minimal
    trapezoidal cost is ``tau * b^T L_g^+ b`` for ``b = pi * drho / tau``.
    """

    def __init__(self, t: MarkovTriple, rho0: np.ndarray, rho1: np.ndarray, K: int):
        self.t, self.K = t, K
        self.rho0, self.rho1 = rho0, rho1
        und = t.src < t.dst
        self.s, self.d = t.src[und], t.dst[und]
        self.w = t.edge_weight[und]
        self.pi = t.pi
        self.ones = np.ones((t.n, t.n)) / t.n

    def densities(self, v: np.ndarray) -> np.ndarray:
        n, K = self.t.n, self.K
        V = v.reshape(K - 1, n)
        E = np.exp(V - V.max(axis=1, keepdims=True))
        mid = E / (E @ self.pi)[:, None]
        return np.vstack([self.rho0, mid, self.rho1])

    def value_and_grad(self, v: np.ndarray):
        n, K = self.t.n, self.K
        tau = 1.0 / K
        R = self.densities(v)
        s, d, w = self.s, self.d, self.w
        th = theta(R[:, s], R[:, d])  # (K+1, E)
        th1, th2 = theta_grad(R[:, s], R[:, d])
        a, b = th[:-1], th[1:]
        den = a + b
        cond = 2.0 * w * a * b / den
        Lap = np.zeros((K, n, n))
        kk = np.arange(K)[:, None]
        np.add.at(Lap, (kk, s, s), cond)
        np.add.at(Lap, (kk, d, d), cond)
        np.add.at(Lap, (kk, s, d), -cond)
        np.add.at(Lap, (kk, d, s), -cond)
        rhs = self.pi * (R[1:] - R[:-1]) / tau
        phi = np.linalg.solve(Lap + self.ones, rhs[..., None])[..., 0]
        F = tau * float(np.sum(rhs * phi))
        # dF/dcond = -tau (phi_s - phi_d)^2
        dcond = -tau * (phi[:, s] - phi[:, d]) ** 2
        dth = np.zeros_like(th)
        dth[:-1] += dcond * 2.0 * w * b**2 / den**2
        dth[1:] += dcond * 2.0 * w * a**2 / den**2
        dR = np.zeros_like(R)
        kk1 = np.arange(K + 1)[:, None]
        np.add.at(dR, (kk1, s), dth * th1)
        np.add.at(dR, (kk1, d), dth * th2)
        dR[1:] += 2.0 * self.pi * phi
        dR[:-1] -= 2.0 * self.pi * phi
        mid, gmid = R[1:-1], dR[1:-1]
        gv = mid * gmid - (mid * self.pi) * np.sum(gmid * mid, axis=1, keepdims=True)
        return F, gv.ravel()

    def solve(self, v0: np.ndarray) -> tuple[float, np.ndarray]:
        res = optimize.minimize(
            self.value_and_grad,
            v0,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": 20000, "ftol": 1e-15, "gtol": 1e-11, "maxcor": 30},
        )
        return float(res.fun), res.x

    def refine(self, v: np.ndarray) -> np.ndarray:
        # midpoint refinement keeps the same path, so the refined cost can only drop
        R = self.densities(v)
        fine = np.empty((2 * self.K + 1, self.t.n))
        fine[0::2] = R
        fine[1::2] = 0.5 * (R[:-1] + R[1:])
        return np.log(fine[1:-1]).ravel()


def w_distance(
    t: MarkovTriple,
    rho0,
    rho1,
    time_steps: int = 4,
    tol: float = 1e-5,
    max_steps: int = 1024,
    strict: bool = True,
) -> WDistanceResult:
    """Upper estimate of the transport distance by time-discretised action
    minimisation, doubling ``time_steps`` until successive estimates differ
    by less than ``tol``.

    Endpoints must be interior: the trapezoidal cost is infinite through
    edges whose log-mean vanishes at an endpoint.
    """
    rho0 = _interior(t, rho0)
    rho1 = _interior(t, rho1)
    if np.array_equal(rho0, rho1):
        return WDistanceResult(0.0, 0.0, time_steps, ((time_steps, 0.0),))
    K = max(2, int(time_steps))
    prob = _PathProblem(t, rho0, rho1, K)
    lin = [(1 - k / K) * rho0 + (k / K) * rho1 for k in range(1, K)]
    v = np.log(np.array(lin)).ravel()
    F, v = prob.solve(v)
    history = [(K, math.sqrt(max(F, 0.0)))]
    gap = math.inf
    while K < max_steps:
        v = prob.refine(v)
        K *= 2
        prob = _PathProblem(t, rho0, rho1, K)
        F, v = prob.solve(v)
        history.append((K, math.sqrt(max(F, 0.0))))
        gap = history[-2][1] - history[-1][1]
        if gap < tol:
            break
    if gap >= tol and strict:
        raise NonConvergence(f"refinement gap {gap:.3e} above {tol:.1e} after {K} steps")
    return WDistanceResult(history[-1][1], gap, K, tuple(history))
