"""R-kernels and the one-sided discrete Bochner inequality.

An R-kernel splits the local rate products ``c(x, g) c(x, d)`` into
``R(x, g, d) + Gamma(x, g, d)``.  When ``R`` is symmetric in the two moves,
invariant under the chain's reversibility and only supported on commuting
move pairs, the entropy Hessian dominates ``B1 + B2 + B3`` built from
``Gamma`` and ``R``; lower bounds on that sum are curvature bounds.

Array conventions: for a representation with target table ``T`` (``T[x, g]``
is ``g x``), three-index arrays are indexed ``[x, g, d]`` with ``g`` the
first and ``d`` the second move.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .errors import AsymmetricAlpha, KernelNotVerified
from .logmean import theta, theta_grad, theta_hessian
from .markov import MappingRepresentation
from .transport import _interior, action_from_grad, action_grad_from_grad, reduced_action

TOL = 1e-10


@dataclass(frozen=True, eq=False)
class RKernel:
    """Sparse nonnegative ``R`` over (state, move, move) index triples."""

    rep: MappingRepresentation
    eta: np.ndarray
    g: np.ndarray
    d: np.ndarray
    value: np.ndarray
    name: str = "custom"

    @classmethod
    def from_dense(cls, rep: MappingRepresentation, R: np.ndarray, name: str = "custom") -> "RKernel":
        R = np.asarray(R, dtype=float)
        if R.shape != (rep.base.n, rep.n_moves, rep.n_moves):
            raise ValueError(f"kernel shape {R.shape} does not match the representation")
        eta, g, d = np.nonzero(R)
        return cls(rep, eta, g, d, R[eta, g, d], name)

    @classmethod
    def from_entries(cls, rep: MappingRepresentation, entries: Iterable[tuple], name: str = "custom") -> "RKernel":
        """Entries ``(state, move, move, value)`` by identifier; repeats are summed."""
        mpos = {m: k for k, m in enumerate(rep.moves)}
        R = np.zeros((rep.base.n, rep.n_moves, rep.n_moves))
        for s, ga, gb, v in entries:
            R[rep.base.index[str(s)], mpos[str(ga)], mpos[str(gb)]] += float(v)
        return cls.from_dense(rep, R, name)

    @classmethod
    def product_kernel(cls, rep: MappingRepresentation) -> "RKernel":
        """``R = c c``, i.e. ``Gamma = 0``."""
        return cls.from_dense(rep, rep.rates[:, :, None] * rep.rates[:, None, :], name="gamma-zero")

    @cached_property
    def dense(self) -> np.ndarray:
        R = np.zeros((self.rep.base.n, self.rep.n_moves, self.rep.n_moves))
        np.add.at(R, (self.eta, self.g, self.d), self.value)
        return R

    @cached_property
    def report(self) -> "KernelReport":
        return verify_R(self)

    def dump_jsonl(self) -> str:
        """One JSON object per stored entry (debugging aid)."""
        states, moves = self.rep.base.states, self.rep.moves
        return "\n".join(
            json.dumps({"state": states[x], "move_a": moves[a], "move_b": moves[b], "value": float(v)})
            for x, a, b, v in zip(self.eta.tolist(), self.g.tolist(), self.d.tolist(), self.value.tolist())
        )


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    residual: float
    witness: tuple | None = None


@dataclass(frozen=True)
class KernelReport:
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": {
                k: {"passed": c.passed, "residual": c.residual, "witness": c.witness}
                for k, c in self.checks.items()
            },
        }


def _grouped_residual(keys_a, vals_a, keys_b, vals_b):
    """Max over keys of |sum vals_a - sum vals_b|, with the worst key."""
    keys = np.concatenate([keys_a, keys_b])
    vals = np.concatenate([vals_a, -vals_b])
    if keys.size == 0:
        return 0.0, None
    uniq, inv = np.unique(keys, return_inverse=True)
    acc = np.zeros(uniq.size)
    np.add.at(acc, inv, vals)
    k = int(np.argmax(np.abs(acc)))
    return float(abs(acc[k])), int(uniq[k])


def verify_R(k: RKernel, tol: float = TOL) -> KernelReport:
    """Check nonnegativity, (A1) symmetry, (A3) commutation, and the averaged
    invariance identities on the full indicator basis of the support."""
    rep = k.rep
    n, m = rep.base.n, rep.n_moves
    T, inv, pi = rep.target, rep.inverse, rep.base.pi
    st = rep.base.states
    eta, g, d, v = k.eta, k.g, k.d, k.value

    def wit(x, a, b):
        return (st[x], rep.moves[a], rep.moves[b])

    def unkey(key):
        x, rest = divmod(key, m * m)
        return wit(x, *divmod(rest, m))

    checks = {}
    neg = v < 0
    checks["nonnegative"] = CheckResult(
        not neg.any(),
        float(-v.min()) if neg.any() else 0.0,
        wit(eta[neg][0], g[neg][0], d[neg][0]) if neg.any() else None,
    )

    key = (eta * m + g) * m + d
    swapped = (eta * m + d) * m + g
    res, worst = _grouped_residual(key, v, swapped, v)
    checks["A1_symmetry"] = CheckResult(res == 0.0, res, unkey(worst) if res else None)

    pos = v > 0
    gd = T[T[eta, g], d]
    dg = T[T[eta, d], g]
    bad = pos & (gd != dg)
    checks["A3_commutation"] = CheckResult(
        not bad.any(), float(bad.sum()), wit(eta[bad][0], g[bad][0], d[bad][0]) if bad.any() else None
    )

    mass = pi[eta] * v
    moved = (T[eta, g] * m + inv[g]) * m + d
    res, worst = _grouped_residual(key, mass, moved, mass)
    checks["A2_invariance"] = CheckResult(res <= tol, res, unkey(worst) if worst is not None and res else None)

    moved = (T[eta, d] * m + g) * m + inv[d]
    res, worst = _grouped_residual(key, mass, moved, mass)
    checks["second_move_invariance"] = CheckResult(
        res <= tol, res, unkey(worst) if worst is not None and res else None
    )
    return KernelReport(checks)


def gamma(k: RKernel) -> np.ndarray:
    """``Gamma(x, g, d) = c(x, g) c(x, d) - R(x, g, d)`` as a dense array."""
    c = k.rep.rates
    return c[:, :, None] * c[:, None, :] - k.dense


def b_tilde_terms(k: RKernel, rho, psi) -> tuple[float, float, float]:
    rep = k.rep
    rho = _interior(rep.base, rho)
    psi = rep.base.check_vector(psi, "psi")
    return _b_tilde_from_moves(k, gamma(k), rho, rep.move_grad(psi))


def _b_tilde_from_moves(k: RKernel, Gam: np.ndarray, rho: np.ndarray, gpsi: np.ndarray):
    """The three terms from the move gradient ``gpsi[x, d] = psi(d x) - psi(x)``."""
    rep = k.rep
    pi, T = rep.base.pi, rep.target
    rs, rt = np.broadcast_arrays(rho[:, None], rho[T])
    rhat = theta(rs, rt)
    th1 = theta_grad(rs, rt)[0]
    grho = rho[T] - rho[:, None]
    b1 = np.einsum("x,xgd,xd,xd,xg->", pi, Gam, rhat, gpsi, gpsi)
    b2 = 0.5 * np.einsum("x,xgd,xd,xd,xg->", pi, Gam, gpsi**2, th1, grho)
    hess = gpsi[T] - gpsi[:, None, :]  # psi(d g x) - psi(g x) - psi(d x) + psi(x)
    b3 = 0.25 * np.einsum("x,xgd,xd,xgd->", pi, k.dense, rhat, hess**2)
    return float(b1), float(b2), float(b3)


def bochner_inequality_residual(k: RKernel, rho, psi) -> float:
    """``B(rho, psi) - (B1 + B2 + B3)(rho, psi)``; nonnegative for valid kernels."""
    from .transport import hessian_B

    return hessian_B(k.rep.base, rho, psi) - sum(b_tilde_terms(k, rho, psi))


def weighted_bochner_check(k: RKernel, phi, psi, alpha) -> float:
    """Difference of the two sides of the weighted Bochner identity.

    ``alpha`` is a symmetric ``(n, n)`` array (or a scalar for a constant
    weight).
    """
    rep = k.rep
    t = rep.base
    phi = t.check_vector(phi, "phi")
    psi = t.check_vector(psi, "psi")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (t.n, t.n))
    if not np.allclose(alpha, alpha.T, rtol=0, atol=1e-14):
        raise AsymmetricAlpha("alpha must be symmetric")
    pi, T, R = t.pi, rep.target, k.dense
    gphi = rep.move_grad(phi)
    gpsi = rep.move_grad(psi)
    F = alpha[np.arange(t.n)[:, None], T] * gphi  # F[x, d] = alpha(x, d x) grad_d phi(x)
    lhs = np.einsum("x,xgd,xd,xg->", pi, R, F, gpsi)
    dF = F[T] - F[:, None, :]  # [x, g, d]: F(g x, d) - F(x, d)
    # grad_d grad_g psi(x) = psi(g d x) - psi(d x) - psi(g x) + psi(x)
    TdTg = T[T[:, None, :], np.arange(rep.n_moves)[None, :, None]]  # [x, g, d] -> g(d x)
    hdg = psi[TdTg] - psi[T][:, None, :] - psi[T][:, :, None] + psi[:, None, None]
    rhs = 0.25 * np.einsum("x,xgd,xgd,xgd->", pi, R, dF, hdg)
    return float(lhs - rhs)


class BochnerForms:
    """Quadratic-form provider for ``B1 + B2 + B3`` against the action, in
    the tree-increment coordinates used by the curvature optimizer."""

    def __init__(self, k: RKernel):
        self.k = k
        self.t = t = k.rep.base
        rep = k.rep
        n, m = t.n, rep.n_moves
        T = rep.target
        P = t.tree_basis.tocsr()
        x = np.repeat(np.arange(n), m)
        # Mv[(x, d)] = P[d x] - P[x]: move gradients in increments
        self.Mv = (P[T.ravel()] - P[x]).tocsr()
        rows = np.arange(n * m * m)
        xg = np.repeat(np.arange(n * m), m)  # (x, g) for each (x, g, d)
        d = np.tile(np.arange(m), n * m)
        xx = xg // m
        S3 = sp.csr_matrix(
            (
                np.concatenate([np.ones(rows.size), -np.ones(rows.size)]),
                (np.concatenate([rows, rows]), np.concatenate([T.ravel()[xg] * m + d, xx * m + d])),
            ),
            shape=(n * m * m, n * m),
        )
        self.H = (S3 @ self.Mv).tocsr()  # second differences
        self.Gam = gamma(k)
        self.R = k.dense
        self._bx = np.repeat(np.arange(n), m * m)
        self._brow = (self._bx * m + np.tile(np.repeat(np.arange(m), m), n))  # (x, g)
        self._bcol = self._bx * m + np.tile(np.arange(m), n * m)  # (x, d)

    def move_grad(self, h: np.ndarray) -> np.ndarray:
        return (self.Mv @ h).reshape(self.t.n, self.k.rep.n_moves)

    def potential(self, h: np.ndarray) -> np.ndarray:
        psi = self.t.tree_basis @ h
        return psi - self.t.pi @ psi

    def reduced(self, rho: np.ndarray):
        t, rep = self.t, self.k.rep
        n, m = t.n, rep.n_moves
        pi, T = t.pi, rep.target
        rs, rt = np.broadcast_arrays(rho[:, None], rho[T])
        rhat = theta(rs, rt)
        th1 = theta_grad(rs, rt)[0]
        grho = rho[T] - rho[:, None]
        c1 = pi[:, None, None] * self.Gam * rhat[:, None, :]
        C1 = sp.csr_matrix((c1.ravel(), (self._bcol, self._brow)), shape=(n * m, n * m))
        c2 = 0.5 * pi[:, None, None] * self.Gam * th1[:, None, :] * grho[:, :, None]
        w2 = c2.sum(axis=1).ravel()  # weight of u_(x,d) u_(x,d)^T
        c3 = 0.25 * pi[:, None, None] * self.R * rhat[:, None, :]
        Mv, H = self.Mv, self.H
        B = (Mv.T @ (C1 + sp.diags(w2)) @ Mv + H.T @ sp.diags(c3.ravel()) @ H).toarray()
        return 0.5 * (B + B.T), reduced_action(t, rho)

    def value(self, rho: np.ndarray, h: np.ndarray) -> tuple[float, float]:
        b = sum(_b_tilde_from_moves(self.k, self.Gam, rho, self.move_grad(h)))
        return b, action_from_grad(self.t, rho, self.t.tree_incidence @ h)

    def grad(self, rho: np.ndarray, h: np.ndarray):
        rep, t = self.k.rep, self.t
        n, pi, T = t.n, t.pi, rep.target
        rs, rt = np.broadcast_arrays(rho[:, None], rho[T])
        th1, th2 = theta_grad(rs, rt)
        t11, t12, _ = theta_hessian(rs, rt)
        gpsi = self.move_grad(h)
        grho = rho[T] - rho[:, None]
        m = rep.n_moves
        X = np.broadcast_to(np.arange(n)[:, None, None], (n, m, m))
        Tg = np.broadcast_to(T[:, :, None], (n, m, m))
        Td = np.broadcast_to(T[:, None, :], (n, m, m))
        out = np.zeros(n)

        def put(idx, val):
            np.add.at(out, idx.ravel(), np.broadcast_to(val, idx.shape).ravel())

        # B1: rho_hat(x, d x)
        c1 = pi[:, None, None] * self.Gam * (gpsi[:, None, :] * gpsi[:, :, None])
        put(X, c1 * th1[:, None, :])
        put(Td, c1 * th2[:, None, :])
        # B2: theta1(rho_x, rho_dx) * (rho_gx - rho_x)
        c2 = 0.5 * pi[:, None, None] * self.Gam * (gpsi**2)[:, None, :]
        put(X, c2 * t11[:, None, :] * grho[:, :, None])
        put(Td, c2 * t12[:, None, :] * grho[:, :, None])
        put(Tg, c2 * th1[:, None, :])
        put(X, -c2 * th1[:, None, :])
        # B3: rho_hat(x, d x)
        hess = gpsi[T] - gpsi[:, None, :]
        c3 = 0.25 * pi[:, None, None] * self.R * hess**2
        put(X, c3 * th1[:, None, :])
        put(Td, c3 * th2[:, None, :])
        return out, action_grad_from_grad(t, rho, t.tree_incidence @ h)


def certify_kappa(k: RKernel, seeds=None, budget: int = 500, threads: int = 1, **kwargs):
    """Numerical estimate of ``inf (B1 + B2 + B3) / A`` over interior densities.

    This is the best constant the kernel's criterion can deliver, found by
    the same eigenvalue-in-psi / descent-in-rho scheme as the curvature
    estimate.  It is a numerical estimate, not a proof.
    """
    from .curvature import minimize_form_ratio

    if not k.report.passed:
        raise KernelNotVerified(f"kernel {k.name!r} fails verification: {k.report.as_dict()['checks']}")
    return minimize_form_ratio(k.rep.base, BochnerForms(k), seeds=seeds, budget=budget, threads=threads, **kwargs)
