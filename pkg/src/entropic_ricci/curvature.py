"""Numerical estimation of the entropic Ricci bound ``inf B / A``.

At fixed density the ratio ``B(rho, .) / A(rho, .)`` is a quotient of two
quadratic forms, so its infimum over mean-zero potentials is the smallest
generalized eigenvalue ``kappa(rho)``.  The outer problem minimizes
``kappa(rho)`` over interior densities ``rho = exp(u) / pi[exp(u)]``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg, optimize

from .errors import DegenerateForm, NonpositiveKappa, TooLarge
from .logmean import theta
from .markov import MAX_DENSE_STATES, MarkovTriple, dirichlet_form, spectral_gap
from .transport import (
    action,
    action_from_grad,
    action_grad_from_grad,
    entropy,
    entropy_decay_check,
    geodesic_integrate,
    heat_flow,
    hessian_from_grad,
    hessian_grad_from_grad,
    reduced_forms,
)

DEFAULT_STARTS = 16
DEFAULT_BUDGET = 500
U_BOX = 12.0
START_SCALE = 1.5
FD_STEP = 1e-6


class HessianForms:
    """Quadratic-form provider for the entropy Hessian against the action.

    Potentials are parametrized by increments ``h`` along a spanning tree
    (``psi = P h``); see ``MarkovTriple.tree_basis``.
    """

    def __init__(self, t: MarkovTriple):
        self.t = t

    def reduced(self, rho: np.ndarray):
        return reduced_forms(self.t, rho)

    def value(self, rho: np.ndarray, h: np.ndarray) -> tuple[float, float]:
        g = self.t.tree_incidence @ h
        return hessian_from_grad(self.t, rho, g), action_from_grad(self.t, rho, g)

    def grad(self, rho: np.ndarray, h: np.ndarray):
        g = self.t.tree_incidence @ h
        return hessian_grad_from_grad(self.t, rho, g), action_grad_from_grad(self.t, rho, g)

    def potential(self, h: np.ndarray) -> np.ndarray:
        psi = self.t.tree_basis @ h
        return psi - self.t.pi @ psi


def density_from_u(t: MarkovTriple, u: np.ndarray) -> np.ndarray:
    e = np.exp(u - u.max())
    return e / np.dot(t.pi, e)


def smallest_eigenpair(t: MarkovTriple, forms, rho: np.ndarray) -> tuple[float, np.ndarray]:
    """``kappa(rho)`` and an ``A``-normalized minimizing increment vector.

    The value returned is the Rayleigh quotient of the computed eigenvector,
    evaluated edge by edge: it is attained, so eigensolver error can only
    push it up.
    """
    Br, Ar = forms.reduced(rho)
    # Jacobi scaling: densities and stationary weights spanning many orders of
    # magnitude otherwise wreck the Cholesky factor of Ar
    dA = np.diag(Ar)
    if not np.all(dA > 0):
        raise DegenerateForm("action form has a nonpositive diagonal entry")
    s = 1.0 / np.sqrt(dA)
    try:
        _, v = linalg.eigh(s[:, None] * Br * s[None, :], s[:, None] * Ar * s[None, :], subset_by_index=[0, 0])
    except linalg.LinAlgError as exc:
        raise DegenerateForm(f"action form is not positive definite: {exc}") from exc
    h = s * v[:, 0]
    b, a = forms.value(rho, h)
    if not a > 0:
        raise DegenerateForm("action vanishes on the computed eigenvector")
    return b / a, h / np.sqrt(a)


def kappa_at(t: MarkovTriple, rho, forms=None) -> float:
    rho = np.asarray(rho, dtype=float)
    return smallest_eigenpair(t, forms or HessianForms(t), rho)[0]


@dataclass
class StartTrace:
    seed: int | None
    kappa: float
    iterations: int
    converged: bool
    message: str
    grad_norm: float
    uncertainty: float
    degenerate_steps: int


@dataclass
class RatioResult:
    kappa_min: float
    uncertainty: float
    rho: np.ndarray
    psi: np.ndarray
    traces: list

    @property
    def kappa(self) -> float:
        return self.kappa_min - self.uncertainty


class _Objective:
    def __init__(self, t: MarkovTriple, forms, gradient: str):
        self.t, self.forms, self.gradient = t, forms, gradient
        self.degenerate = 0

    def value(self, u: np.ndarray) -> float:
        return smallest_eigenpair(self.t, self.forms, density_from_u(self.t, u))[0]

    def __call__(self, u: np.ndarray):
        t = self.t
        rho = density_from_u(t, u)
        try:
            lam, h = smallest_eigenpair(t, self.forms, rho)
        except DegenerateForm:
            # push the line search back towards the centre of the box
            self.degenerate += 1
            return 1e6 + 0.5 * float(u @ u), u.copy()
        if self.gradient == "fd":
            g = np.empty_like(u)
            for i in range(u.size):
                up = u.copy()
                up[i] += FD_STEP
                g[i] = (self.value(up) - lam) / FD_STEP
            return lam, g
        dB, dA = self.forms.grad(rho, h)
        gr = dB - lam * dA
        gu = gr * rho - t.pi * rho * np.dot(gr, rho)
        return lam, gu


def _projected_gradient(u: np.ndarray, g: np.ndarray) -> np.ndarray:
    g = g.copy()
    g[(u >= U_BOX) & (g < 0)] = 0.0
    g[(u <= -U_BOX) & (g > 0)] = 0.0
    return g


def _run_start(t, forms, u0, seed, budget, gradient):
    obj = _Objective(t, forms, gradient)
    res = optimize.minimize(
        obj,
        u0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(-U_BOX, U_BOX)] * t.n,
        options={"maxiter": budget, "ftol": 1e-15, "gtol": 1e-10},
    )
    u = res.x
    rho = density_from_u(t, u)
    lam, h = smallest_eigenpair(t, forms, rho)
    psi = forms.potential(h)
    _, g = obj(u)
    pg = _projected_gradient(u, g)
    try:
        unc = 0.5 * float(pg @ res.hess_inv.matvec(pg))
    except AttributeError:
        unc = 0.0
    unc = max(unc, 0.0)
    trace = StartTrace(
        seed=seed,
        kappa=lam,
        iterations=int(res.nit),
        converged=bool(res.success),
        message=str(res.message),
        grad_norm=float(np.linalg.norm(pg)),
        uncertainty=unc,
        degenerate_steps=obj.degenerate,
    )
    return lam, unc, rho, psi, trace


def minimize_form_ratio(
    t: MarkovTriple,
    forms,
    seeds=None,
    budget: int = DEFAULT_BUDGET,
    threads: int = 1,
    gradient: str = "analytic",
    include_uniform: bool = True,
) -> RatioResult:
    """Multi-start minimization of the smallest generalized eigenvalue.

    Each seed gives one random start; ``rho == 1`` is always tried first when
    ``include_uniform``.  Starts are independent, so the result does not
    depend on ``threads``.
    """
    if t.n > MAX_DENSE_STATES:
        raise TooLarge(f"{t.n} states exceeds the dense limit {MAX_DENSE_STATES}")
    if t.n < 2:
        raise DegenerateForm("a single-state chain has no mean-zero potentials")
    if gradient not in ("analytic", "fd"):
        raise ValueError("gradient must be 'analytic' or 'fd'")
    seeds = list(range(DEFAULT_STARTS)) if seeds is None else [int(s) for s in seeds]
    starts = []
    if include_uniform:
        starts.append((None, np.zeros(t.n)))
    for s in seeds:
        rng = np.random.default_rng(s)
        starts.append((s, np.clip(rng.normal(scale=START_SCALE, size=t.n), -U_BOX, U_BOX)))

    def job(item):
        seed, u0 = item
        return _run_start(t, forms, u0, seed, budget, gradient)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(job, starts))
    else:
        results = [job(s) for s in starts]
    # ties go to the earliest start, so the reduction is order independent
    best = min(range(len(results)), key=lambda i: (results[i][0], i))
    lam, unc, rho, psi, _ = results[best]
    return RatioResult(lam, unc, rho, psi, [r[4] for r in results])


def _finite(x: float):
    return x if math.isfinite(x) else None


@dataclass
class CurvatureReport:
    kappa_numeric: float
    kappa_min_found: float
    uncertainty: float
    witness_rho: list
    witness_psi: list
    mlsi_alpha: float
    poincare_lambda: float
    spectral_gap: float
    kappa_certified: float | None = None
    certified_provenance: str | None = None
    kappa_uniform: float | None = None
    witness_min_rho: float | None = None
    psi_log_rho_alignment: float | None = None
    optimizer_trace: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, allow_nan=False, default=_finite)

    @classmethod
    def from_dict(cls, data: dict) -> "CurvatureReport":
        return cls(**data)


def _alignment(t: MarkovTriple, rho: np.ndarray, psi: np.ndarray) -> float | None:
    """Cosine in the action inner product between ``psi`` and ``log rho``."""
    w = 0.5 * t.edge_weight * theta(rho[t.src], rho[t.dst])
    a, b = t.grad(psi), t.grad(np.log(rho))
    den = math.sqrt(np.sum(w * a * a) * np.sum(w * b * b))
    if den < 1e-14:
        return None
    return float(np.sum(w * a * b) / den)


def estimate_ricci(
    t: MarkovTriple,
    seeds=None,
    budget: int = DEFAULT_BUDGET,
    threads: int = 1,
    gradient: str = "analytic",
    kappa_certified: float | None = None,
    certified_provenance: str | None = None,
) -> CurvatureReport:
    """Estimate the best Ricci lower bound ``inf B / A`` of ``t``."""
    seeds = list(range(DEFAULT_STARTS)) if seeds is None else [int(s) for s in seeds]
    forms = HessianForms(t)
    res = minimize_form_ratio(t, forms, seeds=seeds, budget=budget, threads=threads, gradient=gradient)
    kappa = res.kappa
    k_uniform = kappa_at(t, np.ones(t.n), forms)
    return CurvatureReport(
        kappa_numeric=kappa,
        kappa_min_found=res.kappa_min,
        uncertainty=res.uncertainty,
        witness_rho=res.rho.tolist(),
        witness_psi=res.psi.tolist(),
        mlsi_alpha=2.0 * kappa,
        poincare_lambda=kappa,
        spectral_gap=spectral_gap(t),
        kappa_certified=kappa_certified,
        certified_provenance=certified_provenance,
        kappa_uniform=k_uniform,
        witness_min_rho=float(res.rho.min()),
        psi_log_rho_alignment=_alignment(t, res.rho, res.psi),
        optimizer_trace=[asdict(tr) for tr in res.traces],
        config={
            "seeds": seeds,
            "budget": budget,
            "threads": threads,
            "gradient": gradient,
            "u_box": U_BOX,
            "start_scale": START_SCALE,
        },
    )


@dataclass
class ConvexityReport:
    kappa: float
    trials: int
    completed: int
    min_slack: float
    worst: dict | None
    violation: bool
    skipped: int


def _random_geodesic_data(t: MarkovTriple, rng: np.random.Generator, scale: float):
    rho0 = np.exp(rng.normal(scale=0.5, size=t.n))
    rho0 /= t.pi @ rho0
    psi0 = rng.normal(size=t.n)
    psi0 -= t.pi @ psi0
    a = action(t, rho0, psi0)
    if a > 0:
        psi0 *= scale / math.sqrt(a)
    return rho0, psi0


def check_geodesic_convexity(
    t: MarkovTriple,
    kappa: float,
    trials: int = 20,
    steps: int = 200,
    seed: int = 0,
    speed: float = 0.2,
    tol: float = 1e-4,
    grid: int = 11,
    initial=None,
) -> ConvexityReport:
    """Spot check ``H(rho_s) <= (1-s)H(rho_0) + sH(rho_1) - kappa/2 s(1-s) W^2``.

    Geodesics are integrated from random interior data with action
    ``speed**2``; ``W(rho_0, rho_1)`` is the constant speed.  ``initial`` may
    supply explicit ``(rho0, psi0)`` pairs instead.  Trajectories leaving the
    interior are counted in ``skipped``.
    """
    from .errors import LeftInterior

    rng = np.random.default_rng(seed)
    data = list(initial) if initial is not None else [_random_geodesic_data(t, rng, speed) for _ in range(trials)]
    idx = np.linspace(0, steps, grid).round().astype(int)
    min_slack, worst, done, skipped = math.inf, None, 0, 0
    for k, (rho0, psi0) in enumerate(data):
        try:
            traj = geodesic_integrate(t, rho0, psi0, steps=steps, t_end=1.0)
        except LeftInterior:
            skipped += 1
            continue
        done += 1
        w2 = action(t, rho0, psi0)
        H = np.array([entropy(t, traj[i].rho) for i in idx])
        s = idx / steps
        slack = (1 - s) * H[0] + s * H[-1] - 0.5 * kappa * s * (1 - s) * w2 - H
        j = int(np.argmin(slack))
        if slack[j] < min_slack:
            min_slack = float(slack[j])
            worst = {"trial": k, "s": float(s[j]), "slack": float(slack[j]), "w2": float(w2)}
    return ConvexityReport(kappa, len(data), done, min_slack, worst, min_slack < -tol, skipped)


@dataclass
class InequalityReport:
    mlsi_alpha: float
    poincare_lambda: float
    checked: bool
    mlsi_margin: float | None = None
    decay_margin: float | None = None
    convex_decay_margin: float | None = None

    @property
    def passed(self) -> bool:
        return self.checked and min(self.mlsi_margin, self.decay_margin, self.convex_decay_margin) >= -1e-8


def functional_inequalities(
    t: MarkovTriple,
    kappa: float,
    samples: int = 100,
    times=None,
    seed: int = 0,
    densities=None,
    strict: bool = False,
) -> InequalityReport:
    """Implied MLSI and Poincare constants with numerical spot checks.

    Margins are ``rhs - lhs`` minima of (a) ``H <= E(rho, log rho) / alpha``,
    (b) ``H(P_s rho) <= exp(-alpha s) H(rho)`` on the time grid, and (c) the
    convex entropy decay inequality.  Without positive ``kappa`` the checks
    are skipped (or ``NonpositiveKappa`` is raised if ``strict``).
    """
    alpha = 2.0 * kappa
    if kappa <= 0:
        if strict:
            raise NonpositiveKappa(f"kappa = {kappa} gives no functional inequality")
        return InequalityReport(alpha, kappa, checked=False)
    times = np.linspace(0.1, 1.0, 10) if times is None else np.asarray(times, dtype=float)
    rng = np.random.default_rng(seed)
    if densities is None:
        densities = []
        for _ in range(samples):
            r = np.exp(rng.normal(scale=1.0, size=t.n))
            densities.append(r / (t.pi @ r))
    m_mlsi = m_decay = m_conv = math.inf
    for rho in densities:
        rho = np.asarray(rho, dtype=float)
        H = entropy(t, rho)
        E = dirichlet_form(t, rho, np.log(rho))
        m_mlsi = min(m_mlsi, E / alpha - H)
        for s in times:
            m_decay = min(m_decay, math.exp(-alpha * s) * H - entropy(t, heat_flow(t, rho, float(s))))
        m_conv = min(m_conv, entropy_decay_check(t, rho, alpha)[1])
    return InequalityReport(alpha, kappa, True, m_mlsi, m_decay, m_conv)
