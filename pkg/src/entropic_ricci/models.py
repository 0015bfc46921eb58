"""Model chains with mapping representations, R-kernels and closed-form bounds.

State identifiers are canonical strings: integers for birth-death chains,
comma-separated occupation vectors for zero-range, 0/1 words for
Bernoulli-Laplace and the hypercube, one-line permutation words for random
transpositions.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .bochner import RKernel
from .errors import BadParticleCount, BadRates, NotIrreducible, ParseError, TooLarge
from .logmean import capital_theta
from .markov import (
    MAX_STATES,
    MappingRepresentation,
    MarkovTriple,
    build_mapping_representation,
    build_triple,
    triple_from_spec,
)

MAX_KERNEL_ENTRIES = 40_000_000
MAX_PERMUTATION_N = 6
MAX_HYPERCUBE_N = 12


@dataclass(frozen=True)
class KappaFormula:
    """Closed-form curvature lower bound; ``value`` is ``None`` when the
    hypotheses behind the formula fail."""

    value: float | None
    applicable: bool
    provenance: str
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"value": self.value, "applicable": self.applicable, "provenance": self.provenance, **self.details}


@dataclass(frozen=True, eq=False)
class ModelBundle:
    name: str
    params: dict
    triple: MarkovTriple
    rep: MappingRepresentation | None
    kappa_formula: KappaFormula | None
    kernel_builder: Callable[[MappingRepresentation], np.ndarray] | None = field(default=None, repr=False)

    @cached_property
    def kernel(self) -> RKernel | None:
        if self.kernel_builder is None or self.rep is None:
            return None
        size = self.triple.n * self.rep.n_moves**2
        if size > MAX_KERNEL_ENTRIES:
            raise TooLarge(f"kernel with {size} entries exceeds {MAX_KERNEL_ENTRIES}")
        return RKernel.from_dense(self.rep, self.kernel_builder(self.rep), name=self.name)


def _rank(keys: np.ndarray, sorted_keys: np.ndarray) -> np.ndarray:
    return np.searchsorted(sorted_keys, keys)


def _bundle_from_tables(name, params, states, target, rates, move_names, inverse, kappa, kernel_builder):
    """Assemble triple and representation from a move table."""
    n = len(states)
    x = np.broadcast_to(np.arange(n)[:, None], target.shape)
    off = (target != x) & (rates > 0)
    entries = zip(x[off].tolist(), target[off].tolist(), rates[off].tolist())
    t = build_triple(states, entries)
    rep = build_mapping_representation(t, move_names, rates, inverse, targets=target)
    return ModelBundle(name, params, t, rep, kappa, kernel_builder)


# ----------------------------------------------------------------------------
# birth-death


def _rate_values(spec, cap: int, kind: str) -> np.ndarray:
    if callable(spec):
        vals = np.array([float(spec(k)) for k in range(cap + 1)])
    elif isinstance(spec, (int, float)):
        vals = np.full(cap + 1, float(spec))
        if kind == "b":
            vals[0] = 0.0
    elif isinstance(spec, str):
        vals = _preset(spec, cap)
    else:
        vals = np.asarray(spec, dtype=float)
        if vals.shape != (cap + 1,):
            raise BadRates(f"{kind} needs {cap + 1} values, got shape {vals.shape}")
    return vals


def _preset(spec: str, cap: int) -> np.ndarray:
    k = np.arange(cap + 1, dtype=float)
    if spec == "linear":
        return k
    if spec.startswith("const:"):
        return np.full(cap + 1, float(spec.split(":", 1)[1]))
    if spec.startswith("affine:"):
        c, d = (float(v) for v in spec.split(":", 1)[1].split(","))
        return c * k + d
    raise ParseError(f"unknown rate preset {spec!r}")


def birth_death_term(da: float, db: float) -> float:
    """``(da + db) / 2 + Theta(da, db) / 2`` for increments ``da = a(n) - a(n+1)``
    and ``db = b(n+1) - b(n)``."""
    return 0.5 * (da + db) + 0.5 * capital_theta(da, db)


def birth_death(a, b, cap: int) -> ModelBundle:
    """Birth-death chain on ``{0..cap}`` with birth rates ``a`` and death rates ``b``.

    ``a`` and ``b`` are arrays of length ``cap + 1``, callables, constants or
    presets.  The chain is truncated by setting ``a(cap) = 0``.
    """
    cap = int(cap)
    if cap < 1:
        raise BadRates("cap must be at least 1")
    if cap + 1 > MAX_STATES:
        raise TooLarge(f"{cap + 1} states exceeds {MAX_STATES}")
    av = _rate_values(a, cap, "a").copy()
    bv = _rate_values(b, cap, "b")
    av[cap] = 0.0
    if np.any(av < 0) or np.any(bv < 0) or not (np.all(np.isfinite(av)) and np.all(np.isfinite(bv))):
        raise BadRates("birth and death rates must be finite and nonnegative")
    if bv[0] != 0:
        raise BadRates("b(0) must vanish")
    if np.any(av[:cap] <= 0) or np.any(bv[1:] <= 0):
        raise NotIrreducible("need a(n) > 0 below cap and b(n) > 0 above 0")
    n = cap + 1
    idx = np.arange(n)
    target = np.stack([np.minimum(idx + 1, cap), np.maximum(idx - 1, 0)], axis=1)
    rates = np.stack([av, bv], axis=1)

    da = av[:-1] - av[1:]
    db = bv[1:] - bv[:-1]
    monotone = bool(np.all(da >= 0) and np.all(db >= 0))
    if monotone:
        terms = [birth_death_term(float(x), float(y)) for x, y in zip(da, db)]
        k = int(np.argmin(terms))
        kappa = KappaFormula(
            float(terms[k]),
            True,
            "birth-death criterion: min over n < cap of (a(n)-a(n+1)+b(n+1)-b(n))/2 + Theta(a(n)-a(n+1), b(n+1)-b(n))/2",
            {"argmin_n": k},
        )
    else:
        kappa = KappaFormula(
            None, False, "birth-death criterion needs a nonincreasing and b nondecreasing", {}
        )

    def kernel(rep):
        R = np.zeros((n, 2, 2))
        a_next = np.append(av[1:], 0.0)
        b_prev = np.concatenate([[0.0], bv[:-1]])
        R[:, 0, 0] = av * a_next
        R[:, 1, 1] = bv * b_prev
        R[:, 0, 1] = R[:, 1, 0] = av * bv
        return R

    params = {"a": av.tolist(), "b": bv.tolist(), "cap": cap}
    return _bundle_from_tables(
        "birth_death", params, [str(k) for k in range(n)], target, rates, ["+", "-"], [1, 0], kappa, kernel
    )


def two_point(p: float = 1.0, q: float = 1.0) -> ModelBundle:
    """Two-state chain with ``Q(0, 1) = p`` and ``Q(1, 0) = q``."""
    return birth_death([p, 0.0], [0.0, q], 1)


# ----------------------------------------------------------------------------
# zero-range


def _site_rates(rates, L: int, N: int) -> np.ndarray:
    """``(L, N + 1)`` table of ``c_x(k)`` for ``k = 0..N``."""
    k = np.arange(N + 1, dtype=float)
    if isinstance(rates, str):
        if rates == "linear":
            return np.tile(k, (L, 1))
        if rates.startswith("affine:"):
            c, d = (float(v) for v in rates.split(":", 1)[1].split(","))
            slopes = c + d * (np.arange(L) / (L - 1) if L > 1 else np.zeros(1))
            return slopes[:, None] * k[None, :]
        raise ParseError(f"unknown rate preset {rates!r}")
    if callable(rates):
        return np.array([[float(rates(x, j)) for j in range(N + 1)] for x in range(L)])
    inc = np.asarray(rates, dtype=float)
    if inc.ndim == 1:
        inc = np.tile(inc, (L, 1))
    if inc.shape != (L, N):
        raise BadRates(f"increments need shape ({L}, {N}) or ({N},), got {inc.shape}")
    return np.concatenate([np.zeros((L, 1)), np.cumsum(inc, axis=1)], axis=1)


def _compositions(L: int, N: int) -> np.ndarray:
    """Occupation vectors with sum ``N`` in colex order (last site most significant)."""
    rows = []
    for bars in itertools.combinations(range(N + L - 1), L - 1):
        cuts = (-1,) + bars + (N + L - 1,)
        rows.append([cuts[i + 1] - cuts[i] - 1 for i in range(L)])
    S = np.array(rows, dtype=np.int64).reshape(-1, L)
    order = np.lexsort(S.T)  # last key (site L-1) is primary
    return S[order]


def zero_range(L: int, N: int, rates="linear") -> ModelBundle:
    """Zero-range process: a particle leaves site ``x`` at rate ``c_x(eta_x)``
    and jumps to one of the other sites, each chosen with weight ``1/L``.

    ``rates`` is a preset (``"linear"``, ``"affine:c,delta"``), an array of
    increments (shared or per site), or a callable ``(x, k) -> c_x(k)``.
    """
    L, N = int(L), int(N)
    if L < 2 or N < 1:
        raise BadRates("zero-range needs at least 2 sites and 1 particle")
    count = math.comb(N + L - 1, L - 1)
    if count > MAX_STATES:
        raise TooLarge(f"{count} states exceeds {MAX_STATES}")
    C = _site_rates(rates, L, N)
    if not np.all(np.isfinite(C)) or np.any(C[:, 0] != 0) or np.any(C[:, 1:] <= 0):
        raise BadRates("need c_x(0) = 0 and c_x(k) > 0 for k > 0")
    S = _compositions(L, N)
    n = len(S)
    radix = (N + 1) ** np.arange(L, dtype=np.int64)
    keys = S @ radix
    sorted_keys = np.sort(keys)
    pos_of_sorted = np.argsort(keys)
    moves = [(x, y) for x in range(L) for y in range(L) if x != y]
    G = len(moves)
    xs = np.array([m[0] for m in moves])
    ys = np.array([m[1] for m in moves])
    occ = S[:, xs]  # (n, G) occupation at the source site
    CX = C[xs[None, :], occ] / L  # c(eta, xy)
    CXm = C[xs[None, :], np.maximum(occ - 1, 0)] * (occ > 0)
    tkeys = keys[:, None] + (occ > 0) * (radix[ys] - radix[xs])[None, :]
    target = pos_of_sorted[_rank(tkeys, sorted_keys)]
    move_index = {m: g for g, m in enumerate(moves)}
    inverse = [move_index[(y, x)] for x, y in moves]

    inc = np.diff(C, axis=1)  # increments over 0..N-1
    c, top = float(inc.min()), float(inc.max())
    delta = top - c
    ok = delta <= 2 * c
    kappa = KappaFormula(
        c / 2 - 5 * delta / 4 if ok else None,
        bool(ok),
        "zero-range criterion: c/2 - 5 delta/4 with c <= c_x(k+1) - c_x(k) <= c + delta, valid for delta <= 2c",
        {"c": c, "delta": delta},
    )

    def kernel(rep):
        same = xs[:, None] == xs[None, :]
        prod = CX[:, :, None] * CX[:, None, :]
        diag = CX[:, :, None] * CXm[:, None, :] / L
        return np.where(same[None], diag, prod)

    states = [",".join(map(str, row)) for row in S.tolist()]
    names = [f"{x + 1}>{y + 1}" for x, y in moves]
    params = {"L": L, "N": N, "site_rates": C.tolist()}
    return _bundle_from_tables("zero_range", params, states, target, CX, names, inverse, kappa, kernel)


# ----------------------------------------------------------------------------
# Bernoulli-Laplace


def _subsets(L: int, N: int) -> np.ndarray:
    masks = [m for m in range(1 << L) if bin(m).count("1") == N]
    return np.array([[(m >> x) & 1 for x in range(L)] for m in masks], dtype=np.int64)


def bernoulli_laplace(L: int, N: int, lam=1.0) -> ModelBundle:
    """Exclusion process on the complete graph of ``L`` sites with ``N``
    particles; a particle at ``x`` jumps to an empty ``y`` at rate ``lam_x / L``."""
    L, N = int(L), int(N)
    if not (1 <= N < L - 1):
        raise BadParticleCount(f"need 1 <= N < L - 1, got L={L}, N={N}")
    count = math.comb(L, N)
    if count > MAX_STATES:
        raise TooLarge(f"{count} states exceeds {MAX_STATES}")
    lv = np.broadcast_to(np.asarray(lam, dtype=float), (L,)).copy()
    if not np.all(np.isfinite(lv)) or np.any(lv <= 0):
        raise BadRates("site rates must be positive")
    S = _subsets(L, N)
    masks = S @ (1 << np.arange(L, dtype=np.int64))
    moves = [(x, y) for x in range(L) for y in range(L) if x != y]
    xs = np.array([m[0] for m in moves])
    ys = np.array([m[1] for m in moves])
    active = S[:, xs] * (1 - S[:, ys])
    rates = lv[xs][None, :] / L * active
    tmask = masks[:, None] + active * ((1 << ys) - (1 << xs))[None, :]
    target = _rank(tmask, masks)
    move_index = {m: g for g, m in enumerate(moves)}
    inverse = [move_index[(y, x)] for x, y in moves]

    c = float(lv.min())
    delta = float(lv.max()) - c
    ok = delta <= 2 * c
    pre = c / 2 - (5 * (L - 1) - 3 * N) * delta / (4 * L)
    kappa = KappaFormula(
        c / 2 - 7 * delta / 8 if ok else None,
        bool(ok),
        "Bernoulli-Laplace criterion: c/2 - 7 delta/8 with c <= lambda_x <= c + delta, valid for delta <= 2c",
        {
            "c": c,
            "delta": delta,
            "kappa_pre_relabeling": pre,
            "note": "the closed form is derived for N >= L/2 and extended to N < L/2 by exchanging "
            "particles and holes; kappa_pre_relabeling is the bound before that exchange",
        },
    )

    def kernel(rep):
        distinct = np.array(
            [[len({x, y, u, v}) == 4 for (u, v) in moves] for (x, y) in moves], dtype=float
        )
        return rates[:, :, None] * rates[:, None, :] * distinct[None]

    states = ["".join(map(str, row)) for row in S.tolist()]
    names = [f"{x + 1}>{y + 1}" for x, y in moves]
    params = {"L": L, "N": N, "lambda": lv.tolist()}
    return _bundle_from_tables("bernoulli_laplace", params, states, target, rates, names, inverse, kappa, kernel)


# ----------------------------------------------------------------------------
# random transposition


def random_transposition(n: int) -> ModelBundle:
    """Random walk on permutations of ``{1..n}``: each transposition is applied
    (on the left) at rate ``2 / (n (n - 1))``."""
    n = int(n)
    if n < 2:
        raise BadRates("need n >= 2")
    if n > MAX_PERMUTATION_N:
        raise TooLarge(f"n = {n} exceeds {MAX_PERMUTATION_N}")
    perms = list(itertools.permutations(range(1, n + 1)))
    index = {p: k for k, p in enumerate(perms)}
    pairs = list(itertools.combinations(range(1, n + 1), 2))
    target = np.empty((len(perms), len(pairs)), dtype=np.int64)
    for k, p in enumerate(perms):
        for g, (i, j) in enumerate(pairs):
            swap = {i: j, j: i}
            target[k, g] = index[tuple(swap.get(v, v) for v in p)]
    c = 2.0 / (n * (n - 1))
    rates = np.full(target.shape, c)
    kappa = KappaFormula(4.0 / (n * (n - 1)), True, "random transposition: 4 / (n (n - 1))", {})

    def kernel(rep):
        disjoint = np.array([[len({*a, *b}) == 4 for b in pairs] for a in pairs], dtype=float)
        return np.broadcast_to(c * c * disjoint, (len(perms),) + disjoint.shape).copy()

    states = ["".join(map(str, p)) for p in perms]
    names = [f"({i} {j})" for i, j in pairs]
    return _bundle_from_tables(
        "random_transposition", {"n": n}, states, target, rates, names, list(range(len(pairs))), kappa, kernel
    )


# ----------------------------------------------------------------------------
# products and the hypercube


def product_chain(b1: ModelBundle | MarkovTriple, b2: ModelBundle | MarkovTriple) -> MarkovTriple:
    """Product chain moving one coordinate at a time with the factor's rates."""
    t1 = b1.triple if isinstance(b1, ModelBundle) else b1
    t2 = b2.triple if isinstance(b2, ModelBundle) else b2
    if t1.n * t2.n > MAX_STATES:
        raise TooLarge(f"{t1.n * t2.n} states exceeds {MAX_STATES}")
    states = [f"{x}|{y}" for x in t1.states for y in t2.states]
    entries = []
    for j in range(t2.n):
        entries += [(i * t2.n + j, k * t2.n + j, q) for i, k, q in zip(t1.src.tolist(), t1.dst.tolist(), t1.rate.tolist())]
    for i in range(t1.n):
        entries += [(i * t2.n + j, i * t2.n + k, q) for j, k, q in zip(t2.src.tolist(), t2.dst.tolist(), t2.rate.tolist())]
    return build_triple(states, entries)


def _hypercube_tables(n: int):
    if n < 1:
        raise BadRates("need n >= 1")
    if n > MAX_HYPERCUBE_N:
        raise TooLarge(f"n = {n} exceeds {MAX_HYPERCUBE_N}")
    N = 1 << n
    idx = np.arange(N)
    # word position k (left to right) is bit n-1-k of the index
    target = idx[:, None] ^ (1 << (n - 1 - np.arange(n)))[None, :]
    states = [format(k, f"0{n}b") for k in range(N)]
    return states, target


def hypercube(n: int) -> MarkovTriple:
    """``{0,1}^n`` with unit-rate single-coordinate flips."""
    states, target = _hypercube_tables(int(n))
    x = np.broadcast_to(np.arange(len(states))[:, None], target.shape)
    return build_triple(states, zip(x.ravel().tolist(), target.ravel().tolist(), [1.0] * x.size))


def hypercube_bundle(n: int) -> ModelBundle:
    """Hypercube with flip moves and the ``Gamma = 0`` kernel ``R = c c``.

    With ``Gamma = 0`` only the third Bochner term survives, which is
    nonnegative, so the closed-form bound delivered is 0.
    """
    states, target = _hypercube_tables(int(n))
    rates = np.ones(target.shape)
    kappa = KappaFormula(0.0, True, "Gamma = 0 kernel: B >= B3 >= 0", {})
    return _bundle_from_tables(
        "hypercube",
        {"n": int(n)},
        states,
        target,
        rates,
        [f"flip{k + 1}" for k in range(int(n))],
        list(range(int(n))),
        kappa,
        lambda rep: rep.rates[:, :, None] * rep.rates[:, None, :],
    )


# ----------------------------------------------------------------------------
# random reversible chains (testing aid)


def random_reversible_chain(n: int, rng: np.random.Generator | int = 0, p_edge: float = 0.5) -> MarkovTriple:
    """Connected reversible chain with ``Q(x, y) = C(x, y) / p(x)`` for a
    random symmetric conductance ``C`` and positive weights ``p``."""
    rng = np.random.default_rng(rng)
    C = np.zeros((n, n))
    order = rng.permutation(n)
    for k in range(1, n):  # random spanning tree keeps the chain irreducible
        a, b = order[k], order[rng.integers(k)]
        C[a, b] = C[b, a] = rng.uniform(0.2, 2.0)
    extra = np.triu(rng.random((n, n)) < p_edge, 1) & (C == 0)
    add = np.where(extra, rng.uniform(0.2, 2.0, (n, n)), 0.0)
    C += add + add.T
    p = rng.uniform(0.3, 3.0, n)
    i, j = np.nonzero(C)
    return build_triple(range(n), zip(i.tolist(), j.tolist(), (C[i, j] / p[i]).tolist()))


# ----------------------------------------------------------------------------
# JSON model specs


def _require(spec: dict, key: str):
    if key not in spec:
        raise ParseError(f"model spec of type {spec.get('type')!r} needs {key!r}")
    return spec[key]


def model_from_spec(spec: dict | str) -> ModelBundle:
    """Build a bundle from a JSON model spec (object or text).

    Custom chains (``{"states": ..., "rates": ...}``) and products give
    bundles without a representation or kernel.
    """
    if isinstance(spec, str):
        try:
            spec = json.loads(spec)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(spec, dict):
        raise ParseError("model spec must be a JSON object")
    kind = spec.get("type", "custom" if "states" in spec else None)
    try:
        if kind == "birth_death":
            return birth_death(_require(spec, "a"), _require(spec, "b"), int(_require(spec, "cap")))
        if kind == "two_point":
            return two_point(float(spec.get("p", 1.0)), float(spec.get("q", 1.0)))
        if kind == "zero_range":
            return zero_range(int(_require(spec, "L")), int(_require(spec, "N")), spec.get("rates", "linear"))
        if kind == "bernoulli_laplace":
            lam = spec.get("lambda", 1.0)
            if isinstance(lam, str):
                lam = _preset_lambda(lam, int(_require(spec, "L")))
            return bernoulli_laplace(int(_require(spec, "L")), int(_require(spec, "N")), lam)
        if kind == "random_transposition":
            return random_transposition(int(_require(spec, "n")))
        if kind == "hypercube":
            return hypercube_bundle(int(_require(spec, "n")))
        if kind == "product":
            factors = _require(spec, "factors")
            if not isinstance(factors, list) or len(factors) < 2:
                raise ParseError("product needs a list of at least two factor specs")
            t = model_from_spec(factors[0]).triple
            for f in factors[1:]:
                t = product_chain(t, model_from_spec(f).triple)
            return ModelBundle("product", {"factors": factors}, t, None, None)
        if kind == "custom":
            return ModelBundle("custom", {}, triple_from_spec(spec), None, None)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad parameter in {kind!r} spec: {exc}") from exc
    raise ParseError(f"unknown model type {kind!r}")


def _preset_lambda(spec: str, L: int) -> np.ndarray:
    """``"affine:c,delta"`` spreads site rates evenly over ``[c, c + delta]``."""
    if spec.startswith("affine:"):
        c, d = (float(v) for v in spec.split(":", 1)[1].split(","))
        return c + d * np.arange(L) / (L - 1)
    if spec.startswith("const:"):
        return np.full(L, float(spec.split(":", 1)[1]))
    raise ParseError(f"unknown rate preset {spec!r}")
