"""Reversible Markov triples, mapping representations and spectral data."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

from .errors import (
    BadInverse,
    DimensionMismatch,
    GeneratorMismatch,
    InvalidRate,
    NotIrreducible,
    NotReversible,
    ParseError,
    ReversibilityIdentityFailed,
    TooLarge,
)

CONSTRUCTION_RTOL = 1e-8
MAX_STATES = 200_000
MAX_DENSE_STATES = 2_000


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MarkovTriple:
    """Finite state space, rates ``Q`` and the reversible measure ``pi``.

    Rates are stored as directed edge arrays ``src -> dst`` with rate
    ``rate``; every edge appears in both directions.
    """

    states: tuple[str, ...]
    src: np.ndarray
    dst: np.ndarray
    rate: np.ndarray
    pi: np.ndarray
    index: Mapping[str, int] = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def edges(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))

    @cached_property
    def edge_weight(self) -> np.ndarray:
        """``pi(x) Q(x, y)`` per directed edge; symmetric by detailed balance."""
        return _frozen(self.pi[self.src] * self.rate)

    @cached_property
    def reverse_edge(self) -> np.ndarray:
        """Position of edge ``(y, x)`` for each edge ``(x, y)``."""
        order = {(a, b): k for k, (a, b) in enumerate(zip(self.src.tolist(), self.dst.tolist()))}
        return _frozen(np.array([order[(b, a)] for a, b in zip(self.src.tolist(), self.dst.tolist())], dtype=np.int64))

    @cached_property
    def rate_matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.rate, (self.src, self.dst)), shape=(self.n, self.n))

    @cached_property
    def generator(self) -> sp.csr_matrix:
        """Sparse generator matrix acting on functions: ``(L f)(x) = sum_y Q(x,y)(f(y) - f(x))``."""
        out_rate = np.bincount(self.src, weights=self.rate, minlength=self.n)
        return (self.rate_matrix - sp.diags(out_rate)).tocsr()

    @cached_property
    def dense_generator(self) -> np.ndarray:
        if self.n > MAX_DENSE_STATES:
            raise TooLarge(f"{self.n} states exceeds the dense cap of {MAX_DENSE_STATES}")
        return _frozen(self.generator.toarray())

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """Edge-by-state matrix ``D`` with ``(D f)[e] = f(dst) - f(src)``."""
        e = np.arange(self.n_edges)
        data = np.concatenate([np.ones(self.n_edges), -np.ones(self.n_edges)])
        return sp.csr_matrix(
            (data, (np.concatenate([e, e]), np.concatenate([self.dst, self.src]))),
            shape=(self.n_edges, self.n),
        )

    @cached_property
    def mean_zero_basis(self) -> np.ndarray:
        """Columns form a pi-orthonormal basis of ``{f : pi[f] = 0}``."""
        if self.n > MAX_DENSE_STATES:
            raise TooLarge(f"{self.n} states exceeds the dense cap of {MAX_DENSE_STATES}")
        r = np.sqrt(self.pi)
        # Householder reflection sending r to e_0; its other columns span r-perp.
        v = r.copy()
        v[0] += np.copysign(1.0, r[0])
        H = np.eye(self.n) - 2.0 * np.outer(v, v) / (v @ v)
        return _frozen(H[:, 1:] / r[:, None])

    @cached_property
    def tree_basis(self) -> sp.csr_matrix:
        """``(n, n-1)`` 0/1 matrix ``P`` with ``psi = P h`` for increments ``h``
        along a maximum-weight spanning tree rooted at the heaviest state.

        Column ``k`` indicates the states below the ``k``-th tree edge, so
        every potential difference is an exact signed sum of increments.
        """
        n = self.n
        if n == 1:
            return sp.csr_matrix((1, 0))
        a, b = self.src, self.dst
        keep = a < b
        # the minimum spanning tree of 1/w is a maximum-weight spanning tree
        W = sp.csr_matrix((1.0 / self.edge_weight[keep], (a[keep], b[keep])), shape=(n, n))
        tree = csgraph.minimum_spanning_tree(W)
        tree = (tree + tree.T).tocsr()
        root = int(np.argmax(self.pi))
        order, parent = csgraph.breadth_first_order(tree, root, directed=False, return_predecessors=True)
        col = {}
        rows, cols = [], []
        ancestors = {root: []}
        for x in order[1:].tolist():
            col[x] = len(col)
            ancestors[x] = ancestors[int(parent[x])] + [col[x]]
            rows += [x] * len(ancestors[x])
            cols += ancestors[x]
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n - 1))

    @cached_property
    def tree_incidence(self) -> sp.csr_matrix:
        """``D P``: edge gradients in terms of tree increments (entries in {-1, 0, 1})."""
        return (self.incidence @ self.tree_basis).tocsr()

    def grad(self, f: np.ndarray) -> np.ndarray:
        """Discrete gradient on edges."""
        return f[self.dst] - f[self.src]

    def check_vector(self, f, name: str = "vector") -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != (self.n,):
            raise DimensionMismatch(f"{name} has shape {f.shape}, expected ({self.n},)")
        return f

    def detailed_balance_residual(self) -> float:
        flow = self.edge_weight
        back = flow[self.reverse_edge]
        return float(np.max(np.abs(flow - back) / np.maximum(flow, back))) if self.n_edges else 0.0

    def stationarity_residual(self) -> float:
        return float(np.max(np.abs(self.generator.T @ self.pi)))

    def dense_rates(self) -> np.ndarray:
        return self.rate_matrix.toarray()


def _lookup(index: Mapping[str, int], key, n: int) -> int:
    name = str(key)
    if name in index:
        return index[name]
    if isinstance(key, (int, np.integer)) and 0 <= int(key) < n:
        return int(key)
    raise InvalidRate(f"unknown state {key!r}")


def _solve_reversible_measure(n: int, src, dst, rate) -> np.ndarray:
    # Propagate log pi along a BFS tree; exact for reversible chains, and any
    # non-reversible chain then fails the detailed-balance check.
    Q = sp.csr_matrix((rate, (src, dst)), shape=(n, n))
    QT = Q.T.tocsr()
    log_pi = np.full(n, np.nan)
    log_pi[0] = 0.0
    queue = deque([0])
    while queue:
        x = queue.popleft()
        row = slice(Q.indptr[x], Q.indptr[x + 1])
        for y, q in zip(Q.indices[row], Q.data[row]):
            if np.isnan(log_pi[y]):
                back = QT[x, y]  # Q(y, x)
                if back <= 0:
                    raise NotReversible(f"edge {x}->{y} has no reverse edge")
                log_pi[y] = log_pi[x] + np.log(q) - np.log(back)
                queue.append(y)
    log_pi -= log_pi.max()
    pi = np.exp(log_pi)
    return pi / pi.sum()


def build_triple(states: Sequence[Hashable], rate_entries: Iterable[tuple]) -> MarkovTriple:
    """Build and validate a reversible triple from ``(x, y, q)`` rate entries.

    ``pi`` is solved from the rates and detailed balance is then verified.
    Repeated entries for the same pair are summed.
    """
    names = tuple(str(s) for s in states)
    n = len(names)
    if n == 0:
        raise InvalidRate("empty state space")
    if n > MAX_STATES:
        raise TooLarge(f"{n} states exceeds the construction cap of {MAX_STATES}")
    index = {s: i for i, s in enumerate(names)}
    if len(index) != n:
        raise InvalidRate("duplicate state identifiers")
    rows, cols, vals = [], [], []
    for entry in rate_entries:
        x, y, q = entry
        i, j = _lookup(index, x, n), _lookup(index, y, n)
        q = float(q)
        if i == j:
            raise InvalidRate(f"diagonal rate entry at state {names[i]!r}")
        if not np.isfinite(q) or q < 0:
            raise InvalidRate(f"invalid rate {q} on {names[i]!r}->{names[j]!r}")
        if q > 0:
            rows.append(i)
            cols.append(j)
            vals.append(q)
    Q = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    Q.sum_duplicates()
    Q.eliminate_zeros()
    if n > 1:
        n_comp, _ = csgraph.connected_components(Q, directed=True, connection="strong")
        if n_comp != 1:
            raise NotIrreducible(f"rate graph has {n_comp} strongly connected components")
    coo = Q.tocoo()
    order = np.lexsort((coo.col, coo.row))
    src = coo.row[order].astype(np.int64)
    dst = coo.col[order].astype(np.int64)
    rate = coo.data[order].astype(float)
    pi = _solve_reversible_measure(n, src, dst, rate)
    triple = MarkovTriple(
        states=names,
        src=_frozen(src),
        dst=_frozen(dst),
        rate=_frozen(rate),
        pi=_frozen(pi),
        index=index,
    )
    if n > 1:
        try:
            resid = triple.detailed_balance_residual()
        except KeyError as exc:
            raise NotReversible(f"edge without a reverse edge: {exc}") from None
        if resid > CONSTRUCTION_RTOL:
            raise NotReversible(f"detailed balance residual {resid:.3e} exceeds {CONSTRUCTION_RTOL}")
    return triple


def generator_apply(t: MarkovTriple, f) -> np.ndarray:
    f = t.check_vector(f, "f")
    return t.generator @ f


def dirichlet_form(t: MarkovTriple, phi, psi) -> float:
    phi = t.check_vector(phi, "phi")
    psi = t.check_vector(psi, "psi")
    return 0.5 * float(np.sum(t.edge_weight * t.grad(phi) * t.grad(psi)))


def symmetrized_generator(t: MarkovTriple) -> sp.csr_matrix:
    """``Pi^{1/2} (-L) Pi^{-1/2}``, symmetric by detailed balance."""
    r = np.sqrt(t.pi)
    S = sp.diags(r) @ (-t.generator) @ sp.diags(1.0 / r)
    return (0.5 * (S + S.T)).tocsr()


def spectral_gap(t: MarkovTriple) -> float:
    """Smallest nonzero eigenvalue of ``-L`` (the optimal Poincare constant)."""
    if t.n == 1:
        return float("inf")
    S = symmetrized_generator(t)
    if t.n <= MAX_DENSE_STATES:
        ev = np.linalg.eigvalsh(S.toarray())
        return float(ev[1])
    ev = spla.eigsh(S, k=2, sigma=-1e-3, which="LM", return_eigenvectors=False)
    return float(np.sort(ev)[1])


def validation_report(states, rate_entries) -> dict:
    """Validation summary that reports failures instead of raising."""
    report = {"reversible": False, "irreducible": False, "worst_detailed_balance_residual": float("nan")}
    try:
        t = build_triple(states, rate_entries)
    except NotIrreducible:
        return report
    except NotReversible as exc:
        report["irreducible"] = True
        report["error"] = str(exc)
        return report
    report.update(
        reversible=True,
        irreducible=True,
        worst_detailed_balance_residual=t.detailed_balance_residual(),
        n_states=t.n,
        n_edges=t.n_edges,
    )
    return report


def triple_from_spec(spec: Mapping) -> MarkovTriple:
    """Chain spec ``{"states": [...], "rates": [[x, y, q], ...]}``."""
    try:
        states = list(spec["states"])
        rates = [tuple(r) for r in spec["rates"]]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed chain spec: {exc}") from None
    if any(len(r) != 3 for r in rates):
        raise ParseError("rate entries must be [x, y, q] triples")
    return build_triple(states, rates)


def triple_from_json(text: str) -> MarkovTriple:
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc)) from None
    return triple_from_spec(spec)


# ----------------------------------------------------------------------------
# mapping representations


@dataclass(frozen=True, eq=False)
class MappingRepresentation:
    """Moves ``G`` acting on states, with rates ``c(x, g)`` and inverses.

    ``target[x, g]`` is the index of ``g x``; ``rates[x, g]`` is ``c(x, g)``;
    ``inverse[g]`` is the index of the inverse move.
    """

    base: MarkovTriple
    moves: tuple[str, ...]
    target: np.ndarray
    rates: np.ndarray
    inverse: np.ndarray

    @property
    def n_moves(self) -> int:
        return len(self.moves)

    def move_grad(self, f: np.ndarray) -> np.ndarray:
        """``(x, g) -> f(g x) - f(x)`` as an ``(n, |G|)`` array."""
        return f[self.target] - f[:, None]

    def apply_generator(self, f) -> np.ndarray:
        f = self.base.check_vector(f, "f")
        return np.sum(self.rates * self.move_grad(f), axis=1)

    def reversibility_residual(self) -> tuple[float, tuple[int, int] | None]:
        """Worst violation of the mapping reversibility identity on indicators.

        The identity is linear in the test function ``F(x, g)``, so checking
        every indicator ``1_{(x0, g0)}`` is exhaustive.
        """
        pi = self.base.pi
        n, m = self.rates.shape
        lhs = pi[:, None] * self.rates
        rhs = np.zeros((n, m))
        inv = np.broadcast_to(self.inverse[None, :], (n, m))
        np.add.at(rhs, (self.target.ravel(), inv.ravel()), lhs.ravel())
        diff = np.abs(lhs - rhs)
        k = int(np.argmax(diff))
        worst = float(diff.flat[k])
        return worst, (divmod(k, m) if worst > 0 else None)


def _as_table(spec, t: MarkovTriple, moves: Sequence[str], kind: str) -> np.ndarray:
    if callable(spec):
        return spec
    arr = np.asarray(spec)
    if arr.shape != (t.n, len(moves)):
        raise DimensionMismatch(f"{kind} table has shape {arr.shape}, expected ({t.n}, {len(moves)})")
    return arr


def build_mapping_representation(
    t: MarkovTriple,
    moves: Mapping[str, Callable[[str], str]] | Sequence[str],
    rates,
    inverse: Mapping[str, str] | Sequence[int],
    targets=None,
    tol: float = 1e-10,
) -> MappingRepresentation:
    """Validate a mapping representation of ``t``'s generator.

    ``moves`` is either a mapping ``name -> action`` (action maps a state
    identifier to a state identifier) or a sequence of names together with an
    ``(n, |G|)`` index table ``targets``.  ``rates`` is an ``(n, |G|)`` table
    or a callable ``(state, move) -> rate``; ``inverse`` maps each move to its
    inverse (by name or position).
    """
    if isinstance(moves, Mapping):
        names = tuple(moves)
        target = np.empty((t.n, len(names)), dtype=np.int64)
        for g, name in enumerate(names):
            action = moves[name]
            for x, s in enumerate(t.states):
                y = str(action(s))
                if y not in t.index:
                    raise BadInverse(f"move {name!r} maps {s!r} outside the state space")
                target[x, g] = t.index[y]
    else:
        names = tuple(moves)
        if targets is None:
            raise DimensionMismatch("a target table is required when moves are given by name")
        target = np.asarray(_as_table(targets, t, names, "target"), dtype=np.int64)
        if target.min() < 0 or target.max() >= t.n:
            raise BadInverse("target table points outside the state space")
    if callable(rates):
        c = np.array([[float(rates(s, g)) for g in names] for s in t.states]).reshape(t.n, len(names))
    else:
        c = np.asarray(_as_table(rates, t, names, "rate"), dtype=float)
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise InvalidRate("mapping rates must be finite and nonnegative")
    pos = {name: k for k, name in enumerate(names)}
    if isinstance(inverse, Mapping):
        inv = np.array([pos[str(inverse[name])] for name in names], dtype=np.int64)
    else:
        inv = np.asarray(inverse, dtype=np.int64)
    if inv.shape != (len(names),):
        raise BadInverse("inverse must assign one move to every move")

    # property 1: the moves reproduce Q off the diagonal
    x_idx = np.broadcast_to(np.arange(t.n)[:, None], c.shape)
    off = target != x_idx
    Qrep = sp.coo_matrix((c[off], (x_idx[off], target[off])), shape=(t.n, t.n)).tocsr()
    gap = (Qrep - t.rate_matrix).tocoo()
    scale = max(1.0, float(t.rate.max(initial=0.0)))
    if gap.nnz and np.abs(gap.data).max() > tol * scale:
        k = int(np.argmax(np.abs(gap.data)))
        r, col = gap.row[k], gap.col[k]
        raise GeneratorMismatch(
            f"representation rates differ from Q by {abs(gap.data[k]):.3e} "
            f"at {t.states[r]!r}->{t.states[col]!r}"
        )

    # property 2: inverse moves undo moves wherever the rate is positive
    active = c > 0
    back = target[target, np.broadcast_to(inv[None, :], c.shape)]
    bad = active & (back != x_idx)
    if np.any(bad):
        x, g = map(int, np.argwhere(bad)[0])
        raise BadInverse(f"inverse of {names[g]!r} does not undo it at {t.states[x]!r}")

    rep = MappingRepresentation(
        base=t, moves=names, target=_frozen(target), rates=_frozen(c), inverse=_frozen(inv)
    )
    # property 3
    worst, witness = rep.reversibility_residual()
    if worst > tol:
        x, g = witness
        raise ReversibilityIdentityFailed(
            f"reversibility identity fails by {worst:.3e} at ({t.states[x]!r}, {names[g]!r})",
            residual=worst,
            witness=(t.states[x], names[g]),
        )
    return rep


def transposition_representation(t: MarkovTriple) -> MappingRepresentation:
    """Representation by the swaps ``t_{x,y}`` of the two ends of each edge."""
    pairs = sorted({(min(a, b), max(a, b)) for a, b in zip(t.src.tolist(), t.dst.tolist())})
    n, m = t.n, len(pairs)
    target = np.tile(np.arange(n)[:, None], (1, m))
    c = np.zeros((n, m))
    Q = t.rate_matrix
    for g, (a, b) in enumerate(pairs):
        target[a, g], target[b, g] = b, a
        c[a, g], c[b, g] = Q[a, b], Q[b, a]
    names = [f"t[{t.states[a]},{t.states[b]}]" for a, b in pairs]
    return build_mapping_representation(t, names, c, np.arange(m), targets=target)
