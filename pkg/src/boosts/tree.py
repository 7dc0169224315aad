"""Regression trees grown against a dense Hessian.

Every leaf weight depends on every other one through the Hessian block sums,
so each candidate structure is a ``(T+1) x (T+1)`` system. The candidates of
one leaf and feature are evaluated together: prefix sums over the
feature-sorted leaf give the gradient and block sums of every left part at
once. The consistent form then scores each candidate with a Schur
complement against the current system; the literal form solves them as one
batch.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import LeafSolveError, ModelFormatError, ValidationError
from .loss import LeafBlocks, LossState, extract_blocks, split_blocks

log = logging.getLogger(__name__)

# A split must lower the objective by more than this (relative) amount, and
# candidates within it of the best one count as tied.
REL_TOL = 1e-11
_BATCH = 256


class SystemForm(str, enum.Enum):
    CONSISTENT = "consistent"
    PAPER_LITERAL = "paper_literal"


@dataclass(frozen=True)
class GrowConfig:
    lam: float = 0.0
    gamma: float = 0.0
    max_leaves: int = 64
    min_leaf_size: int = 5
    system_form: SystemForm = SystemForm.CONSISTENT

    def __post_init__(self):
        object.__setattr__(self, "system_form", SystemForm(self.system_form))
        if not (self.lam >= 0 and self.gamma >= 0):
            raise ValidationError("lambda and gamma must be non-negative")
        if self.max_leaves < 1 or self.min_leaf_size < 1:
            raise ValidationError("max_leaves and min_leaf_size must be positive")

    def to_dict(self):
        return {"lambda": self.lam, "gamma": self.gamma, "max_leaves": self.max_leaves,
                "min_leaf_size": self.min_leaf_size, "system_form": self.system_form.value}

    @classmethod
    def from_dict(cls, obj):
        return cls(lam=obj["lambda"], gamma=obj["gamma"], max_leaves=obj["max_leaves"],
                   min_leaf_size=obj["min_leaf_size"], system_form=obj["system_form"])


@dataclass(frozen=True)
class Split:
    feature_index: int
    threshold: float


def system_matrix(S, lam, form=SystemForm.CONSISTENT):
    """Leaf-weight system matrix; works on a single ``(T, T)`` or a batch."""
    S = np.asarray(S, dtype=float)
    T = S.shape[-1]
    eye = np.eye(T)
    if SystemForm(form) is SystemForm.CONSISTENT:
        return S + lam * eye
    off = 0.5 * (S + lam)
    return np.where(eye.astype(bool), S + lam, off)


def solve_leaf_weights(blocks: LeafBlocks, lam, form=SystemForm.CONSISTENT):
    """Optimal leaf weights for a fixed structure.

    The consistent form solves ``(S + lam I) w = -G``, the stationarity
    condition of ``G'w + w'Sw/2 + lam |w|^2 / 2``. The literal form uses the
    printed system with ``lam`` also added to the halved off-diagonal terms.
    """
    form = SystemForm(form)
    A = system_matrix(blocks.S, lam, form)
    rhs = -np.asarray(blocks.G, dtype=float)
    if form is SystemForm.CONSISTENT:
        if A.shape == (1, 1) and A[0, 0] > 0:
            return rhs / A[0, 0]
        try:
            c = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError):
            ev = float(np.linalg.eigvalsh(A).min()) if np.all(np.isfinite(A)) else float("nan")
            raise LeafSolveError(f"leaf system not positive definite (smallest eigenvalue {ev:.3g})",
                                 smallest_pivot=ev) from None
        return scipy.linalg.cho_solve(c, rhs)
    lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    pivots = np.abs(np.diag(lu))
    smallest = float(pivots.min())
    if smallest <= np.finfo(float).eps * max(float(pivots.max()), 1e-300) * A.shape[0]:
        raise LeafSolveError(f"leaf system is singular (smallest pivot {smallest:.3g})",
                             smallest_pivot=smallest)
    return scipy.linalg.lu_solve((lu, piv), rhs)


def objective(blocks: LeafBlocks, w, lam, gamma):
    """``G'w + w'Sw / 2 + gamma T + lam |w|^2 / 2``."""
    w = np.asarray(w, dtype=float)
    if w.shape != (blocks.T,):
        raise ValidationError(f"expected {blocks.T} weights, got shape {w.shape}")
    return float(blocks.G @ w + 0.5 * w @ blocks.S @ w + gamma * blocks.T + 0.5 * lam * (w @ w))


def _split_positions(xs_sorted, min_leaf_size):
    """Left-part sizes ``k`` that cut between distinct values and respect the leaf floor."""
    size = xs_sorted.shape[0]
    k = np.arange(min_leaf_size, size - min_leaf_size + 1)
    if k.size == 0:
        return k
    return k[xs_sorted[k - 1] < xs_sorted[k]]


def _midpoints(lo, hi):
    thr = lo + 0.5 * (hi - lo)
    # rounding can land the midpoint on the lower value
    return np.where(thr > lo, thr, hi)


def enumerate_candidates(features, leaf, min_leaf_size=1):
    """All midpoint splits of ``leaf`` leaving ``min_leaf_size`` rows per side."""
    X = np.asarray(features, dtype=float)
    leaf = np.asarray(leaf, dtype=np.intp)
    out = []
    for f in range(X.shape[1]):
        xs = np.sort(X[leaf, f])
        k = _split_positions(xs, min_leaf_size)
        for t in _midpoints(xs[k - 1], xs[k]):
            out.append(Split(f, float(t)))
    return out


@dataclass
class Tree:
    """Binary tree stored as parallel node arrays.

    Internal nodes have ``feature >= 0`` and send ``x[feature] < threshold``
    to ``left``. Leaf nodes carry ``leaf`` (an index into ``leaf_weights``).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf: np.ndarray
    leaf_weights: np.ndarray
    leaf_assignment: np.ndarray = None
    growth_objectives: list = field(default_factory=list)

    @property
    def n_leaves(self):
        return int(self.leaf_weights.shape[0])

    @property
    def n_features(self):
        return int(self.feature.max()) + 1 if np.any(self.feature >= 0) else 0

    def apply(self, X):
        """Leaf index reached by every row of ``X``."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(X.shape[0], dtype=np.intp)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] < self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active[rows] = self.feature[node[rows]] >= 0
        return self.leaf[node]

    def predict(self, X):
        return self.leaf_weights[self.apply(X)]

    def scaled(self, factor):
        return Tree(self.feature, self.threshold, self.left, self.right, self.leaf,
                    self.leaf_weights * factor, self.leaf_assignment, list(self.growth_objectives))

    def to_dict(self):
        def node(i):
            if self.feature[i] < 0:
                p = int(self.leaf[i])
                return {"leaf": p, "weight": float(self.leaf_weights[p])}
            return {"feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
                    "left": node(int(self.left[i])), "right": node(int(self.right[i]))}
        return node(0)

    @classmethod
    def from_dict(cls, obj):
        feature, threshold, left, right, leaf = [], [], [], [], []
        weights = {}

        def visit(d, path):
            if not isinstance(d, dict):
                raise ModelFormatError(f"tree node at {path} is not an object")
            i = len(feature)
            feature.append(-1)
            threshold.append(np.nan)
            left.append(-1)
            right.append(-1)
            leaf.append(-1)
            if "weight" in d:
                p = int(d.get("leaf", len(weights)))
                weights[p] = float(d["weight"])
                leaf[i] = p
                return i
            try:
                feature[i] = int(d["feature"])
                threshold[i] = float(d["threshold"])
                left[i] = visit(d["left"], path + ".left")
                right[i] = visit(d["right"], path + ".right")
            except (KeyError, TypeError, ValueError) as exc:
                raise ModelFormatError(f"malformed tree node at {path}: {exc}") from None
            return i

        visit(obj, "$")
        T = len(weights)
        if sorted(weights) != list(range(T)):
            raise ModelFormatError("leaf indices are not 0..T-1")
        return cls(np.array(feature, dtype=np.intp), np.array(threshold, dtype=float),
                   np.array(left, dtype=np.intp), np.array(right, dtype=np.intp),
                   np.array(leaf, dtype=np.intp), np.array([weights[p] for p in range(T)]))


# ---------------------------------------------------------------------------
# growth
# ---------------------------------------------------------------------------

@dataclass
class _LeafCache:
    """Structure-independent data for one leaf and feature."""

    rows: np.ndarray        # leaf rows sorted by the feature
    k: np.ndarray           # admissible left sizes
    thresholds: np.ndarray
    s_ll: np.ndarray        # Hessian sum over the left part, per k


def _leaf_cache(state: LossState, X, leaf, f, min_leaf_size):
    order = np.argsort(X[leaf, f], kind="stable")
    rows = leaf[order]
    xs = X[rows, f]
    k = _split_positions(xs, min_leaf_size)
    if k.size == 0:
        return _LeafCache(rows, k, np.empty(0), np.empty(0))
    # only the top-left block up to the largest k is ever needed
    kmax = int(k.max())
    Hs = state.hessian_block(rows[:kmax], rows[:kmax])
    acc = 2.0 * np.tril(Hs, -1).sum(axis=1) + np.diag(Hs)
    s_ll = np.cumsum(acc)[k - 1]
    return _LeafCache(rows, k, _midpoints(xs[k - 1], xs[k]), s_ll)


def _evaluate(blocks: LeafBlocks, p, cache: _LeafCache, cfg: GrowConfig, Minv=None):
    """Objective of every candidate split of leaf ``p`` along one feature."""
    if cache.k.size == 0:
        return np.empty(0)
    T = blocks.T
    rows, k = cache.rows, cache.k
    g_pre = np.cumsum(blocks.state.gradient[rows])[k - 1]
    c_pre = np.cumsum(blocks.colsum[rows], axis=0)[k - 1]      # S[L, q], old leaves
    S, G = blocks.S, blocks.G
    if SystemForm(cfg.system_form) is SystemForm.CONSISTENT:
        if Minv is None:
            Minv = _bordered_inverse(S, p, cfg.lam)
        return _evaluate_bordered(S, G, p, g_pre, c_pre, cache.s_ll, cfg, Minv)
    out = np.empty(k.size)
    for start in range(0, k.size, _BATCH):
        sl = slice(start, start + _BATCH)
        c = c_pre[sl].shape[0]
        s_ll = cache.s_ll[sl]
        s_lp = c_pre[sl, p]
        Gc = np.tile(np.append(G, 0.0), (c, 1))
        Gc[:, p] = g_pre[sl]
        Gc[:, T] = G[p] - g_pre[sl]
        row_L = c_pre[sl].copy()
        row_L[:, p] = s_ll
        row_R = S[p][None, :] - c_pre[sl]
        row_R[:, p] = s_lp - s_ll
        Sc = np.zeros((c, T + 1, T + 1))
        Sc[:, :T, :T] = S
        Sc[:, p, :T] = row_L
        Sc[:, :T, p] = row_L
        Sc[:, T, :T] = row_R
        Sc[:, :T, T] = row_R
        Sc[:, T, T] = S[p, p] - 2.0 * s_lp + s_ll
        A = system_matrix(Sc, cfg.lam, cfg.system_form)
        w = _batch_solve(A, -Gc)
        quad = np.einsum("ci,cij,cj->c", w, Sc, w)
        obj = (np.einsum("ci,ci->c", Gc, w) + 0.5 * quad
               + cfg.gamma * (T + 1) + 0.5 * cfg.lam * np.einsum("ci,ci->c", w, w))
        out[sl] = np.where(np.isfinite(obj), obj, np.inf)
    return out


def _bordered_inverse(S, p, lam):
    M = S + lam * np.eye(S.shape[0])
    M[p, p] += lam
    try:
        return np.linalg.inv(M)
    except np.linalg.LinAlgError:
        return None


def _evaluate_bordered(S, G, p, g_L, c_L, s_LL, cfg, Minv):
    """Consistent-form objectives via a Schur complement, O(T) per candidate.

    In the basis ``(1_q for q != p, 1_p, 1_L)`` the split system is the
    current one with ``lam`` added at ``(p, p)``, bordered by the column
    ``S[L, :] + lam e_p`` and corner ``s_LL + lam``. The optimum of
    ``G'w + w'Aw/2`` is ``-G'A^{-1}G/2`` in any basis.
    """
    T = S.shape[0]
    lam = cfg.lam
    if Minv is None:
        return np.full(g_L.size, np.inf)
    MG = Minv @ G
    b = c_L.copy()
    b[:, p] += lam
    Mb = b @ Minv
    num = g_L - b @ MG
    den = (s_LL + lam) - np.einsum("ci,ci->c", b, Mb)
    scale = np.abs(s_LL) + lam
    with np.errstate(divide="ignore", invalid="ignore"):
        obj = -0.5 * (G @ MG + num * num / den) + cfg.gamma * (T + 1)
    ok = np.isfinite(obj) & (den > 64 * np.finfo(float).eps * scale)
    return np.where(ok, obj, np.inf)


def _batch_solve(A, b):
    try:
        return np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        w = np.full(b.shape, np.nan)
        for i in range(A.shape[0]):
            try:
                w[i] = np.linalg.solve(A[i], b[i])
            except np.linalg.LinAlgError:
                pass
        return w


def grow_tree(state: LossState, features, cfg: GrowConfig, workers=1) -> Tree:
    """Best-first growth: at each step apply the single split (over all leaves,
    features and thresholds) with the lowest objective, as long as it lowers
    the current objective.

    Ties are resolved by lowest feature index, then lowest threshold, then
    lowest leaf index.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[0] != state.n:
        raise ValidationError(f"features shape {X.shape} does not match {state.n} rows")
    m = X.shape[1]
    blocks = extract_blocks(state, [np.arange(state.n)])
    w = solve_leaf_weights(blocks, cfg.lam, cfg.system_form)
    current = objective(blocks, w, cfg.lam, cfg.gamma)
    history = [current]

    feature, threshold, left, right, leaf_of = [-1], [np.nan], [-1], [-1], [0]
    leaf_node = [0]
    caches = [dict()]
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while blocks.T < cfg.max_leaves:
            tasks = [(p, f) for p in range(blocks.T) for f in range(m)
                     if blocks.leaves[p].size >= 2 * cfg.min_leaf_size]
            if not tasks:
                break

            minv = {}
            if SystemForm(cfg.system_form) is SystemForm.CONSISTENT:
                for q in {t[0] for t in tasks}:
                    minv[q] = _bordered_inverse(blocks.S, q, cfg.lam)

            def run(task, blocks=blocks, minv=minv):
                p, f = task
                cache = caches[p].get(f)
                if cache is None:
                    cache = _leaf_cache(state, X, blocks.leaves[p], f, cfg.min_leaf_size)
                    caches[p][f] = cache
                return _evaluate(blocks, p, cache, cfg, minv.get(p))

            results = list(pool.map(run, tasks)) if pool else [run(t) for t in tasks]
            best = _select(tasks, results, caches, current)
            for p in range(blocks.T):
                objs = [r for (q, _), r in zip(tasks, results) if q == p and r.size]
                if objs and not any(np.isfinite(r).any() for r in objs):
                    log.info("every candidate system of leaf %d is singular; left unsplit", p)
            if best is None:
                break
            p, f, j = best
            cache = caches[p][f]
            L = cache.rows[: cache.k[j]]
            new_blocks = split_blocks(blocks, p, L)
            new_w = solve_leaf_weights(new_blocks, cfg.lam, cfg.system_form)
            new_obj = objective(new_blocks, new_w, cfg.lam, cfg.gamma)

            node = leaf_node[p]
            T = blocks.T
            feature[node], threshold[node], leaf_of[node] = f, float(cache.thresholds[j]), -1
            for side, q in (("left", p), ("right", T)):
                feature.append(-1)
                threshold.append(np.nan)
                left.append(-1)
                right.append(-1)
                leaf_of.append(q)
                child = len(feature) - 1
                if side == "left":
                    left[node] = child
                    leaf_node[p] = child
                else:
                    right[node] = child
                    leaf_node.append(child)
            caches[p] = dict()
            caches.append(dict())
            blocks, w, current = new_blocks, new_w, new_obj
            history.append(current)
    finally:
        if pool:
            pool.shutdown()

    assignment = np.empty(state.n, dtype=np.intp)
    for p, rows in enumerate(blocks.leaves):
        assignment[rows] = p
    return Tree(np.array(feature, dtype=np.intp), np.array(threshold, dtype=float),
                np.array(left, dtype=np.intp), np.array(right, dtype=np.intp),
                np.array(leaf_of, dtype=np.intp), np.asarray(w, dtype=float),
                assignment, history)


def _select(tasks, results, caches, current):
    """Pick the winning ``(leaf, feature, candidate)`` or None if nothing improves."""
    objs = [r for r in results if r.size]
    if not objs:
        return None
    best = min(float(r.min()) for r in objs)
    if not np.isfinite(best):
        return None
    scale = max(abs(best), abs(current), 1e-300)
    if not current - best > REL_TOL * scale:
        return None
    cutoff = best + REL_TOL * scale
    winner, key = None, None
    for (p, f), r in zip(tasks, results):
        for j in np.flatnonzero(r <= cutoff):
            cand = (f, float(caches[p][f].thresholds[j]), p)
            if key is None or cand < key:
                key, winner = cand, (p, f, int(j))
    return winner
