"""Mahalanobis loss ``r' Sigma^{-1} r`` with its gradient, Hessian and the
per-leaf block sums that drive leaf-weight estimation.

The loss is quadratic in the predictions, so the second-order expansion used
to grow trees is exact::

    l(yhat + f) - l(yhat) = g'f + f'Hf / 2,   g = -2 Sigma^{-1} r,  H = 2 Sigma^{-1}
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .covariance import SpdFactor
from .errors import PartitionError, ValidationError

DENSE_CAP = 4096


@dataclass(frozen=True)
class LossState:
    residual: np.ndarray
    gradient: np.ndarray
    loss_value: float
    factor: SpdFactor
    hessian: Optional[np.ndarray] = None

    @property
    def n(self):
        return self.residual.shape[0]

    @property
    def dense(self):
        return self.hessian is not None

    def hessian_columns(self, cols):
        """``H[:, cols]``, from the dense matrix or by solving with the factor."""
        cols = np.asarray(cols, dtype=np.intp)
        if self.hessian is not None:
            return self.hessian[:, cols]
        e = np.zeros((self.n, cols.size))
        e[cols, np.arange(cols.size)] = 1.0
        return 2.0 * self.factor.solve(e)

    def hessian_block(self, rows, cols):
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        if self.hessian is not None:
            return self.hessian[np.ix_(rows, cols)]
        return self.hessian_columns(cols)[rows]

    def hessian_times(self, v):
        """``H @ v`` for a vector or matrix ``v``."""
        if self.hessian is not None:
            return self.hessian @ v
        return 2.0 * self.factor.solve(v)


def compute_loss_state(residual, factor: SpdFactor, dense_cap=DENSE_CAP) -> LossState:
    r = np.asarray(residual, dtype=float)
    if r.ndim != 1 or r.shape[0] != factor.n:
        raise ValidationError(f"residual length {r.shape} does not match covariance size {factor.n}")
    if r.shape[0] <= dense_cap:
        hess = 2.0 * factor.inverse()
        grad = -(hess @ r)
    else:
        hess = None
        grad = -2.0 * factor.solve(r)
    loss = factor.quad(r)
    for a in (r, grad):
        a.flags.writeable = False
    if hess is not None:
        hess.flags.writeable = False
    return LossState(r, grad, loss, factor, hess)


@dataclass(frozen=True)
class LeafBlocks:
    """Leaf partition with gradient sums ``G[p]`` and Hessian block sums ``S[p, q]``.

    ``colsum[:, q]`` caches ``sum_{j in I_q} h_ij`` for every row ``i``, which
    turns the block sums of a refined partition into sums over rows.
    """

    leaves: tuple
    G: np.ndarray
    S: np.ndarray
    colsum: np.ndarray
    state: LossState

    @property
    def T(self):
        return len(self.leaves)


def _check_partition(leaves, n):
    seen = np.zeros(n, dtype=np.int64)
    for leaf in leaves:
        if leaf.size == 0:
            raise PartitionError("empty leaf in partition")
        if leaf.min() < 0 or leaf.max() >= n:
            raise PartitionError("leaf index out of range")
        np.add.at(seen, leaf, 1)
    if np.any(seen > 1):
        raise PartitionError(f"index {int(np.flatnonzero(seen > 1)[0])} appears in several leaves")
    if np.any(seen == 0):
        raise PartitionError(f"index {int(np.flatnonzero(seen == 0)[0])} is not in any leaf")


def extract_blocks(state: LossState, partition: Sequence) -> LeafBlocks:
    leaves = tuple(np.asarray(p, dtype=np.intp) for p in partition)
    _check_partition(leaves, state.n)
    T = len(leaves)
    ind = np.zeros((state.n, T))
    for p, leaf in enumerate(leaves):
        ind[leaf, p] = 1.0
    colsum = state.hessian_times(ind)
    G = np.array([state.gradient[leaf].sum() for leaf in leaves])
    S = np.empty((T, T))
    for p, leaf in enumerate(leaves):
        S[p] = colsum[leaf].sum(axis=0)
    S = 0.5 * (S + S.T)
    return LeafBlocks(leaves, G, S, colsum, state)


def split_blocks(blocks: LeafBlocks, p: int, left) -> LeafBlocks:
    """Replace leaf ``p`` by ``left`` (kept at position ``p``) and its
    complement (appended as the last leaf).

    Only the rows of ``left`` and one set of Hessian columns are touched; the
    remaining sums follow by subtraction.
    """
    state = blocks.state
    leaf = blocks.leaves[p]
    left = np.asarray(left, dtype=np.intp)
    mask = np.isin(leaf, left)
    if left.size == 0 or left.size >= leaf.size or mask.sum() != left.size:
        raise ValidationError("left must be a proper non-empty subset of the leaf")
    L = leaf[mask]
    R = leaf[~mask]
    T = blocks.T

    c_L = state.hessian_columns(L).sum(axis=1)
    c_R = blocks.colsum[:, p] - c_L
    colsum = np.column_stack([blocks.colsum, c_R])
    colsum[:, p] = c_L

    G = np.append(blocks.G, 0.0)
    G_L = state.gradient[L].sum()
    G[p] = G_L
    G[T] = blocks.G[p] - G_L

    S_Lq = blocks.colsum[L].sum(axis=0)       # S[L, q] for the old leaves
    S_LL = c_L[L].sum()
    S = np.zeros((T + 1, T + 1))
    S[:T, :T] = blocks.S
    row_L = S_Lq.copy()
    row_R = blocks.S[p] - S_Lq
    S_LR = S_Lq[p] - S_LL
    S_RR = blocks.S[p, p] - S_LL - 2.0 * S_LR
    row_L[p] = S_LL
    row_R[p] = S_LR
    S[p, :T] = row_L
    S[:T, p] = row_L
    S[T, :T] = row_R
    S[:T, T] = row_R
    S[T, T] = S_RR

    leaves = blocks.leaves[:p] + (L,) + blocks.leaves[p + 1:] + (R,)
    return LeafBlocks(leaves, G, S, colsum, state)
