"""Dense tensor algebra: unfolding, folding, FCTN reconstruction and finite differences.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Modes are numbered from 0.

Unfolding convention
--------------------
``unfold(t, k)`` returns an ``I_k x prod(I_j, j != k)`` matrix whose columns
enumerate the remaining modes in increasing mode order with the last listed
mode varying fastest. ``fold`` is its exact inverse.

FCTN factor layout
------------------
For an order-N tensor with pairwise ranks ``R[j, k]`` the factor ``G_k`` is an
order-N tensor whose axis ``m`` has extent ``R[m, k]`` for ``m != k`` and
extent ``I_k`` at axis ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "FactorSet",
    "diff_operator",
    "fctn_reconstruct",
    "fctn_labels",
    "factor_shape",
    "fold",
    "frobenius_norm",
    "rank_matrix",
    "unfold",
    "validate_rank_matrix",
]


def _check_mode(ndim: int, k: int) -> None:
    if not 0 <= k < ndim:
        raise ValueError(f"mode {k} out of range for an order-{ndim} tensor")


def unfold(t: np.ndarray, k: int) -> np.ndarray:
    """Mode-``k`` unfolding of ``t`` (see module docstring for column order)."""
    t = np.asarray(t, dtype=np.float64)
    _check_mode(t.ndim, k)
    return np.ascontiguousarray(np.moveaxis(t, k, 0)).reshape(t.shape[k], -1)


def fold(m: np.ndarray, k: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of the given ``shape``."""
    m = np.asarray(m, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    _check_mode(len(shape), k)
    rest = shape[:k] + shape[k + 1:]
    n_cols = int(np.prod(rest, dtype=np.int64))
    if m.ndim != 2 or m.shape != (shape[k], n_cols):
        raise ValueError(
            f"cannot fold a {m.shape} matrix at mode {k} into shape {shape}; "
            f"expected ({shape[k]}, {n_cols})"
        )
    return np.ascontiguousarray(np.moveaxis(m.reshape((shape[k],) + rest), 0, k))


def diff_operator(n: int) -> np.ndarray:
    """Non-circular forward-difference matrix of shape ``(n - 1, n)``."""
    if n < 2:
        raise ValueError(f"difference operator needs n >= 2, got {n}")
    d = np.zeros((n - 1, n))
    idx = np.arange(n - 1)
    d[idx, idx] = -1.0
    d[idx, idx + 1] = 1.0
    return d


def frobenius_norm(t: np.ndarray) -> float:
    t = np.asarray(t, dtype=np.float64)
    return float(np.sqrt(np.sum(t * t)))


def rank_matrix(n: int, rank: int | Sequence[Sequence[int]]) -> np.ndarray:
    """Build a symmetric rank matrix from a scalar or a full ``n x n`` nested list."""
    if np.isscalar(rank):
        r = np.full((n, n), int(rank), dtype=np.int64)
        np.fill_diagonal(r, 0)
    else:
        r = np.array(rank, dtype=np.int64)
    validate_rank_matrix(r, n)
    return r


def validate_rank_matrix(r: np.ndarray, n: int | None = None) -> None:
    r = np.asarray(r)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError(f"rank matrix must be square, got shape {r.shape}")
    if n is not None and r.shape[0] != n:
        raise ValueError(f"rank matrix is {r.shape[0]}x{r.shape[0]}, expected {n}x{n}")
    if not np.array_equal(r, r.T):
        raise ValueError("rank matrix must be symmetric")
    if np.any(np.diag(r) != 0):
        raise ValueError("rank matrix must have a zero diagonal")
    off = r[~np.eye(r.shape[0], dtype=bool)]
    if np.any(off < 1):
        raise ValueError("off-diagonal ranks must be >= 1")


def factor_shape(shape: Sequence[int], ranks: np.ndarray, k: int) -> tuple[int, ...]:
    """Shape of FCTN factor ``G_k`` for a tensor of ``shape`` and rank matrix ``ranks``."""
    return tuple(int(shape[k]) if m == k else int(ranks[m, k]) for m in range(len(shape)))


# einsum accepts integer labels below 52; the batch axis takes the last one
BATCH_LABEL = 51


def fctn_labels(n: int) -> tuple[list[list[int]], list[int]]:
    """Integer einsum labels for the N factors and the reconstructed tensor.

    Data index ``i_k`` is label ``k``; the pair index shared by modes ``j < k``
    gets a unique label ``>= n``.
    """
    if n + n * (n - 1) // 2 > BATCH_LABEL:
        raise ValueError(f"order-{n} FCTN needs more einsum labels than numpy provides")
    pair = {}
    nxt = n
    for j in range(n):
        for k in range(j + 1, n):
            pair[j, k] = pair[k, j] = nxt
            nxt += 1
    factor_labels = [[k if m == k else pair[m, k] for m in range(n)] for k in range(n)]
    return factor_labels, list(range(n))


@dataclass(frozen=True)
class FactorSet:
    """FCTN factors ``G_0..G_{N-1}`` together with their rank matrix."""

    ranks: np.ndarray
    factors: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "ranks", np.asarray(self.ranks, dtype=np.int64))
        object.__setattr__(
            self, "factors", tuple(np.asarray(g, dtype=np.float64) for g in self.factors)
        )
        self.validate()

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(g.shape[k] for k, g in enumerate(self.factors))

    def validate(self) -> None:
        n = len(self.factors)
        validate_rank_matrix(self.ranks, n)
        for k, g in enumerate(self.factors):
            if g.ndim != n:
                raise ValueError(f"factor {k} has order {g.ndim}, expected {n}")
            for m in range(n):
                if m != k and g.shape[m] != self.ranks[m, k]:
                    raise ValueError(
                        f"factor {k} axis {m} has extent {g.shape[m]} but "
                        f"R[{m},{k}] = {self.ranks[m, k]}"
                    )


def fctn_reconstruct(f: FactorSet) -> np.ndarray:
    """Contract all FCTN factors into the full tensor.

    Factors are contracted sequentially in mode order; after absorbing factor
    ``k`` every pair index ``(j, k)`` with ``j < k`` has been summed out.
    """
    f.validate()
    return contract_factors(list(f.factors))


def contract_factors(factors: Sequence[np.ndarray], batch: bool = False) -> np.ndarray:
    """Sequential FCTN contraction; with ``batch=True`` every factor carries a leading batch axis."""
    n = len(factors)
    flabels, out = fctn_labels(n)
    lead = [BATCH_LABEL] if batch else []
    acc = factors[0]
    acc_labels = lead + flabels[0]
    for k in range(1, n):
        keep = set(range(k + 1))
        for j in range(k + 1):
            for m in range(k + 1, n):
                keep.add(flabels[m][j])
        nxt_labels = lead + [l for l in acc_labels[len(lead):] + flabels[k] if l in keep]
        nxt_labels = lead + list(dict.fromkeys(nxt_labels[len(lead):]))
        acc = np.einsum(acc, acc_labels, factors[k], lead + flabels[k], nxt_labels)
        acc_labels = nxt_labels
    perm = [acc_labels.index(l) for l in lead + out]
    return np.ascontiguousarray(np.transpose(acc, perm))
