"""Graph construction and closed-form label propagation.

All functions accept arrays or tape variables and may carry leading batch
axes (one graph per batch entry).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .errors import (
    IncompleteRelationMapError,
    InvalidInputError,
    IsolatedNodeError,
)

SIGMA_FLOOR = 1e-12


@dataclass
class PropagationGraph:
    n: int
    adjacency: np.ndarray
    normalized: np.ndarray
    propagation: np.ndarray
    alpha: float
    sigma_sq: np.ndarray

    def propagation_report(self) -> np.ndarray:
        """Propagation matrix with round-off negatives clamped to zero."""
        return np.maximum(self.propagation, 0.0)


def _offdiag_mask(n):
    return 1.0 - np.eye(n)


def _check_square(x, what, min_n=1):
    shape = np.shape(value_of(x))
    if len(shape) < 2 or shape[-1] != shape[-2]:
        raise InvalidInputError(f"{what} must be square, got {shape}")
    if shape[-1] < min_n:
        raise InvalidInputError(f"{what} needs at least {min_n} nodes, got {shape[-1]}")
    return shape[-1]


def _gaussian(dist, n, rescale):
    sigma_sq = ad.offdiag_std(dist, SIGMA_FLOOR)
    scaled = dist / ad.reshape(sigma_sq, np.shape(value_of(sigma_sq)) + (1, 1))
    if rescale:
        # global factor exp(shift) per graph; cancels in symmetric_normalize,
        # so it is held constant (its exact derivative through S is zero)
        sv = np.asarray(value_of(scaled))
        off = np.where(_offdiag_mask(n) > 0, sv, np.inf)
        shift = off.min(axis=(-2, -1), keepdims=True)
        scaled = scaled - shift
    mask = _offdiag_mask(n)
    # diagonal is masked before exp so a large shift cannot overflow there
    return ad.exp(-(scaled * mask)) * mask, sigma_sq


def gaussian_adjacency(d2, rescale: bool = False):
    """Gaussian similarity graph ``exp(-d2 / sigma_sq)`` with a zero diagonal.

    ``sigma_sq`` is the population std of the off-diagonal squared
    distances (1.0 when they are all equal). Returns ``(A, sigma_sq)``.

    With ``rescale=True`` each graph's adjacency is multiplied by a positive
    constant so its largest entry is 1. The normalized adjacency is
    unchanged, but degrees can no longer underflow when all distances are
    large compared with their spread.
    """
    n = _check_square(d2, "distance matrix", min_n=2)
    return _gaussian(d2, n, rescale)


def adjacency_from_relations(rel, rescale: bool = False):
    """Adjacency from the l1 norms of (rectified) relation vectors."""
    if not rel.complete:
        raise IncompleteRelationMapError(
            "relation map lacks query blocks; cannot build a full adjacency"
        )
    if rel.n < 2:
        raise InvalidInputError("adjacency needs at least 2 nodes")
    l1 = ad.sum_(ad.abs_(rel.vectors), axis=-1)
    return _gaussian(l1, rel.n, rescale)


def symmetric_normalize(A):
    """``D^{-1/2} A D^{-1/2}`` with ``D`` the row-sum degree matrix."""
    n = _check_square(A, "adjacency")
    deg = ad.sum_(A, axis=-1)
    dv = np.asarray(value_of(deg))
    bad = np.argwhere(~(dv > 0))
    if bad.size:
        raise IsolatedNodeError(int(bad[0][-1]))
    inv_sqrt = ad.power(deg, -0.5)
    lead = dv.shape[:-1]
    return A * ad.reshape(inv_sqrt, lead + (n, 1)) * ad.reshape(inv_sqrt, lead + (1, n))


def propagation_matrix(S, alpha: float):
    """``(1 - alpha) (I - alpha S)^{-1}``, via a linear solve."""
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    n = _check_square(S, "normalized adjacency")
    eye = np.eye(n)
    return (1.0 - alpha) * ad.solve(eye - alpha * S, eye)


def propagate(P, Z):
    """Propagated embeddings ``P @ Z``."""
    ps, zs = np.shape(value_of(P)), np.shape(value_of(Z))
    if ps[-1] != zs[-2]:
        raise InvalidInputError(f"cannot propagate {zs} with a {ps} matrix")
    return ad.matmul(P, Z)


def neumann_propagate(S, alpha: float, Z, k: int) -> np.ndarray:
    """Truncated series ``(1 - alpha) * sum_{t=0..k} alpha^t S^t Z``."""
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    S = np.asarray(S, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if S.shape[-1] != Z.shape[-2]:
        raise InvalidInputError(f"shape mismatch S {S.shape}, Z {Z.shape}")
    term = Z.copy()
    total = Z.copy()
    for _ in range(k):
        term = alpha * (S @ term)
        total = total + term
    return (1.0 - alpha) * total


def build_graph(A, alpha: float, sigma_sq) -> PropagationGraph:
    """Bundle normalization and propagation for one adjacency (untaped)."""
    A = np.asarray(value_of(A))
    S = symmetric_normalize(A)
    P = propagation_matrix(S, alpha)
    return PropagationGraph(A.shape[-1], A, S, P, alpha, np.asarray(value_of(sigma_sq)))


def spectral_radius(S, iters: int = 500) -> float:
    """Power-iteration estimate of the largest |eigenvalue| of symmetric S."""
    S = np.asarray(S, dtype=np.float64)
    v = np.ones(S.shape[-1]) / np.sqrt(S.shape[-1])
    lam = 0.0
    for _ in range(iters):
        w = S @ (S @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        lam = nrm
    return float(np.sqrt(lam))
