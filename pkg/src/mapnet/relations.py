"""Relation maps, the relation transfer module, and the guidance loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .errors import (
    InsufficientPairsError,
    InvalidEpisodeError,
    InvalidInputError,
)


@dataclass
class RelationMap:
    """Grid of relation vectors ``r_ij`` with a support/query partition.

    ``vectors`` has shape ``(..., n, n, c)``. The first ``support_count``
    nodes are supports. When ``complete`` is False only the support-support
    block carries information and every query-touching block is absent.
    """

    vectors: Any
    support_count: int
    complete: bool = True

    @property
    def n(self) -> int:
        return np.shape(value_of(self.vectors))[-2]

    @property
    def c(self) -> int:
        return np.shape(value_of(self.vectors))[-1]

    @property
    def query_count(self) -> int:
        return self.n - self.support_count

    def block(self, name: str):
        s = self.support_count
        if name != "ss" and not self.complete:
            raise InvalidInputError(f"block '{name}' is absent from this map")
        rows = slice(None, s) if name[0] == "s" else slice(s, None)
        cols = slice(None, s) if name[1] == "s" else slice(s, None)
        return ad.index(self.vectors, (Ellipsis, rows, cols, slice(None)))

    @property
    def ss(self):
        if self.support_count == self.n:
            return self.vectors
        return self.block("ss")


def relation_map(Z, support_count: int) -> RelationMap:
    """Elementwise squared differences ``(z_i - z_j)**2`` for every pair."""
    shape = np.shape(value_of(Z))
    if len(shape) < 2:
        raise InvalidInputError(f"embeddings must be at least 2-D, got {shape}")
    n, c = shape[-2:]
    if not 1 <= support_count <= n:
        raise InvalidInputError(f"support_count {support_count} outside [1, {n}]")
    lead = shape[:-2]
    diff = ad.reshape(Z, lead + (n, 1, c)) - ad.reshape(Z, lead + (1, n, c))
    return RelationMap(ad.square(diff), support_count)


def semantic_support_relations(za_support) -> RelationMap:
    """Support-support block of the semantic relation map.

    Query semantics are unknown, so every query-touching block is absent.
    """
    if za_support is None:
        raise InvalidEpisodeError("support semantic embeddings are missing")
    shape = np.shape(value_of(za_support))
    if len(shape) < 2 or shape[-2] == 0:
        raise InvalidEpisodeError("support semantic embeddings are missing")
    rel = relation_map(za_support, shape[-2])
    rel.complete = False
    return rel


def mlp(x, p: Mapping):
    """affine -> softplus -> affine, applied over the last axis."""
    hidden = ad.softplus(ad.matmul(x, p["W1"]) + p["b1"])
    return ad.matmul(hidden, p["W2"]) + p["b2"]


def init_transfer(rng: np.random.Generator, c: int, scale: float = 1.0) -> dict:
    """Random c -> c transfer parameters (Glorot-style scaling)."""
    lim = scale * np.sqrt(6.0 / (2 * c))
    return {
        "W1": rng.uniform(-lim, lim, (c, c)),
        "b1": np.zeros((1, c)),
        "W2": rng.uniform(-lim, lim, (c, c)),
        "b2": np.zeros((1, c)),
    }


def _zero_diag(vectors, n):
    return vectors * (1.0 - np.eye(n))[:, :, None]


def transfer_relations(h: Mapping | None, rel: RelationMap) -> RelationMap:
    """Apply ``h`` to every relation vector; diagonal reset to zero.

    ``h=None`` is the identity hook and returns the map unchanged.
    """
    if h is None:
        return rel
    c_in = np.shape(value_of(h["W1"]))[0]
    c_out = np.shape(value_of(h["W2"]))[-1]
    if rel.c != c_in or c_out != c_in:
        raise InvalidInputError(
            f"transfer module maps {c_in}->{c_out}, relations have dim {rel.c}"
        )
    shape = np.shape(value_of(rel.vectors))
    flat = ad.reshape(rel.vectors, (-1, rel.c))
    out = ad.reshape(mlp(flat, h), shape)
    return RelationMap(_zero_diag(out, rel.n), rel.support_count, rel.complete)


def _pair_mse(a, b):
    """Mean over off-diagonal pairs of the per-pair mean squared difference."""
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    if sa[-3:] != sb[-3:]:
        raise InvalidInputError(f"block shapes differ: {sa} vs {sb}")
    n, c = sa[-2], sa[-1]
    if n < 2:
        raise InsufficientPairsError(
            f"need at least 2 support samples for pairwise terms, got {n}"
        )
    mask = (1.0 - np.eye(n))[:, :, None]
    sq = ad.square(a - b) * mask
    return ad.sum_(sq) / float(n * (n - 1) * c * int(np.prod(sa[:-3], dtype=int)))


def rg_loss(rectified_ss, semantic_ss):
    """MSE between rectified visual and semantic support-support relations.

    Diagonal pairs are excluded (both are identically zero there).
    """
    return _pair_mse(rectified_ss, semantic_ss)


def relation_constraint_loss(visual_ss, semantic_ss):
    """Same MSE as ``rg_loss`` but on untransferred visual relations."""
    return _pair_mse(visual_ss, semantic_ss)
