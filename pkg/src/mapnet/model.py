"""Learnable components and the full modal-alternating forward pass.

Four MLPs are learned: a visual encoder ``f``, a semantic encoder ``g``, a
relation transfer map ``h`` and a fusion weight learner ``w``. The forward
pass builds one graph per query (all supports plus that query), propagates
both modalities through the same propagation matrix, fuses them with a
per-sample convex weight and classifies against class prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from . import graph
from . import relations as rel
from .autodiff import Tape, value_of
from .errors import ConfigError, InvalidEpisodeError, InvalidInputError
from .relations import mlp

PROB_FLOOR = 1e-12
AUX_MODES = ("none", "instance-constraint", "relation-constraint")
COMPONENTS = ("f", "g", "h", "w")
LAYER_KEYS = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class AblationMode:
    vp: bool = True
    sp: bool = True
    rg: bool = True
    aux: str = "none"

    def __post_init__(self):
        if self.aux not in AUX_MODES:
            raise ConfigError(f"aux must be one of {AUX_MODES}", key="aux")
        if self.rg and not (self.vp or self.sp):
            raise ConfigError("rg requires vp or sp", key="rg")

    @property
    def propagates(self) -> bool:
        return self.vp or self.sp

    @property
    def label(self) -> str:
        parts = [n.upper() for n in ("vp", "sp", "rg") if getattr(self, n)]
        name = "+".join(parts) or "baseline"
        if self.aux != "none":
            name += "+" + {"instance-constraint": "IC", "relation-constraint": "RC"}[self.aux]
        return name


# Component ablation rows: baseline first, full model last.
COMPONENT_MODES = (
    AblationMode(False, False, False),
    AblationMode(True, False, False),
    AblationMode(False, True, False),
    AblationMode(True, True, False),
    AblationMode(False, True, True),
    AblationMode(True, True, True),
)
CONSTRAINT_MODES = (
    AblationMode(True, True, False, "instance-constraint"),
    AblationMode(True, True, False, "relation-constraint"),
)


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, (fan_in, fan_out))


def init_mlp(rng, d_in, d_hidden, d_out) -> dict:
    return {
        "W1": _glorot(rng, d_in, d_hidden),
        "b1": np.zeros((1, d_hidden)),
        "W2": _glorot(rng, d_hidden, d_out),
        "b2": np.zeros((1, d_out)),
    }


@dataclass
class ModelParams:
    """Parameter arrays of f, g, h and w; ``h=None`` is the identity hook."""

    f: dict
    g: dict
    h: dict | None
    w: dict

    @classmethod
    def init(cls, rng: np.random.Generator, d_v: int, d_a: int, embed_dim: int = 32,
             hidden: int = 64, w_hidden: int = 32, identity_transfer: bool = False):
        return cls(
            f=init_mlp(rng, d_v, hidden, embed_dim),
            g=init_mlp(rng, d_a, hidden, embed_dim),
            h=None if identity_transfer else init_mlp(rng, embed_dim, embed_dim, embed_dim),
            w=init_mlp(rng, 2 * embed_dim, w_hidden, 1),
        )

    @property
    def embed_dim(self) -> int:
        return self.f["W2"].shape[1]

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for comp in COMPONENTS:
            d = getattr(self, comp)
            if d is None:
                continue
            for k in LAYER_KEYS:
                out[f"{comp}.{k}"] = d[k]
        return out

    @classmethod
    def from_named(cls, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        parts: dict[str, Any] = {c: None for c in COMPONENTS}
        for name, arr in arrays.items():
            comp, _, key = name.partition(".")
            if comp not in COMPONENTS or key not in LAYER_KEYS:
                raise InvalidInputError(f"unknown parameter '{name}'")
            parts.setdefault(comp, None)
            if parts[comp] is None:
                parts[comp] = {}
            parts[comp][key] = np.asarray(arr, dtype=np.float64)
        for comp in ("f", "g", "w"):
            if parts[comp] is None or set(parts[comp]) != set(LAYER_KEYS):
                raise InvalidInputError(f"component '{comp}' incomplete")
        if parts["h"] is not None and set(parts["h"]) != set(LAYER_KEYS):
            raise InvalidInputError("component 'h' incomplete")
        params = cls(**parts)
        params.check()
        return params

    def check(self):
        c = self.embed_dim
        if self.g["W2"].shape[1] != c:
            raise InvalidInputError("visual and semantic embedding dims differ")
        if self.h is not None and self.h["W1"].shape[0] != c:
            raise InvalidInputError("transfer module dim differs from embedding dim")
        if self.w["W1"].shape[0] != 2 * c:
            raise InvalidInputError("weight learner input must be 2 * embed_dim")
        for name, arr in self.named().items():
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"parameter '{name}' has non-finite entries")

    def copy(self) -> "ModelParams":
        return ModelParams.from_named({k: v.copy() for k, v in self.named().items()})

    def register(self, tape: Tape) -> dict:
        return {k: tape.param(k, v) for k, v in self.named().items()}


def _component(p: Mapping, comp: str):
    if f"{comp}.W1" not in p:
        return None
    return {k: p[f"{comp}.{k}"] for k in LAYER_KEYS}


# building blocks -----------------------------------------------------------

def encode_visual(f: Mapping, X):
    shape = np.shape(value_of(X))
    if shape[-1] != np.shape(value_of(f["W1"]))[0]:
        raise InvalidInputError(f"visual features have dim {shape[-1]}, encoder expects "
                                f"{np.shape(value_of(f['W1']))[0]}")
    return mlp(X, f)


def encode_semantic(g: Mapping, A_support, query_count: int):
    """Support rows are ``g(a_i)``; the ``query_count`` query rows are zero."""
    shape = np.shape(value_of(A_support))
    if len(shape) != 2 or shape[0] == 0:
        raise InvalidEpisodeError("support semantics are missing")
    if shape[1] != np.shape(value_of(g["W1"]))[0]:
        raise InvalidInputError("attribute dim does not match semantic encoder")
    za = mlp(A_support, g)
    if query_count == 0:
        return za
    c = np.shape(value_of(za))[-1]
    return ad.concat([za, np.zeros((query_count, c))], axis=0)


def fusion_weight(zv, za, w: Mapping):
    """Per-sample ``lambda = sigmoid(w(zv || za))`` with a trailing unit axis."""
    return ad.sigmoid(mlp(ad.concat([zv, za], axis=-1), w))


def fuse(zv, za, w: Mapping):
    """Convex combination ``lam * zv + (1 - lam) * za``; returns (fused, lam)."""
    lam = fusion_weight(zv, za, w)
    return lam * zv + (1.0 - lam) * za, lam


def class_mean_matrix(labels, n_way: int) -> np.ndarray:
    labels = np.asarray(labels)
    onehot = (labels[None, :] == np.arange(n_way)[:, None]).astype(float)
    counts = onehot.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts[:, 0] == 0)[0])
        raise InvalidEpisodeError(f"class {missing} has no support sample")
    return onehot / counts


def prototypes(fused_support, labels, n_way: int | None = None):
    """Class-wise means of fused support embeddings, shape ``(..., N, c)``."""
    labels = np.asarray(labels)
    if n_way is None:
        n_way = int(labels.max()) + 1
    return ad.matmul(class_mean_matrix(labels, n_way), fused_support)


def class_log_probs(fused_query, protos):
    """Log-softmax over negative (unsquared) Euclidean distances."""
    qs = np.shape(value_of(fused_query))
    diff = ad.reshape(fused_query, qs[:-1] + (1, qs[-1])) - protos
    dist = ad.sqrt(ad.sum_(ad.square(diff), axis=-1))
    return ad.log_softmax(-dist, axis=-1)


def classify(fused_query, protos):
    return ad.exp(class_log_probs(fused_query, protos))


def cls_loss_from_log_probs(log_probs, labels):
    labels = np.asarray(labels)
    picked = ad.index(log_probs, (np.arange(labels.size), labels))
    return -ad.mean(ad.clip_min(picked, np.log(PROB_FLOOR)))


def cls_loss(probs, labels):
    """Mean negative log-likelihood of the true class (probability floored)."""
    labels = np.asarray(labels)
    n = np.shape(value_of(probs))[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise InvalidInputError(f"labels must lie in [0, {n})")
    picked = ad.index(probs, (np.arange(labels.size), labels))
    return -ad.mean(ad.log(ad.clip_min(picked, PROB_FLOOR)))


def aux_constraint_loss(mode: str, zv_support, za_support):
    """Instance- or relation-level cross-modal constraint on supports."""
    if mode == "none":
        return 0.0
    if mode == "instance-constraint":
        return ad.mean(ad.square(zv_support - za_support))
    if mode == "relation-constraint":
        rv = rel.relation_map(zv_support, np.shape(value_of(zv_support))[-2])
        ra = rel.semantic_support_relations(za_support)
        return rel.relation_constraint_loss(rv.ss, ra.ss)
    raise ConfigError(f"aux must be one of {AUX_MODES}", key="aux")


# full pipeline -------------------------------------------------------------

class Losses(NamedTuple):
    cls: float
    rg: float
    aux: float
    total: float


@dataclass
class ForwardOutput:
    probs: np.ndarray                   # (T, N)
    lambda_support: np.ndarray          # (T, N*K): one value per support per graph
    lambda_query: np.ndarray | None     # (T,), None when query fusion is bypassed
    losses: Losses | None = None
    loss: Any = field(default=None, repr=False)  # taped total loss
    tape: Tape | None = field(default=None, repr=False)
    extras: dict = field(default_factory=dict, repr=False)


def forward_core(episode, p: Mapping, mode: AblationMode, alpha: float):
    """Label-free part of the forward pass on arrays or tape variables.

    Returns a dict of intermediate quantities (probabilities as log-probs).
    """
    f, g, h, w = (_component(p, c) for c in COMPONENTS)
    NK = episode.support_features.shape[0]
    T = episode.query_count
    N = episode.n_way
    if NK == 0 or T == 0:
        raise InvalidEpisodeError("episode needs support and query samples")

    zv_s = encode_visual(f, episode.support_features)
    zv_q = encode_visual(f, episode.query_features)
    za_s = encode_semantic(g, episode.support_attributes, 0)
    c = np.shape(value_of(zv_s))[-1]
    n = NK + 1

    # one inductive graph per query: rows 0..NK-1 supports, row NK the query
    zv = ad.concat([ad.broadcast_to(zv_s, (T, NK, c)), ad.reshape(zv_q, (T, 1, c))], axis=1)
    za = ad.concat([ad.broadcast_to(za_s, (T, NK, c)), np.zeros((T, 1, c))], axis=1)

    out: dict[str, Any] = {"zv_s": zv_s, "za_s": za_s, "zv": zv, "za": za}
    if mode.propagates:
        if mode.rg:
            rmap = rel.relation_map(zv, NK)
            rect = rel.transfer_relations(h, rmap)
            A, sigma_sq = graph.adjacency_from_relations(rect, rescale=True)
        else:
            A, sigma_sq = graph.gaussian_adjacency(ad.pairwise_sq_distances(zv), rescale=True)
        S = graph.symmetric_normalize(A)
        P = graph.propagation_matrix(S, alpha)
        zv_t = graph.propagate(P, zv) if mode.vp else zv
        za_t = graph.propagate(P, za) if mode.sp else za
        out.update(A=A, S=S, P=P, sigma_sq=sigma_sq)
    else:
        zv_t, za_t = zv, za
    out.update(zv_t=zv_t, za_t=za_t)

    fused, lam = fuse(zv_t, za_t, w)
    fused_s = ad.index(fused, (slice(None), slice(None, NK)))
    if mode.sp:
        fused_q = ad.index(fused, (slice(None), NK))
    else:
        # no semantic row for the query: use its visual embedding (lambda = 1)
        fused_q = ad.index(zv_t, (slice(None), NK))
    protos = prototypes(fused_s, episode.support_labels, N)
    out.update(
        fused_s=fused_s, fused_q=fused_q, protos=protos, lam=lam,
        log_probs=class_log_probs(fused_q, protos),
    )
    return out


def map_forward(episode, params, mode: AblationMode = AblationMode(), alpha: float = 0.2,
                mu: float = 1.0, *, taped: bool = False, with_loss: bool = True) -> ForwardOutput:
    """Run the full pipeline on one episode.

    ``params`` is a ModelParams, or a mapping of named arrays/tape variables
    (e.g. from :meth:`ModelParams.register`). With ``taped=True`` a fresh
    tape is built so the returned ``loss`` can be differentiated.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}", key="alpha")
    if mu < 0:
        raise ConfigError(f"mu must be >= 0, got {mu}", key="mu")
    tape = None
    if isinstance(params, ModelParams):
        if taped:
            tape = Tape()
            p = params.register(tape)
        else:
            p = params.named()
    else:
        p = params
        tape = next((v.tape for v in p.values() if isinstance(v, ad.Var)), None)
    core = forward_core(episode, p, mode, alpha)
    NK = episode.support_features.shape[0]
    lam = np.asarray(value_of(core["lam"]))[..., 0]
    result = ForwardOutput(
        probs=np.exp(np.asarray(value_of(core["log_probs"]))),
        lambda_support=lam[:, :NK],
        lambda_query=lam[:, NK] if mode.sp else None,
        tape=tape,
        extras=core,
    )
    if not with_loss:
        return result

    labels = episode.reveal_query_labels()
    l_cls = cls_loss_from_log_probs(core["log_probs"], labels)
    total = l_cls
    l_rg = 0.0
    if mode.rg:
        h = _component(p, "h")
        rv = rel.relation_map(core["zv_s"], NK)
        ra = rel.semantic_support_relations(core["za_s"])
        l_rg = rel.rg_loss(rel.transfer_relations(h, rv).ss, ra.ss)
        total = total + mu * l_rg
    l_aux = aux_constraint_loss(mode.aux, core["zv_s"], core["za_s"])
    if mode.aux != "none":
        total = total + mu * l_aux
    result.losses = Losses(
        float(value_of(l_cls)), float(value_of(l_rg)),
        float(value_of(l_aux)), float(value_of(total)),
    )
    result.loss = total
    return result
