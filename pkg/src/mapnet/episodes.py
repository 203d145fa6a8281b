"""Datasets, N-way K-shot episode sampling, synthetic tasks and file I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InvalidEpisodeError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Dataset:
    """Visual features per sample plus one attribute vector per class."""

    features: np.ndarray          # (S, d_v)
    labels: np.ndarray            # (S,) class ids
    class_ids: np.ndarray         # (C,)
    class_attributes: np.ndarray  # (C, d_a)
    class_split: tuple            # (C,) entries of SPLITS
    sample_ids: tuple = ()

    def __post_init__(self):
        known = set(self.class_ids.tolist())
        if len(known) != len(self.class_ids):
            raise FormatError("duplicate class ids")
        missing = set(np.unique(self.labels).tolist()) - known
        if missing:
            raise FormatError(f"samples reference unknown class id {min(missing)}")
        bad = [s for s in self.class_split if s not in SPLITS]
        if bad:
            raise FormatError(f"unknown split '{bad[0]}'")
        if self.features.shape[0] != self.labels.shape[0]:
            raise FormatError("feature and label counts differ")
        if not self.sample_ids:
            object.__setattr__(self, "sample_ids", tuple(range(len(self.labels))))
        row = {c: i for i, c in enumerate(self.class_ids.tolist())}
        object.__setattr__(self, "_row", row)
        by_class: dict[int, np.ndarray] = {}
        order = np.argsort(self.labels, kind="stable")
        for c in np.unique(self.labels):
            idx = order[self.labels[order] == c]
            by_class[int(c)] = idx
        object.__setattr__(self, "_by_class", by_class)

    @property
    def d_v(self) -> int:
        return self.features.shape[1]

    @property
    def d_a(self) -> int:
        return self.class_attributes.shape[1]

    def classes(self, split: str) -> np.ndarray:
        mask = np.array([s == split for s in self.class_split], dtype=bool)
        return self.class_ids[mask]

    def attributes_of(self, class_id: int) -> np.ndarray:
        return self.class_attributes[self._row[int(class_id)]]

    def samples_of(self, class_id: int) -> np.ndarray:
        return self._by_class.get(int(class_id), np.empty(0, dtype=int))


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task.

    Query labels are kept private; the model only sees ``query_features``.
    Query attributes are never stored.
    """

    support_features: np.ndarray    # (N*K, d_v)
    support_attributes: np.ndarray  # (N*K, d_a)
    support_labels: np.ndarray      # (N*K,) in [0, N)
    query_features: np.ndarray      # (T, d_v)
    n_way: int
    k_shot: int
    _query_labels: np.ndarray = field(repr=False, default=None)

    def reveal_query_labels(self) -> np.ndarray:
        """Evaluation/loss-only access to the hidden query labels."""
        if self._query_labels is None:
            raise InvalidEpisodeError("episode carries no query labels")
        return self._query_labels

    @property
    def query_count(self) -> int:
        return self.query_features.shape[0]

    def to_dict(self) -> dict:
        return {
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "support_features": self.support_features.tolist(),
            "support_attributes": self.support_attributes.tolist(),
            "support_labels": self.support_labels.tolist(),
            "query_features": self.query_features.tolist(),
            "query_labels": None if self._query_labels is None else self._query_labels.tolist(),
        }


@dataclass
class SynthSpec:
    """Paired-modality synthetic task family.

    Class visual centers are ``coupling * M @ a_c + perturbation * e_c`` for
    a fixed random map ``M`` (d_v x d_a) and class attributes ``a_c``;
    samples add isotropic noise of scale ``noise``.
    """

    n_train: int = 50
    n_val: int = 10
    n_test: int = 20
    samples_per_class: int = 40
    d_v: int = 32
    d_a: int = 16
    noise: float = 0.9
    coupling: float = 1.0
    perturbation: float = 0.3
    sparsity: float = 0.5

    def validate(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("class counts must be non-negative")
        if self.n_train + self.n_val + self.n_test == 0:
            raise ConfigError("synthetic spec has no classes", key="n_train")
        if self.samples_per_class < 1:
            raise ConfigError("must be >= 1", key="samples_per_class")
        if self.d_v < 1 or self.d_a < 1:
            raise ConfigError("feature dimensions must be >= 1", key="d_v")
        if not self.noise > 0:
            raise ConfigError("must be > 0", key="noise")
        if self.perturbation < 0:
            raise ConfigError("must be >= 0", key="perturbation")
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError("must lie in [0, 1)", key="sparsity")


def _coupling_map(rng, d_v, d_a):
    while True:
        M = rng.standard_normal((d_v, d_a)) / np.sqrt(d_a)
        if np.linalg.matrix_rank(M) == min(d_v, d_a):
            return M


def synth_generate(spec: SynthSpec, seed: int) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(seed)
    n_classes = spec.n_train + spec.n_val + spec.n_test
    M = _coupling_map(rng, spec.d_v, spec.d_a)
    attrs = np.zeros((n_classes, spec.d_a))
    for c in range(n_classes):
        # resample until the class has at least one active attribute
        while not attrs[c].any():
            attrs[c] = (rng.random(spec.d_a) >= spec.sparsity).astype(float)
    perturb = rng.standard_normal((n_classes, spec.d_v))
    centers = spec.coupling * attrs @ M.T + spec.perturbation * perturb
    labels = np.repeat(np.arange(n_classes), spec.samples_per_class)
    noise = rng.standard_normal((labels.size, spec.d_v))
    features = centers[labels] + spec.noise * noise
    split = ("train",) * spec.n_train + ("val",) * spec.n_val + ("test",) * spec.n_test
    return Dataset(features, labels, np.arange(n_classes), attrs, split)


def sample_episode(ds: Dataset, split: str, n_way: int, k_shot: int,
                   n_query: int, rng: np.random.Generator) -> Episode:
    """Uniformly sample an episode; labels are remapped to ``[0, n_way)``."""
    if n_way < 1 or k_shot < 1:
        raise ConfigError(f"need n_way >= 1 and k_shot >= 1, got {n_way}, {k_shot}")
    if n_query % n_way:
        raise ConfigError(f"query count {n_query} is not a multiple of n_way {n_way}")
    per_class = n_query // n_way
    pool = ds.classes(split)
    if len(pool) < n_way:
        raise ConfigError(
            f"split '{split}' has {len(pool)} classes, episode needs {n_way}"
        )
    chosen = rng.choice(pool, size=n_way, replace=False)
    s_idx, q_idx = [], []
    for c in chosen:
        members = ds.samples_of(c)
        need = k_shot + per_class
        if members.size < need:
            raise ConfigError(
                f"class {c} has {members.size} samples, episode needs {need}"
            )
        pick = rng.choice(members, size=need, replace=False)
        s_idx.append(pick[:k_shot])
        q_idx.append(pick[k_shot:])
    s_idx = np.concatenate(s_idx)
    q_idx = np.concatenate(q_idx)
    s_lab = np.repeat(np.arange(n_way), k_shot)
    q_lab = np.repeat(np.arange(n_way), per_class)
    s_attr = np.stack([ds.attributes_of(c) for c in chosen[s_lab]])
    return Episode(
        ds.features[s_idx], s_attr, s_lab, ds.features[q_idx], n_way, k_shot, q_lab
    )


# file formats -------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_embeddings(ds: Dataset, features_path, attributes_path) -> None:
    with open(features_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#features {ds.features.shape[0]} {ds.d_v}\n")
        for sid, lab, row in zip(ds.sample_ids, ds.labels, ds.features):
            fh.write(f"{sid} {int(lab)} " + " ".join(_fmt(v) for v in row) + "\n")
    with open(attributes_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#attributes {len(ds.class_ids)} {ds.d_a}\n")
        for cid, split, row in zip(ds.class_ids, ds.class_split, ds.class_attributes):
            fh.write(f"{int(cid)} {split} " + " ".join(_fmt(v) for v in row) + "\n")


def _read_header(lines, tag, path):
    if not lines:
        raise FormatError("empty file", path, 1)
    parts = lines[0].rstrip("\n").split(" ")
    if len(parts) != 3 or parts[0] != tag:
        raise FormatError(f"malformed header, expected '{tag} <count> <dim>'", path, 1)
    try:
        count, dim = int(parts[1]), int(parts[2])
    except ValueError:
        raise FormatError("header counts must be integers", path, 1) from None
    if count < 0 or dim < 1:
        raise FormatError("header counts out of range", path, 1)
    body = [ln.rstrip("\n") for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise FormatError(f"header declares {count} records, found {len(body)}", path, 1)
    return count, dim, body


def _floats(fields, dim, path, lineno):
    if len(fields) != dim:
        raise FormatError(f"expected {dim} values, found {len(fields)}", path, lineno)
    try:
        return [float(v) for v in fields]
    except ValueError as exc:
        raise FormatError(f"bad number: {exc}", path, lineno) from None


def load_embeddings(features_path, attributes_path) -> Dataset:
    """Read a features file and an attributes file into a Dataset."""
    features_path, attributes_path = Path(features_path), Path(attributes_path)
    with open(attributes_path, encoding="utf-8") as fh:
        a_lines = fh.readlines()
    n_cls, d_a, body = _read_header(a_lines, "#attributes", attributes_path)
    cids, splits, attrs = [], [], []
    for i, line in enumerate(body, start=2):
        f = line.split(" ")
        if len(f) < 2:
            raise FormatError("record too short", attributes_path, i)
        try:
            cid = int(f[0])
        except ValueError:
            raise FormatError(f"bad class id '{f[0]}'", attributes_path, i) from None
        if f[1] not in SPLITS:
            raise FormatError(f"unknown split '{f[1]}'", attributes_path, i)
        if cid in cids:
            raise FormatError(f"duplicate class id {cid}", attributes_path, i)
        cids.append(cid)
        splits.append(f[1])
        attrs.append(_floats(f[2:], d_a, attributes_path, i))

    with open(features_path, encoding="utf-8") as fh:
        f_lines = fh.readlines()
    n_s, d_v, body = _read_header(f_lines, "#features", features_path)
    known = set(cids)
    sids, labels, feats = [], [], []
    for i, line in enumerate(body, start=2):
        f = line.split(" ")
        if len(f) < 2:
            raise FormatError("record too short", features_path, i)
        try:
            sid, cid = int(f[0]), int(f[1])
        except ValueError:
            raise FormatError("sample and class ids must be integers", features_path, i) from None
        if cid not in known:
            raise FormatError(f"unknown class id {cid}", features_path, i)
        sids.append(sid)
        labels.append(cid)
        feats.append(_floats(f[2:], d_v, features_path, i))

    return Dataset(
        np.array(feats, dtype=np.float64).reshape(n_s, d_v),
        np.array(labels, dtype=np.int64),
        np.array(cids, dtype=np.int64),
        np.array(attrs, dtype=np.float64).reshape(n_cls, d_a),
        tuple(splits),
        tuple(sids),
    )
