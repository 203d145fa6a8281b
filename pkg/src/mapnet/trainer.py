"""Episodic meta-training, evaluation with confidence intervals, and the
ablation / fusion-weight diagnostics built on top of them."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .episodes import Dataset, sample_episode
from .errors import ConfigError, TrainingDivergedError
from .model import COMPONENT_MODES, AblationMode, ModelParams, map_forward

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 20
    episodes_per_epoch: int = 100
    val_episodes: int = 100
    eval_episodes: int = 1000
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    alpha: float = 0.2
    mu: float = 1.0
    lr: float = 1e-3
    lr_decay: float = 0.1
    decay_every: int = 8
    seed: int = 0
    embed_dim: int = 32
    hidden: int = 64
    w_hidden: int = 32
    mode: AblationMode = field(default_factory=AblationMode)

    def validate(self):
        checks = [
            ("alpha", 0.0 < self.alpha < 1.0, "must lie in (0, 1)"),
            ("lr", self.lr > 0, "must be > 0"),
            ("lr_decay", 0.0 < self.lr_decay <= 1.0, "must lie in (0, 1]"),
            ("mu", self.mu >= 0, "must be >= 0"),
            ("epochs", self.epochs >= 0, "must be >= 0"),
            ("episodes_per_epoch", self.episodes_per_epoch >= 1, "must be >= 1"),
            ("val_episodes", self.val_episodes >= 1, "must be >= 1"),
            ("eval_episodes", self.eval_episodes >= 1, "must be >= 1"),
            ("decay_every", self.decay_every >= 1, "must be >= 1"),
            ("n_way", self.n_way >= 2, "must be >= 2"),
            ("k_shot", self.k_shot >= 1, "must be >= 1"),
            ("n_query", self.n_query >= 1 and self.n_query % max(self.n_way, 1) == 0,
             "must be a positive multiple of n_way"),
            ("seed", self.seed >= 0, "must be >= 0"),
            ("embed_dim", self.embed_dim >= 1, "must be >= 1"),
            ("hidden", self.hidden >= 1, "must be >= 1"),
            ("w_hidden", self.w_hidden >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{msg}, got {getattr(self, key)!r}", key=key)
        return self

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = mode_dict(self.mode)
        return d


def mode_dict(mode: AblationMode) -> dict:
    return {"vp": mode.vp, "sp": mode.sp, "rg": mode.rg, "aux": mode.aux, "label": mode.label}


# optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(name)
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = ADAM_BETA1 * state.m.get(name, 0.0) + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v.get(name, 0.0) + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


# evaluation ------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    ci95: float
    episode_count: int
    lambda_mean_support: float | None
    lambda_mean_query: float | None
    mode: dict
    seed: int
    split: str = "test"
    n_way: int = 5
    k_shot: int = 1
    lambda_min: float | None = None
    lambda_max: float | None = None
    max_prob_sum_error: float = 0.0
    wall_time: float = 0.0

    def to_dict(self, wall_time: bool = False) -> dict:
        d = asdict(self)
        if not wall_time:
            d.pop("wall_time")
        return d


def ci95(per_episode) -> float:
    """Half-width ``1.96 * std / sqrt(n)`` (population std)."""
    acc = np.asarray(per_episode, dtype=np.float64)
    return float(1.96 * acc.std() / np.sqrt(acc.size))


def _episode_rng(seed: int, salt: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, salt, i])


def evaluate(params: ModelParams, ds: Dataset, split: str, cfg: TrainConfig,
             episode_count: int | None = None, *, seed: int | None = None,
             threads: int = 0, forward=None, salt: int = 3) -> EvalReport:
    """Mean per-episode accuracy (%) with a 95% confidence half-width.

    Episode ``i`` is drawn from its own generator seeded by ``(seed, salt,
    i)``, and per-episode results are reduced in index order, so any
    ``threads`` value gives the same report. ``forward`` overrides the
    model call (signature of :func:`map_forward`).
    """
    count = cfg.eval_episodes if episode_count is None else episode_count
    if count < 1:
        raise ConfigError("episode count must be >= 1", key="eval_episodes")
    if len(ds.classes(split)) == 0:
        raise ConfigError(f"split '{split}' has no classes", key="split")
    seed = cfg.seed if seed is None else seed
    fwd = forward or map_forward
    started = time.perf_counter()

    def one(i):
        ep = sample_episode(ds, split, cfg.n_way, cfg.k_shot, cfg.n_query,
                            _episode_rng(seed, salt, i))
        out = fwd(ep, params, cfg.mode, cfg.alpha, cfg.mu, with_loss=False)
        hits = np.argmax(out.probs, axis=1) == ep.reveal_query_labels()
        return (
            float(hits.mean()),
            out.lambda_support,
            out.lambda_query,
            float(np.abs(out.probs.sum(axis=1) - 1.0).max()),
        )

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(count)))
    else:
        results = [one(i) for i in range(count)]

    acc = np.array([r[0] for r in results])
    lam_s = [r[1] for r in results if r[1] is not None and np.size(r[1])]
    lam_q = [r[2] for r in results if r[2] is not None and np.size(r[2])]
    all_lam = [np.ravel(x) for x in lam_s + lam_q]
    cat = np.concatenate(all_lam) if all_lam else None

    def _mean(parts):
        if not parts:
            return None
        flat = np.concatenate([np.ravel(x) for x in parts])
        return float(flat.mean())

    return EvalReport(
        accuracy=float(100.0 * acc.mean()),
        ci95=100.0 * ci95(acc),
        episode_count=count,
        lambda_mean_support=_mean(lam_s),
        lambda_mean_query=_mean(lam_q),
        mode=mode_dict(cfg.mode),
        seed=seed,
        split=split,
        n_way=cfg.n_way,
        k_shot=cfg.k_shot,
        lambda_min=None if cat is None else float(cat.min()),
        lambda_max=None if cat is None else float(cat.max()),
        max_prob_sum_error=max(r[3] for r in results),
        wall_time=time.perf_counter() - started,
    )


# training --------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float

    def line(self) -> str:
        return (f"epoch {self.epoch} train_loss {self.train_loss:.6g} "
                f"val_acc {self.val_acc:.6g} lr {self.lr:.6g}")


def init_params(ds: Dataset, cfg: TrainConfig) -> ModelParams:
    rng = np.random.default_rng([cfg.seed, 0])
    return ModelParams.init(rng, ds.d_v, ds.d_a, cfg.embed_dim, cfg.hidden, cfg.w_hidden)


def train(ds: Dataset, cfg: TrainConfig, *, threads: int = 0, params: ModelParams | None = None):
    """Meta-train on the ``train`` split; returns ``(best_params, log)``.

    The returned parameters are those of the epoch with the highest
    validation accuracy (earliest epoch on ties).
    """
    cfg.validate()
    params = init_params(ds, cfg) if params is None else params.copy()
    history: list[EpochLog] = []
    if cfg.epochs == 0:
        return params, history
    if len(ds.classes("val")) == 0:
        raise ConfigError("dataset has no validation classes", key="n_val")

    current = params.named()
    state = AdamState()
    rng = np.random.default_rng([cfg.seed, 1])
    best, best_acc = params, -1.0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        losses = []
        for _ in range(cfg.episodes_per_epoch):
            ep = sample_episode(ds, "train", cfg.n_way, cfg.k_shot, cfg.n_query, rng)
            out = map_forward(ep, ModelParams.from_named(current), cfg.mode, cfg.alpha,
                              cfg.mu, taped=True)
            grads = out.tape.backward(out.loss)
            current, state = optimizer_step(current, grads, state, lr)
            losses.append(out.losses.total)
        snapshot = ModelParams.from_named(current)
        # the same validation episodes every epoch (fixed salt/seed)
        val = evaluate(snapshot, ds, "val", cfg, cfg.val_episodes, salt=2, threads=threads)
        entry = EpochLog(epoch, float(np.mean(losses)), val.accuracy, lr)
        history.append(entry)
        log.info(entry.line())
        if val.accuracy > best_acc:
            best, best_acc = snapshot, val.accuracy
    return best, history


# experiment harnesses --------------------------------------------------------

@dataclass
class AblationRow:
    mode: AblationMode
    report: EvalReport
    history: list

    def to_dict(self) -> dict:
        return {
            "label": self.mode.label,
            "report": self.report.to_dict(),
            "log": [e.line() for e in self.history],
        }


def ablation_run(ds: Dataset, base_cfg: TrainConfig, modes=COMPONENT_MODES, *,
                 split: str = "test", threads: int = 0) -> list[AblationRow]:
    """Train and evaluate one model per mode with shared seed and data."""
    rows = []
    for mode in modes:
        cfg = replace(base_cfg, mode=mode)
        params, history = train(ds, cfg, threads=threads)
        report = evaluate(params, ds, split, cfg, threads=threads)
        log.info("%s: %.2f +- %.2f", mode.label, report.accuracy, report.ci95)
        rows.append(AblationRow(mode, report, history))
    return rows


def lambda_sweep(ds: Dataset, base_cfg: TrainConfig, shot_list, *, split: str = "test",
                 threads: int = 0) -> list[dict]:
    """Mean fusion weight for supports and queries, one trained model per K."""
    shots = list(shot_list)
    if not shots:
        raise ConfigError("shot list is empty", key="shots")
    rows = []
    for k in shots:
        cfg = replace(base_cfg, k_shot=int(k))
        params, _ = train(ds, cfg, threads=threads)
        rep = evaluate(params, ds, split, cfg, threads=threads)
        q, s = rep.lambda_mean_query, rep.lambda_mean_support
        rows.append({
            "k_shot": int(k),
            "accuracy": rep.accuracy,
            "ci95": rep.ci95,
            "lambda_support": s,
            "lambda_query": q,
            "lambda_min": rep.lambda_min,
            "lambda_max": rep.lambda_max,
            # recorded only; no assertion on the direction
            "query_exceeds_support": None if q is None or s is None else bool(q > s),
        })
    return rows
