"""Acceptance criteria 1-11, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL ...`` line (also repeated in
the terminal summary).
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mapnet import autodiff as ad
from mapnet import cli, graph
from mapnet.checks import ALL_MODES, gradient_suite
from mapnet.episodes import SynthSpec, sample_episode, synth_generate
from mapnet.model import COMPONENT_MODES, AblationMode, ModelParams, map_forward
from mapnet.oracles import neumann_gap
from mapnet.relations import relation_map
from mapnet.trainer import TrainConfig, evaluate, init_params, lambda_sweep, train

SEED = 0
BASELINE, VP_SP, FULL = COMPONENT_MODES[0], COMPONENT_MODES[3], COMPONENT_MODES[5]


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def default_data():
    return synth_generate(SynthSpec(), SEED)


@pytest.fixture(scope="module")
def trained(default_data):
    """Default-config models for the three modes compared end to end."""
    cfg = TrainConfig(seed=SEED, eval_episodes=500)
    started = time.perf_counter()
    out = {}
    for mode in (BASELINE, VP_SP, FULL):
        c = replace(cfg, mode=mode)
        params, log = train(default_data, c)
        out[mode.label] = (c, params, log, evaluate(params, default_data, "test", c))
    out["elapsed"] = time.perf_counter() - started
    return out


def test_criterion_01_propagation_oracle():
    t = time.perf_counter()
    gap = neumann_gap(np.random.default_rng(SEED), graphs=100, max_n=20, alpha=0.2, k=64)
    dt = time.perf_counter() - t
    verdict(1, gap <= 1e-8 and dt < 5, f"max gap {gap:.2e} (tol 1e-8), {dt:.2f}s (< 5s)")


def test_criterion_02_limit_identity():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 21))
        A = rng.random((n, n))
        A = (A + A.T) / 2
        np.fill_diagonal(A, 0.0)
        P = graph.propagation_matrix(graph.symmetric_normalize(A), 1e-12)
        worst = max(worst, float(np.abs(P - np.eye(n)).max()))
    verdict(2, worst <= 1e-9, f"max |P - I| {worst:.2e} (tol 1e-9)")


def test_criterion_03_rg_reduction():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 27))
        Z = rng.standard_normal((n, int(rng.integers(1, 33))))
        A_rel, _ = graph.adjacency_from_relations(relation_map(Z, max(1, n - 1)))
        A_gau, _ = graph.gaussian_adjacency(ad.pairwise_sq_distances(Z))
        worst = max(worst, float(np.abs(A_rel - A_gau).max()))
    verdict(3, worst <= 1e-10, f"max adjacency gap {worst:.2e} (tol 1e-10)")


def test_criterion_04_gradient_suite():
    t = time.perf_counter()
    results = gradient_suite(SEED, modes=ALL_MODES)
    dt = time.perf_counter() - t
    worst = max(r.value for r in results)
    modes = len(results)
    verdict(4, worst <= 1e-4 and dt < 60 and modes == 8,
            f"max rel error {worst:.2e} over {modes} modes (tol 1e-4), {dt:.1f}s (< 60s)")


def test_criterion_05_pseudo_semantic_span(default_data):
    rng = np.random.default_rng([SEED, 5])
    params = ModelParams.init(rng, default_data.d_v, default_data.d_a)
    sp_modes = [m for m in ALL_MODES if m.sp]
    worst = 0.0
    for i in range(50):
        ep = sample_episode(default_data, "test", 5, 1 + i % 3, 15, rng)
        out = map_forward(ep, params, sp_modes[i % len(sp_modes)], with_loss=False)
        za_s = np.asarray(out.extras["za_s"])
        q = np.asarray(out.extras["za_t"])[:, -1]
        coef, *_ = np.linalg.lstsq(za_s.T, q.T, rcond=None)
        worst = max(worst, float(np.abs(za_s.T @ coef - q.T).max()))
    verdict(5, worst <= 1e-8, f"max lstsq residual {worst:.2e} over 50 episodes (tol 1e-8)")


def test_criterion_06_probability_normalization(default_data, trained):
    cfg, params, _, _ = trained[FULL.label]
    rep = evaluate(params, default_data, "test", cfg, 1000)
    ok = rep.max_prob_sum_error <= 1e-9 and 0 < rep.lambda_min and rep.lambda_max < 1
    verdict(6, ok, f"max |row sum - 1| {rep.max_prob_sum_error:.2e} (tol 1e-9), "
                   f"lambda in [{rep.lambda_min:.4g}, {rep.lambda_max:.4g}] over 1000 episodes")


def test_criterion_07_end_to_end_ordering(trained):
    base = trained[BASELINE.label][3].accuracy
    vpsp = trained[VP_SP.label][3].accuracy
    full = trained[FULL.label][3].accuracy
    ok = full >= base + 5.0 and full >= vpsp - 1.0 and trained["elapsed"] < 600
    verdict(7, ok, f"baseline {base:.2f}, VP+SP {vpsp:.2f}, VP+SP+RG {full:.2f} "
                   f"(need full >= baseline + 5 and >= VP+SP - 1), {trained['elapsed']:.0f}s")


def test_criterion_08_learning_progress(trained):
    log = trained[FULL.label][2]
    first, best = log[0].val_acc, max(e.val_acc for e in log)
    verdict(8, best - first >= 10.0,
            f"val acc epoch 1 {first:.2f} -> best {best:.2f} (gain {best - first:.2f}, need >= 10)")


def test_criterion_09_statistical_sanity():
    # class-independent features, so untrained parameters can only guess
    ds = synth_generate(replace(SynthSpec(), coupling=0.0, perturbation=0.0), SEED)
    cfg = TrainConfig(seed=SEED)
    rep = evaluate(init_params(ds, cfg), ds, "test", cfg, 1000)
    gap = abs(rep.accuracy - 20.0)
    verdict(9, gap <= 3 * rep.ci95,
            f"accuracy {rep.accuracy:.2f} +- {rep.ci95:.2f}, |acc - 20| = {gap:.2f} (<= 3 ci95)")


def test_criterion_10_determinism(tmp_path):
    args = ["--seed", str(SEED)]
    for kv in ("epochs=2", "episodes_per_epoch=25", "val_episodes=20", "eval_episodes=100"):
        args += ["--set", kv]
    outs = [tmp_path / f"run{i}.json" for i in range(3)]
    codes = [cli.main(["ablate", "--out", str(outs[0]), *args]),
             cli.main(["ablate", "--out", str(outs[1]), *args]),
             cli.main(["ablate", "--out", str(outs[2]), "--threads", "4", *args])]
    same = outs[0].read_bytes() == outs[1].read_bytes()
    parallel = outs[0].read_bytes() == outs[2].read_bytes()
    csv_same = all(outs[0].with_suffix(".csv").read_bytes() == o.with_suffix(".csv").read_bytes()
                   for o in outs[1:])
    seed_ok = json.loads(outs[0].read_text())["seed"] == SEED
    verdict(10, codes == [0, 0, 0] and same and parallel and csv_same and seed_ok,
            f"single-threaded repeat identical={same}, 4-thread identical={parallel}, csv={csv_same}")


def test_criterion_11_lambda_diagnostics(default_data):
    rows = lambda_sweep(default_data, TrainConfig(seed=SEED, epochs=5, eval_episodes=200), [1, 5])
    vals = [v for r in rows for v in (r["lambda_support"], r["lambda_query"],
                                        r["lambda_min"], r["lambda_max"])]
    ok = [r["k_shot"] for r in rows] == [1, 5] and all(v is not None and 0 < v < 1 for v in vals)
    trend = ", ".join(f"K={r['k_shot']} support {r['lambda_support']:.3f} query "
                      f"{r['lambda_query']:.3f} (query>support: {r['query_exceeds_support']})"
                      for r in rows)
    verdict(11, ok, trend)
