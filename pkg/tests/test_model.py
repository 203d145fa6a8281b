import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapnet import autodiff as ad
from mapnet.checks import small_episode
from mapnet.episodes import Episode
from mapnet.errors import ConfigError, InvalidEpisodeError, InvalidInputError
from mapnet.model import (
    CONSTRAINT_MODES,
    COMPONENT_MODES,
    AblationMode,
    ModelParams,
    aux_constraint_loss,
    classify,
    cls_loss,
    encode_semantic,
    encode_visual,
    fuse,
    init_mlp,
    map_forward,
    prototypes,
)
from mapnet.oracles import mlp_row, scripted_forward

ALL_MODES = COMPONENT_MODES + CONSTRAINT_MODES


def zero_mlp(d_in, d_h, d_out):
    return {"W1": np.zeros((d_in, d_h)), "b1": np.zeros((1, d_h)),
            "W2": np.zeros((d_h, d_out)), "b2": np.zeros((1, d_out))}


def small_params(seed=0, d_v=6, d_a=5, c=4):
    return ModelParams.init(np.random.default_rng(seed), d_v, d_a, c, 5, 4)


# modes ---------------------------------------------------------------------

def test_rg_requires_propagation():
    with pytest.raises(ConfigError):
        AblationMode(False, False, True)


def test_unknown_aux():
    with pytest.raises(ConfigError):
        AblationMode(aux="both")


def test_mode_labels_in_table_order():
    assert [m.label for m in COMPONENT_MODES] == [
        "baseline", "VP", "SP", "VP+SP", "SP+RG", "VP+SP+RG"]
    assert [m.label for m in CONSTRAINT_MODES] == ["VP+SP+IC", "VP+SP+RC"]


# encoders ----------------------------------------------------------------------

def test_zero_encoder_gives_zero():
    assert not encode_visual(zero_mlp(3, 4, 2), np.ones((5, 3))).any()


def test_identity_configured_layer():
    # W1 = I, b1 = 0, W2 = I: output is softplus(x) elementwise
    p = {"W1": np.eye(3), "b1": np.zeros((1, 3)), "W2": np.eye(3), "b2": np.zeros((1, 3))}
    x = np.random.default_rng(0).standard_normal((4, 3))
    assert np.abs(encode_visual(p, x) - np.logaddexp(0, x)).max() <= 1e-15


def test_encoder_matches_row_oracle():
    rng = np.random.default_rng(1)
    p = init_mlp(rng, 6, 5, 3)
    p["b1"] = rng.standard_normal((1, 5))
    X = rng.standard_normal((4, 6))
    out = encode_visual(p, X)
    for i in range(4):
        assert np.abs(out[i] - mlp_row(X[i].tolist(), p)).max() <= 1e-12


def test_encoder_shape_mismatch():
    with pytest.raises(InvalidInputError):
        encode_visual(zero_mlp(3, 4, 2), np.ones((5, 4)))


def test_semantic_query_rows_zero():
    rng = np.random.default_rng(2)
    g = init_mlp(rng, 5, 4, 3)
    g["b2"] = np.ones((1, 3))
    A = rng.standard_normal((4, 5))
    out = encode_semantic(g, A, 3)
    assert out.shape == (7, 3)
    assert np.array_equal(out[4:], np.zeros((3, 3)))
    assert np.array_equal(encode_semantic(g, A, 0), out[:4])
    for i in range(4):
        assert np.abs(out[i] - mlp_row(A[i].tolist(), g)).max() <= 1e-12


# fusion, prototypes, classification --------------------------------------------

def test_fuse_equal_inputs():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((4, 3))
    fused, _ = fuse(z, z, init_mlp(rng, 6, 4, 1))
    assert np.abs(fused - z).max() <= 1e-15


def test_fuse_zero_logit_midpoint():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    fused, lam = fuse(a, b, zero_mlp(6, 4, 1))
    assert np.all(lam == 0.5)
    assert np.abs(fused - (a + b) / 2).max() <= 1e-15


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_fuse_on_segment(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    fused, lam = fuse(a, b, init_mlp(rng, 6, 4, 1))
    assert np.all((lam > 0) & (lam < 1))
    assert np.abs(fused - (a + (1 - lam) * (b - a))).max() <= 1e-12


def test_prototypes():
    rng = np.random.default_rng(5)
    f = rng.standard_normal((3, 2))
    assert np.abs(prototypes(f, [0, 1, 2]) - f).max() == 0
    twin = np.repeat(f, 2, axis=0)
    assert np.abs(prototypes(twin, [0, 0, 1, 1, 2, 2]) - f).max() <= 1e-15
    f5 = rng.standard_normal((15, 4))
    labels = np.repeat(np.arange(3), 5)
    want = np.stack([f5[labels == k].mean(axis=0) for k in range(3)])
    assert np.abs(prototypes(f5, labels) - want).max() <= 1e-12


def test_prototypes_empty_class():
    with pytest.raises(InvalidEpisodeError):
        prototypes(np.ones((2, 2)), [0, 0], n_way=2)


def test_classify_examples():
    protos = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    assert np.abs(classify(np.zeros((1, 2)), protos) - 0.25).max() <= 1e-15
    far = np.array([[0.0, 0.0], [100.0, 0], [0, 100.0]])
    assert classify(np.zeros((1, 2)), far)[0, 0] > 1 - 1e-12
    rng = np.random.default_rng(6)
    q, P = rng.standard_normal((1, 3)), rng.standard_normal((5, 3))
    d = [math.sqrt(sum((q[0, k] - P[c, k]) ** 2 for k in range(3))) for c in range(5)]
    e = [math.exp(-v) for v in d]
    assert np.abs(classify(q, P)[0] - np.array(e) / sum(e)).max() <= 1e-12


def test_cls_loss_examples():
    assert cls_loss(np.eye(3), [0, 1, 2]) == 0.0
    assert cls_loss(np.full((4, 5), 0.2), [0, 1, 2, 3]) == pytest.approx(math.log(5), abs=1e-12)
    rng = np.random.default_rng(7)
    p = rng.dirichlet(np.ones(4), size=6)
    y = rng.integers(0, 4, 6)
    assert abs(cls_loss(p, y) - -sum(math.log(p[i, y[i]]) for i in range(6)) / 6) <= 1e-12
    assert cls_loss(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))


def test_aux_losses():
    rng = np.random.default_rng(8)
    z = rng.standard_normal((4, 3))
    assert aux_constraint_loss("none", z, z) == 0.0
    assert aux_constraint_loss("instance-constraint", z, z) == 0.0
    assert aux_constraint_loss("relation-constraint", z, z) == 0.0
    assert aux_constraint_loss("relation-constraint", z, z + 2.0) <= 1e-25
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    ic = sum((a[i, k] - b[i, k]) ** 2 for i in range(4) for k in range(3)) / 12
    assert abs(aux_constraint_loss("instance-constraint", a, b) - ic) <= 1e-12
    tot = 0.0
    for i in range(4):
        for j in range(4):
            if i != j:
                tot += sum(((a[i, k] - a[j, k]) ** 2 - (b[i, k] - b[j, k]) ** 2) ** 2 for k in range(3))
    assert abs(aux_constraint_loss("relation-constraint", a, b) - tot / (12 * 3)) <= 1e-12


# full forward -------------------------------------------------------------------

def hand_episode():
    ep = Episode(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]),
                 np.array([0, 1]), np.array([[0.8, 0.3]]), 2, 1, np.array([0]))
    eye = {"W1": np.eye(2), "b1": np.zeros((1, 2)), "W2": np.eye(2), "b2": np.zeros((1, 2))}
    named = {}
    for comp, p in (("f", eye), ("g", {**eye, "W2": 0.5 * np.eye(2)}),
                    ("h", {**eye, "b2": np.array([[0.1, -0.2]])}),
                    ("w", {"W1": np.full((4, 2), 0.3), "b1": np.zeros((1, 2)),
                           "W2": np.array([[0.5], [-0.25]]), "b2": np.array([[0.1]])})):
        for k, v in p.items():
            named[f"{comp}.{k}"] = v
    return ep, named


@pytest.mark.parametrize("mode", ALL_MODES, ids=lambda m: m.label)
def test_hand_set_pipeline_matches_script(mode):
    ep, named = hand_episode()
    got = map_forward(ep, named, mode, 0.2, 1.0)
    ref = scripted_forward(ep, named, mode.vp, mode.sp, mode.rg, 0.2, 1.0, mode.aux)
    assert np.abs(got.probs - ref["probs"]).max() <= 1e-10
    assert max(abs(a - b) for a, b in zip(got.losses, ref["losses"])) <= 1e-10


@pytest.mark.parametrize("mode", ALL_MODES, ids=lambda m: m.label)
def test_random_episode_matches_script(mode):
    ep, rng = small_episode(3)
    p = small_params(4)
    got = map_forward(ep, p, mode, 0.2, 1.0)
    ref = scripted_forward(ep, p.named(), mode.vp, mode.sp, mode.rg, 0.2, 1.0, mode.aux)
    assert np.abs(got.probs - ref["probs"]).max() <= 1e-10
    assert np.abs(got.lambda_support - ref["lambda_support"]).max() <= 1e-10


def test_baseline_query_bypasses_fusion():
    ep, _ = small_episode(5)
    p = small_params(6)
    out = map_forward(ep, p, COMPONENT_MODES[0])
    assert out.lambda_query is None
    zq = encode_visual(p.f, ep.query_features)
    zs = encode_visual(p.f, ep.support_features)
    fused, _ = fuse(zs, encode_semantic(p.g, ep.support_attributes, 0), p.w)
    protos = prototypes(fused, ep.support_labels, ep.n_way)
    assert np.abs(out.probs - classify(zq, protos)).max() <= 1e-12


def test_small_alpha_near_baseline():
    ep, _ = small_episode(7)
    p = small_params(8)
    out = map_forward(ep, p, AblationMode(True, True, False), alpha=1e-9)
    q = np.asarray(out.extras["za_t"])[:, -1]
    assert np.abs(q).max() < 1e-7


@pytest.mark.parametrize("mode", ALL_MODES, ids=lambda m: m.label)
def test_probabilities_and_lambda_ranges(mode):
    for seed in range(5):
        ep, _ = small_episode(seed)
        out = map_forward(ep, small_params(seed), mode)
        assert np.abs(out.probs.sum(axis=1) - 1).max() <= 1e-9
        lam = out.lambda_support if out.lambda_query is None else np.concatenate(
            [out.lambda_support.ravel(), out.lambda_query])
        assert np.all((lam > 0) & (lam < 1))


def test_pseudo_semantics_in_support_span():
    for seed in range(10):
        ep, _ = small_episode(seed)
        out = map_forward(ep, small_params(seed), AblationMode(False, True, True))
        za_s = np.asarray(out.extras["za_s"])
        q = np.asarray(out.extras["za_t"])[:, -1]
        coef, *_ = np.linalg.lstsq(za_s.T, q.T, rcond=None)
        assert np.abs(za_s.T @ coef - q.T).max() <= 1e-8


@pytest.mark.parametrize("mode", [m for m in COMPONENT_MODES if not m.rg], ids=lambda m: m.label)
def test_translation_invariance_rg_off(mode):
    # shifting every visual embedding by one row leaves the graph unchanged
    ep, _ = small_episode(11)
    p = small_params(12)
    moved = p.copy()
    moved.f["b2"] = moved.f["b2"] + np.array([[3.0, -1.0, 0.5, 2.0]])
    a, b = map_forward(ep, p, mode), map_forward(ep, moved, mode)
    for key in ("A", "S", "P"):
        if key in a.extras:
            assert np.abs(np.asarray(a.extras[key]) - np.asarray(b.extras[key])).max() <= 1e-9


def test_translation_invariance_of_probabilities():
    # baseline with a constant fusion weight: both modalities shift together
    ep, _ = small_episode(13)
    p = small_params(14)
    p.w["W2"] = np.zeros_like(p.w["W2"])
    shift = np.array([[3.0, -1.0, 0.5, 2.0]])
    moved = p.copy()
    moved.f["b2"] = moved.f["b2"] + shift
    moved.g["b2"] = moved.g["b2"] + shift
    mode = COMPONENT_MODES[0]
    assert np.abs(map_forward(ep, p, mode).probs - map_forward(ep, moved, mode).probs).max() <= 1e-9


def test_forward_deterministic():
    ep, _ = small_episode(15)
    p = small_params(16)
    a, b = map_forward(ep, p), map_forward(ep, p)
    assert np.array_equal(a.probs, b.probs) and a.losses == b.losses


def test_forward_bad_alpha_mu():
    ep, _ = small_episode(0)
    with pytest.raises(ConfigError):
        map_forward(ep, small_params(), alpha=1.0)
    with pytest.raises(ConfigError):
        map_forward(ep, small_params(), mu=-1.0)


def test_params_roundtrip_and_checks():
    p = small_params(17)
    q = ModelParams.from_named(p.named())
    assert all(np.array_equal(p.named()[k], v) for k, v in q.named().items())
    bad = p.named()
    bad["f.W1"] = bad["f.W1"].copy()
    bad["f.W1"][0, 0] = np.nan
    with pytest.raises(InvalidInputError):
        ModelParams.from_named(bad)
    with pytest.raises(InvalidInputError):
        ModelParams.from_named({"x.W1": np.ones((1, 1))})


def test_gradient_full_pipeline_vp_sp_rg():
    ep, rng = small_episode(18)
    p = small_params(19)
    err = ad.finite_diff_check(lambda t, v: map_forward(ep, v, AblationMode(), 0.2, 1.0).loss,
                               p.named())
    assert err <= 1e-4
