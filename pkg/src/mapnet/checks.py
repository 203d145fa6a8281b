"""Numerical check suites shared by the CLI, scripts and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .episodes import SynthSpec, sample_episode, synth_generate
from .model import CONSTRAINT_MODES, COMPONENT_MODES, ModelParams, map_forward
from .oracles import neumann_gap, scripted_forward

ALL_MODES = COMPONENT_MODES + CONSTRAINT_MODES

# Small enough that central differences over every parameter stay fast.
GRADCHECK_SPEC = SynthSpec(n_train=6, n_val=0, n_test=0, samples_per_class=8, d_v=6, d_a=5)
GRADCHECK_DIMS = dict(embed_dim=4, hidden=5, w_hidden=4)


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tolerance)

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return f"{self.name}: {self.value:.3e} (tol {self.tolerance:g}) {status}"


def small_episode(seed: int = 0, n_way: int = 3, k_shot: int = 2, n_query: int = 6):
    ds = synth_generate(GRADCHECK_SPEC, seed)
    rng = np.random.default_rng([seed, 7])
    return sample_episode(ds, "train", n_way, k_shot, n_query, rng), rng


def gradient_suite(seed: int = 0, alpha: float = 0.2, mu: float = 1.0,
                   modes=ALL_MODES, tol: float = 1e-4) -> list[CheckResult]:
    """Central-difference check of the full loss under each mode (3-way 2-shot)."""
    ep, rng = small_episode(seed)
    params = ModelParams.init(rng, GRADCHECK_SPEC.d_v, GRADCHECK_SPEC.d_a, **GRADCHECK_DIMS)
    results = []
    for mode in modes:
        named = params.named()
        if not mode.rg:
            named = {k: v for k, v in named.items() if not k.startswith("h.")}

        def forward(tape, vars_, mode=mode):
            return map_forward(ep, vars_, mode, alpha, mu).loss

        err = ad.finite_diff_check(forward, named)
        results.append(CheckResult(f"gradcheck {mode.label}", err, tol))
    return results


def oracle_suite(seed: int = 0, alpha: float = 0.2, mu: float = 1.0) -> list[CheckResult]:
    """Closed-form vs series propagation, and vectorized vs scripted forward."""
    out = [CheckResult("propagation closed-form vs Neumann",
                       neumann_gap(np.random.default_rng([seed, 11]), alpha=alpha), 1e-8)]
    ep, rng = small_episode(seed)
    params = ModelParams.init(rng, GRADCHECK_SPEC.d_v, GRADCHECK_SPEC.d_a, **GRADCHECK_DIMS)
    for mode in ALL_MODES:
        got = map_forward(ep, params, mode, alpha, mu)
        ref = scripted_forward(ep, params.named(), mode.vp, mode.sp, mode.rg, alpha, mu, mode.aux)
        gap = max(
            float(np.abs(got.probs - ref["probs"]).max()),
            float(np.abs(got.lambda_support - ref["lambda_support"]).max()),
            max(abs(a - b) for a, b in zip(got.losses, ref["losses"])),
        )
        out.append(CheckResult(f"scripted forward {mode.label}", gap, 1e-10))
    return out
