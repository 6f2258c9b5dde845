"""Finite-difference verification of every layer's backward pass.

Each check builds a tiny layer instance (dims <= 8) from a seed, reduces the
forward output to a scalar through a fixed random weighting (so symmetric
gradient errors cannot cancel), and compares the analytic gradient of every
parameter against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import blocks as B
from . import layers as L
from . import model as M
from . import multimodal as MM
from .autodiff import Tensor


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool


def _weighted_sum(out: Tensor, rng: np.random.Generator):
    # weighted mean keeps |loss| near 1 so central-difference roundoff
    # (~ulp(loss)/2eps) stays well under the tolerance
    w = Tensor(rng.standard_normal(out.shape) / out.size)

    def reduce(t: Tensor) -> Tensor:
        return ad.tsum(ad.mul(t, w))

    return reduce


def _check_linear(seed):
    rng = np.random.default_rng([seed, 0])
    p = L.linear_init(rng, 3, 4)
    x = Tensor(rng.standard_normal((2, 3)))
    reduce = _weighted_sum(Tensor(np.zeros((2, 4))), rng)
    return B.named_parameters(p), lambda: reduce(L.linear_forward(x, p))


def _check_rmsnorm(seed):
    rng = np.random.default_rng([seed, 1])
    p = L.rmsnorm_init(5)
    p.gain.data = rng.standard_normal(5)
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    reduce = _weighted_sum(x, rng)
    params = B.named_parameters(p) + [("x", x)]
    return params, lambda: reduce(L.rmsnorm_forward(x, p))


def _check_gated_scan(seed):
    rng = np.random.default_rng([seed, 2])
    p = L.ssm_init(rng, 4)
    x = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
    reduce = _weighted_sum(x, rng)
    params = B.named_parameters(p) + [("x", x)]
    return params, lambda: reduce(L.gated_scan(x, p))


def _check_cross_attention(seed):
    rng = np.random.default_rng([seed, 3])
    p = L.attention_init(rng, 4, heads=2)
    q = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    v = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    reduce = _weighted_sum(q, rng)
    params = B.named_parameters(p) + [("q_src", q), ("v_src", v)]
    return params, lambda: reduce(L.cross_attention(q, v, p))


def _check_self_attention(seed):
    rng = np.random.default_rng([seed, 4])
    p = L.attention_init(rng, 4, heads=2)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    reduce = _weighted_sum(x, rng)
    params = B.named_parameters(p) + [("x", x)]
    return params, lambda: reduce(L.self_attention(x, p))


def _check_expert(seed):
    rng = np.random.default_rng([seed, 5])
    p = L.expert_init(rng, 4, 6)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    reduce = _weighted_sum(x, rng)
    params = B.named_parameters(p) + [("x", x)]
    return params, lambda: reduce(L.expert_forward(x, p))


def _check_moe(seed):
    rng = np.random.default_rng([seed, 6])
    p = L.moe_init(rng, 4, 6, n_experts=3, top_k=2)
    x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    reduce = _weighted_sum(x, rng)
    params = B.named_parameters(p) + [("x", x)]

    def loss():
        out, aux = L.moe_forward(x, p)
        return ad.add(reduce(out), aux)

    return params, loss


def _check_amamba(seed):
    rng = np.random.default_rng([seed, 7])
    p = B.amamba_init(rng, 4, heads=2)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    reduce = _weighted_sum(x, rng)
    params = B.named_parameters(p) + [("x", x)]
    return params, lambda: reduce(B.amamba_forward(x, p))


def _check_amamba_moe(seed):
    rng = np.random.default_rng([seed, 8])
    cfg = B.ModelConfig(d_model=4, n_blocks=1, heads=2, n_experts=2, top_k=1, d_ff=6)
    p = B.amamba_moe_init(rng, cfg)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    reduce = _weighted_sum(x, rng)
    params = B.named_parameters(p) + [("x", x)]

    def loss():
        out, aux = B.amamba_moe_forward(x, p)
        return ad.add(reduce(out), aux)

    return params, loss


def _check_uam_2block(seed):
    rng = np.random.default_rng([seed, 9])
    cfg = B.ModelConfig(
        d_model=4, n_blocks=2, heads=2, n_experts=2, top_k=2, d_ff=6, token_chunk=2, n_classes=2
    )
    model = M.build_model(cfg, seed=seed)
    tokens = rng.standard_normal((2, 4, 2))
    labels = rng.integers(0, 2, size=2)

    def loss():
        logits, aux = M.forward_classify(model, tokens)
        return M.cross_entropy_loss(logits, labels, aux)

    return B.named_parameters(model), loss


def _check_projection_mlp(seed):
    rng = np.random.default_rng([seed, 10])
    p = MM.projection_init(rng, 4, 5, 6)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    reduce = _weighted_sum(Tensor(np.zeros((3, 6))), rng)
    params = B.named_parameters(p) + [("x", x)]
    return params, lambda: reduce(MM.project_radiomics(x, p))


def _check_toy_decoder(seed):
    rng = np.random.default_rng([seed, 11])
    dec = MM.decoder_init(rng, d_img=6, d_hidden=5, grid=2)
    z_c = Tensor(rng.standard_normal((2 + 4 + 1, 6)), requires_grad=True)
    reduce = _weighted_sum(Tensor(np.zeros((4, 4))), rng)
    params = B.named_parameters(dec) + [("z_c", z_c)]
    return params, lambda: reduce(MM.decode_mask_logits(z_c, dec, n_radiomics=2, out_hw=(4, 4)))


CHECKS = [
    ("linear", _check_linear),
    ("rmsnorm", _check_rmsnorm),
    ("gated_scan", _check_gated_scan),
    ("cross_attention", _check_cross_attention),
    ("self_attention", _check_self_attention),
    ("expert", _check_expert),
    ("moe", _check_moe),
    ("amamba", _check_amamba),
    ("amamba_moe", _check_amamba_moe),
    ("uam_2block", _check_uam_2block),
    ("projection_mlp", _check_projection_mlp),
    ("toy_decoder", _check_toy_decoder),
]


def check_once(builder, seed: int, epsilon: float) -> float:
    """Max relative error between analytic and central-difference gradients."""
    params, loss_fn = builder(seed)
    for _, t in params:
        t.grad = None
    loss_fn().backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params}
    numeric = ad.finite_difference_gradient(lambda: loss_fn().item(), params, epsilon)
    return max(ad.max_relative_error(analytic[name], numeric[name]) for name, _ in params)


def run_gradient_suite(seeds=range(10), epsilon: float = 1e-5, tolerance: float = 1e-4):
    """Run every check over the seeds; returns a list of CheckResult."""
    results = []
    for name, builder in CHECKS:
        worst = max(check_once(builder, seed, epsilon) for seed in seeds)
        results.append(CheckResult(name=name, max_rel_error=worst, passed=worst < tolerance))
    return results
