"""Encoder blocks: the Amamba and Amamba-MoE layers, their composition into
UAM blocks, the ablation/baseline block families, and analytic cost
accounting (parameter and FLOP counts).

Variant map:
  UAM      norm -> Amamba -> Amamba-MoE
  UAM-L    norm -> Amamba
  UAM-M    norm -> Amamba-MoE
  Trans    norm -> self-attention -> FFN          (residuals around each)
  Trans-M  norm -> self-attention -> MoE
  Mamba    norm -> gated scan -> FFN
  Mamba-M  norm -> gated scan -> MoE
  Jamba    2*n_blocks sub-blocks, each norm -> mixer -> MoE, attention mixers
           at evenly spaced indices per jamba_attn_ratio (Trans-M / Mamba-M
           interleave with doubled sublayer count)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .layers import (
    AttentionParams,
    ExpertParams,
    LinearParams,
    MoEParams,
    RMSNormParams,
    SSMParams,
)

VARIANTS = ("UAM", "UAM-L", "UAM-M", "Trans", "Trans-M", "Mamba", "Mamba-M", "Jamba")


@dataclass
class ModelConfig:
    d_model: int = 16
    n_blocks: int = 4
    heads: int = 4
    n_experts: int = 4
    top_k: int = 2
    d_ff: int | None = None          # defaults to 4 * d_model
    variant: str = "UAM"
    jamba_attn_ratio: float = 0.25
    token_chunk: int = 1
    n_classes: int = 2
    load_balance_coeff: float = 0.01
    use_positions: bool = False

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.d_model % self.heads != 0:
            raise ValueError(f"heads={self.heads} does not divide d_model={self.d_model}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} outside 1..{self.n_experts}")
        if self.token_chunk < 1:
            raise ValueError("token_chunk must be >= 1")


@dataclass
class CostReport:
    parameter_count: int
    flops_per_token: int


# -- encoder parameter trees ------------------------------------------------------

@dataclass
class AmambaParams:
    ssm: SSMParams
    attn: AttentionParams


@dataclass
class AmambaMoEParams:
    self_attn: AttentionParams
    ssm: SSMParams
    concat_proj: LinearParams  # [2d -> d]
    moe: MoEParams


@dataclass
class UAMBlockParams:
    norm: RMSNormParams
    amamba: AmambaParams | None
    amamba_moe: AmambaMoEParams | None


@dataclass
class MixerBlockParams:
    """Baseline block: one mixer (attention or scan) plus one FFN or MoE."""
    norm: RMSNormParams
    attn: AttentionParams | None
    ssm: SSMParams | None
    ffn: ExpertParams | None
    moe: MoEParams | None


def amamba_init(rng: np.random.Generator, d: int, heads: int) -> AmambaParams:
    return AmambaParams(ssm=L.ssm_init(rng, d), attn=L.attention_init(rng, d, heads))


def amamba_moe_init(rng: np.random.Generator, cfg: ModelConfig) -> AmambaMoEParams:
    d = cfg.d_model
    return AmambaMoEParams(
        self_attn=L.attention_init(rng, d, cfg.heads),
        ssm=L.ssm_init(rng, d),
        concat_proj=L.linear_init(rng, 2 * d, d),
        moe=L.moe_init(rng, d, cfg.d_ff, cfg.n_experts, cfg.top_k, cfg.load_balance_coeff),
    )


def jamba_layout(n_blocks: int, attn_ratio: float) -> list[str]:
    """Mixer kinds for the 2*n_blocks Jamba sub-blocks.

    Attention sub-blocks sit at evenly spaced indices: one per
    round(1/attn_ratio) positions, at the end of each period.
    """
    total = 2 * n_blocks
    if attn_ratio <= 0:
        return ["ssm"] * total
    period = max(1, int(round(1.0 / attn_ratio)))
    return ["attn" if i % period == period - 1 else "ssm" for i in range(total)]


def build_blocks(cfg: ModelConfig, rng: np.random.Generator) -> list:
    d, v = cfg.d_model, cfg.variant

    def norm():
        return L.rmsnorm_init(d)

    def moe():
        return L.moe_init(rng, d, cfg.d_ff, cfg.n_experts, cfg.top_k, cfg.load_balance_coeff)

    if v == "UAM":
        return [
            UAMBlockParams(norm(), amamba_init(rng, d, cfg.heads), amamba_moe_init(rng, cfg))
            for _ in range(cfg.n_blocks)
        ]
    if v == "UAM-L":
        return [UAMBlockParams(norm(), amamba_init(rng, d, cfg.heads), None) for _ in range(cfg.n_blocks)]
    if v == "UAM-M":
        return [UAMBlockParams(norm(), None, amamba_moe_init(rng, cfg)) for _ in range(cfg.n_blocks)]
    if v in ("Trans", "Trans-M"):
        return [
            MixerBlockParams(
                norm(),
                attn=L.attention_init(rng, d, cfg.heads),
                ssm=None,
                ffn=L.expert_init(rng, d, cfg.d_ff) if v == "Trans" else None,
                moe=moe() if v == "Trans-M" else None,
            )
            for _ in range(cfg.n_blocks)
        ]
    if v in ("Mamba", "Mamba-M"):
        return [
            MixerBlockParams(
                norm(),
                attn=None,
                ssm=L.ssm_init(rng, d),
                ffn=L.expert_init(rng, d, cfg.d_ff) if v == "Mamba" else None,
                moe=moe() if v == "Mamba-M" else None,
            )
            for _ in range(cfg.n_blocks)
        ]
    if v == "Jamba":
        blocks = []
        for kind in jamba_layout(cfg.n_blocks, cfg.jamba_attn_ratio):
            blocks.append(
                MixerBlockParams(
                    norm(),
                    attn=L.attention_init(rng, d, cfg.heads) if kind == "attn" else None,
                    ssm=L.ssm_init(rng, d) if kind == "ssm" else None,
                    ffn=None,
                    moe=moe(),
                )
            )
        return blocks
    raise ValueError(f"unknown variant {v!r}")


# -- forwards -------------------------------------------------------------------

def amamba_forward(x_norm: Tensor, p: AmambaParams) -> Tensor:
    """Scan states feed the attention values (with residual); queries and
    keys come from the input; a further residual wraps the sublayer."""
    h = L.gated_scan(x_norm, p.ssm)
    out = L.cross_attention(x_norm, ad.add(h, x_norm), p.attn)
    return ad.add(x_norm, out)


def amamba_moe_forward(o_a: Tensor, p: AmambaMoEParams) -> tuple[Tensor, Tensor]:
    """Concat self-attention and scan outputs, project 2d->d, add the input
    residual, route through the MoE, and wrap with a final residual."""
    a = L.self_attention(o_a, p.self_attn)
    m = L.gated_scan(o_a, p.ssm)
    c = ad.concat([a, m], axis=-1)
    z = ad.add(linear_proj(c, p.concat_proj), o_a)
    out, aux = L.moe_forward(z, p.moe)
    return ad.add(out, o_a), aux


def linear_proj(x: Tensor, p: LinearParams) -> Tensor:
    return L.linear_forward(x, p)


def uam_block_forward(x: Tensor, p: UAMBlockParams) -> tuple[Tensor, Tensor]:
    x_norm = L.rmsnorm_forward(x, p.norm)
    y = amamba_forward(x_norm, p.amamba) if p.amamba is not None else x_norm
    if p.amamba_moe is not None:
        return amamba_moe_forward(y, p.amamba_moe)
    return y, Tensor(0.0)


def mixer_block_forward(x: Tensor, p: MixerBlockParams) -> tuple[Tensor, Tensor]:
    x_norm = L.rmsnorm_forward(x, p.norm)
    if p.attn is not None:
        mixed = ad.add(L.self_attention(x_norm, p.attn), x_norm)
    else:
        mixed = ad.add(L.gated_scan(x_norm, p.ssm), x_norm)
    if p.moe is not None:
        out, aux = L.moe_forward(mixed, p.moe)
        return ad.add(out, mixed), aux
    return ad.add(L.expert_forward(mixed, p.ffn), mixed), Tensor(0.0)


def block_forward(x: Tensor, block) -> tuple[Tensor, Tensor]:
    if isinstance(block, UAMBlockParams):
        return uam_block_forward(x, block)
    return mixer_block_forward(x, block)


# -- parameter counting ------------------------------------------------------------

def named_parameters(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Depth-first (field-order) walk of a dataclass/list tree, yielding
    trainable Tensor leaves with dotted path names. Order is deterministic."""
    out = []
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            out.append((prefix or "param", obj))
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            out.extend(named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.extend(named_parameters(item, f"{prefix}[{i}]"))
    return out


def count_parameters_tree(obj) -> int:
    """Exact learnable-scalar count by walking a parameter tree."""
    return sum(t.size for _, t in named_parameters(obj))


def _p_linear(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def _p_attn(d: int) -> int:
    return 4 * _p_linear(d, d)


def _p_ssm(d: int) -> int:
    return _p_linear(d, d)


def _p_expert(d: int, d_ff: int) -> int:
    return _p_linear(d, d_ff) + _p_linear(d_ff, d)


def _p_moe(d: int, d_ff: int, n_experts: int) -> int:
    return _p_linear(d, n_experts) + n_experts * _p_expert(d, d_ff)


def _p_block(cfg: ModelConfig, kind: str) -> int:
    d, ff, E = cfg.d_model, cfg.d_ff, cfg.n_experts
    norm = d
    amamba = _p_ssm(d) + _p_attn(d)
    amamba_moe = _p_attn(d) + _p_ssm(d) + _p_linear(2 * d, d) + _p_moe(d, ff, E)
    table = {
        "UAM": norm + amamba + amamba_moe,
        "UAM-L": norm + amamba,
        "UAM-M": norm + amamba_moe,
        "Trans": norm + _p_attn(d) + _p_expert(d, ff),
        "Trans-M": norm + _p_attn(d) + _p_moe(d, ff, E),
        "Mamba": norm + _p_ssm(d) + _p_expert(d, ff),
        "Mamba-M": norm + _p_ssm(d) + _p_moe(d, ff, E),
        "jamba-attn": norm + _p_attn(d) + _p_moe(d, ff, E),
        "jamba-ssm": norm + _p_ssm(d) + _p_moe(d, ff, E),
    }
    return table[kind]


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form learnable-scalar count for the full classifier model
    (input lift + blocks + classification head); must equal the tree walk."""
    d = cfg.d_model
    total = _p_linear(cfg.token_chunk, d) + _p_linear(d, cfg.n_classes)
    if cfg.variant == "Jamba":
        for kind in jamba_layout(cfg.n_blocks, cfg.jamba_attn_ratio):
            total += _p_block(cfg, f"jamba-{kind}")
    else:
        total += cfg.n_blocks * _p_block(cfg, cfg.variant)
    return total


# -- FLOP counting -------------------------------------------------------------------
#
# Convention: one multiply-accumulate = 2 flops; additions/multiplies = 1
# per element; transcendentals (exp, sigmoid) = 4 per element; divisions = 1;
# comparisons and data movement are free. Counts are per token, analytic,
# with only top_k experts active. The input lift and all block sublayers are
# counted; mean-pool and classification head are per-sequence epilogue and
# excluded.

def flops_linear(d_in: int, d_out: int, bias: bool = True) -> int:
    return 2 * d_in * d_out + (d_out if bias else 0)


def flops_rmsnorm(d: int) -> int:
    return 4 * d + 2


def flops_sigmoid(d: int) -> int:
    return 4 * d


def flops_scan(d: int) -> int:
    # gate projection + sigmoid + per-step recurrence (1-g, two muls, add)
    return flops_linear(d, d) + flops_sigmoid(d) + 4 * d


def flops_attention_scores(T: int, d: int) -> int:
    """Score and weighted-sum matmuls for a length-T sequence: 2T^2 d each."""
    return 4 * T * T * d


def flops_softmax(width: int) -> int:
    return 6 * width


def flops_attention(T: int, d: int, heads: int) -> int:
    # projections + per-token share of scores/weighted sum + softmax rows + Q scaling
    per_token_scores = flops_attention_scores(T, d) // T
    return 4 * flops_linear(d, d) + per_token_scores + heads * flops_softmax(T) + d


def flops_expert(d: int, d_ff: int) -> int:
    return flops_linear(d, d_ff) + 5 * d_ff + flops_linear(d_ff, d)


def flops_moe(d: int, d_ff: int, n_experts: int, top_k: int) -> int:
    router = flops_linear(d, n_experts) + flops_softmax(n_experts)
    return router + top_k * flops_expert(d, d_ff) + (2 * top_k - 1) * d


def _f_block(cfg: ModelConfig, kind: str, T: int) -> int:
    d, ff, E, k = cfg.d_model, cfg.d_ff, cfg.n_experts, cfg.top_k
    attn = flops_attention(T, d, cfg.heads)
    scan = flops_scan(d)
    amamba = scan + d + attn + d                     # value residual + outer residual
    amamba_moe = attn + scan + flops_linear(2 * d, d) + d + flops_moe(d, ff, E, k) + d
    table = {
        "UAM": flops_rmsnorm(d) + amamba + amamba_moe,
        "UAM-L": flops_rmsnorm(d) + amamba,
        "UAM-M": flops_rmsnorm(d) + amamba_moe,
        "Trans": flops_rmsnorm(d) + attn + d + flops_expert(d, ff) + d,
        "Trans-M": flops_rmsnorm(d) + attn + d + flops_moe(d, ff, E, k) + d,
        "Mamba": flops_rmsnorm(d) + scan + d + flops_expert(d, ff) + d,
        "Mamba-M": flops_rmsnorm(d) + scan + d + flops_moe(d, ff, E, k) + d,
        "jamba-attn": flops_rmsnorm(d) + attn + d + flops_moe(d, ff, E, k) + d,
        "jamba-ssm": flops_rmsnorm(d) + scan + d + flops_moe(d, ff, E, k) + d,
    }
    return table[kind]


def count_flops(cfg: ModelConfig, T: int) -> int:
    """Analytic per-token flops for a length-T sequence (see convention above)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    total = flops_linear(cfg.token_chunk, cfg.d_model)
    if cfg.variant == "Jamba":
        for kind in jamba_layout(cfg.n_blocks, cfg.jamba_attn_ratio):
            total += _f_block(cfg, f"jamba-{kind}", T)
    else:
        total += cfg.n_blocks * _f_block(cfg, cfg.variant, T)
    return total


def cost_report(cfg: ModelConfig, T: int) -> CostReport:
    return CostReport(parameter_count=count_parameters(cfg), flops_per_token=count_flops(cfg, T))
