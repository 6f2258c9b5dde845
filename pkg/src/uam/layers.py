"""Neural primitives: linear projection, RMSNorm, gated SSM scan, attention,
feed-forward expert, and top-k mixture-of-experts routing.

All forwards are functional: parameters live in small dataclasses of
``Tensor`` leaves and are passed in explicitly. Layers accept inputs with
arbitrary leading batch axes; sequence layers operate on the ``[..., T, d]``
convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


# -- linear --------------------------------------------------------------------

@dataclass
class LinearParams:
    weight: Tensor  # [d_in, d_out]
    bias: Tensor | None = None

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


def linear_init(rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True) -> LinearParams:
    w = Tensor(xavier_uniform(rng, d_in, d_out), requires_grad=True)
    b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
    return LinearParams(weight=w, bias=b)


def linear_identity(d: int) -> LinearParams:
    """Identity projection with zero bias (frozen); used by equation-literal oracles."""
    return LinearParams(weight=Tensor(np.eye(d)), bias=None)


def linear_forward(x: Tensor, p: LinearParams) -> Tensor:
    if x.shape[-1] != p.d_in:
        raise ShapeError(f"linear: input last axis {x.shape} does not match weight {p.weight.shape}")
    y = ad.matmul(x, p.weight)
    if p.bias is not None:
        y = ad.add(y, p.bias)
    return y


# -- RMSNorm --------------------------------------------------------------------

@dataclass
class RMSNormParams:
    gain: Tensor  # [d]
    epsilon: float = 1e-6


def rmsnorm_init(d: int, epsilon: float = 1e-6) -> RMSNormParams:
    return RMSNormParams(gain=Tensor(np.ones(d), requires_grad=True), epsilon=epsilon)


def rmsnorm_forward(x: Tensor, p: RMSNormParams) -> Tensor:
    """y_j = gain_j * x_j / sqrt(mean_k(x_k^2) + eps), per trailing vector."""
    ms = ad.tmean(ad.mul(x, x), axis=-1, keepdims=True)
    inv = ad.rsqrt(ad.add(ms, Tensor(p.epsilon)))
    return ad.mul(ad.mul(x, inv), p.gain)


# -- gated SSM scan ---------------------------------------------------------------

@dataclass
class SSMParams:
    gate_proj: LinearParams          # [d -> d]
    initial_state: Tensor = None     # [d], non-trainable buffer

    def __post_init__(self):
        if self.initial_state is None:
            self.initial_state = Tensor(np.zeros(self.gate_proj.d_out))


def ssm_init(rng: np.random.Generator, d: int) -> SSMParams:
    # bias 0 => g = 0.5 at init: balanced memory/update
    return SSMParams(gate_proj=linear_init(rng, d, d))


def gated_scan(x: Tensor, p: SSMParams) -> Tensor:
    """h_t = (1 - g_t) * h_{t-1} + g_t * x_t with g_t = sigmoid(gate_proj(x_t)).

    ``x`` is [..., T, d]; returns all hidden states [..., T, d] with
    h_0 = initial_state. Gates are computed per timestep, per channel.
    """
    T = x.shape[-2]
    g = ad.sigmoid(linear_forward(x, p.gate_proj))
    h = p.initial_state
    states = []
    for t in range(T):
        xt = ad.select(x, t, axis=-2)
        gt = ad.select(g, t, axis=-2)
        keep = ad.sub(Tensor(1.0), gt)
        h = ad.add(ad.mul(keep, h), ad.mul(gt, xt))
        states.append(h)
    return ad.stack(states, axis=-2)


# -- attention ---------------------------------------------------------------------

@dataclass
class AttentionParams:
    w_q: LinearParams
    w_k: LinearParams
    w_v: LinearParams
    w_o: LinearParams
    heads: int = 1


def attention_init(rng: np.random.Generator, d: int, heads: int) -> AttentionParams:
    if d % heads != 0:
        raise ShapeError(f"attention: heads={heads} does not divide d={d}")
    return AttentionParams(
        w_q=linear_init(rng, d, d),
        w_k=linear_init(rng, d, d),
        w_v=linear_init(rng, d, d),
        w_o=linear_init(rng, d, d),
        heads=heads,
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., T, d] -> [..., H, T, d/H]
    *lead, T, d = x.shape
    x = ad.reshape(x, (*lead, T, heads, d // heads))
    return ad.swapaxes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    # [..., H, T, dk] -> [..., T, H*dk]
    *lead, H, T, dk = x.shape
    x = ad.swapaxes(x, -3, -2)
    return ad.reshape(x, (*lead, T, H * dk))


def cross_attention(
    q_src: Tensor, v_src: Tensor, p: AttentionParams, with_weights: bool = False
):
    """softmax(Q K^T / sqrt(d_k)) V with Q, K from ``q_src`` and V from ``v_src``.

    Multi-head scaled dot product; heads concatenated then projected by w_o.
    With heads=1 and identity w_o this reproduces the single-head equation
    exactly. Returns (out, weights) when ``with_weights``.
    """
    if q_src.shape != v_src.shape:
        raise ShapeError(f"cross_attention: q_src {q_src.shape} and v_src {v_src.shape} differ")
    d = q_src.shape[-1]
    if d % p.heads != 0:
        raise ShapeError(f"cross_attention: heads={p.heads} does not divide d={d}")
    dk = d // p.heads
    q = _split_heads(linear_forward(q_src, p.w_q), p.heads)
    k = _split_heads(linear_forward(q_src, p.w_k), p.heads)
    v = _split_heads(linear_forward(v_src, p.w_v), p.heads)
    # scaling Q up front keeps the big [.., T, T] intermediates to two
    q = ad.mul(q, Tensor(1.0 / np.sqrt(dk)))
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2))
    weights = ad.softmax_last(scores)
    ctx = ad.matmul(weights, v)
    out = linear_forward(_merge_heads(ctx), p.w_o)
    if with_weights:
        return out, weights
    return out


def self_attention(x: Tensor, p: AttentionParams, with_weights: bool = False):
    """cross_attention with q_src = v_src = x."""
    return cross_attention(x, x, p, with_weights=with_weights)


# -- feed-forward expert -------------------------------------------------------------

@dataclass
class ExpertParams:
    up: LinearParams    # [d_in -> d_ff]
    down: LinearParams  # [d_ff -> d_in]


def expert_init(rng: np.random.Generator, d: int, d_ff: int) -> ExpertParams:
    return ExpertParams(up=linear_init(rng, d, d_ff), down=linear_init(rng, d_ff, d))


def smooth_gelu(x: Tensor) -> Tensor:
    """x * sigmoid(1.702 x): smooth expert activation with closed-form gradient."""
    return ad.mul(x, ad.sigmoid(ad.mul(x, Tensor(1.702))))


def expert_forward(x: Tensor, p: ExpertParams) -> Tensor:
    return linear_forward(smooth_gelu(linear_forward(x, p.up)), p.down)


# -- mixture of experts ---------------------------------------------------------------

@dataclass
class MoEParams:
    router: LinearParams              # [d_in -> E]
    experts: list                     # E ExpertParams
    top_k: int = 2
    load_balance_coeff: float = 0.01

    @property
    def n_experts(self) -> int:
        return len(self.experts)


def moe_init(
    rng: np.random.Generator,
    d: int,
    d_ff: int,
    n_experts: int,
    top_k: int = 2,
    load_balance_coeff: float = 0.01,
) -> MoEParams:
    experts = [expert_init(rng, d, d_ff) for _ in range(n_experts)]
    return MoEParams(
        router=linear_init(rng, d, n_experts),
        experts=experts,
        top_k=top_k,
        load_balance_coeff=load_balance_coeff,
    )


_MASK_NEG = 1e30


def moe_forward(x: Tensor, p: MoEParams) -> tuple[Tensor, Tensor]:
    """Top-k routed mixture of experts over the last axis.

    Per token: select the top_k experts by router logit (ties to the lower
    index), renormalize gates with a softmax over the selected logits only,
    and sum gate_e * expert_e(x). Unselected experts do no work.

    aux_loss = coeff * E * sum_e(fraction_of_tokens_routed_to_e
                                 * mean_router_probability_of_e)
    with probabilities from the full softmax over all E logits.
    """
    E = p.n_experts
    if p.top_k > E:
        raise ShapeError(f"moe: top_k={p.top_k} exceeds {E} experts")
    lead = x.shape[:-1]
    d = x.shape[-1]
    n = int(np.prod(lead)) if lead else 1
    flat = ad.reshape(x, (n, d))

    logits = linear_forward(flat, p.router)                      # [n, E]
    chosen = ad.topk_indices(logits.data, p.top_k)               # [n, k]
    sel = np.zeros((n, E))
    np.put_along_axis(sel, chosen, 1.0, axis=-1)

    # additive mask: unselected logits -> -1e30, softmax then renormalizes
    # over the selected set only and underflows to exactly 0 elsewhere
    masked = ad.add(logits, Tensor((sel - 1.0) * _MASK_NEG))
    gates = ad.softmax_last(masked)                              # [n, E]

    out = None
    for e in range(E):
        rows = np.nonzero(sel[:, e])[0]
        if rows.size == 0:
            continue
        xe = ad.gather_rows(flat, rows)
        ge = ad.gather_rows(ad.reshape(ad.select(gates, e, axis=-1), (n, 1)), rows)
        ye = ad.mul(expert_forward(xe, p.experts[e]), ge)
        piece = ad.scatter_rows(ye, rows, n)
        out = piece if out is None else ad.add(out, piece)

    probs = ad.softmax_last(logits)
    frac = sel.mean(axis=0)                                       # constant [E]
    aux = ad.mul(
        ad.tsum(ad.mul(ad.tmean(probs, axis=0), Tensor(frac))),
        Tensor(p.load_balance_coeff * E),
    )
    return ad.reshape(out, x.shape), aux
