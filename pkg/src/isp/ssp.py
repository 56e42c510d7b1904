"""Self-structural prompt refinement.

Prompts of one modality are refined by single-head cross-attention over
the same modality's highest-response frozen tokens: the k content rows
with the largest channel-wise sum of squares (k = prompt count) serve
as keys and values, the prompts as queries. The attended result carries
a residual of the selected tokens themselves, then a pre-norm 2-layer
MLP with its own residual. Both modalities share this code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import CONTENT, TokenSequence
from .tensor import (
    Tensor,
    add,
    gelu,
    layer_norm,
    matmul,
    matmul_t,
    mul,
    slice_rows,
    softmax_rows,
    topk_rows,
)

MLP_RATIO = 4
PARAM_STD = 0.02

RESIDUAL_MODES = ("tokens", "prompts")


@dataclass
class SspParams:
    """Trainable projections of one refinement block (one layer, one
    modality): attention q/k/v/out, two layer-norm affine pairs, and the
    2-layer MLP."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln_attn_gain: Tensor
    ln_attn_bias: Tensor
    ln_mlp_gain: Tensor
    ln_mlp_bias: Tensor
    mlp_w1: Tensor
    mlp_w2: Tensor

    FIELD_ORDER = ("wq", "wk", "wv", "wo", "ln_attn_gain", "ln_attn_bias",
                   "ln_mlp_gain", "ln_mlp_bias", "mlp_w1", "mlp_w2")

    def named(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.FIELD_ORDER}

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


def init_ssp_params(dim: int, rng: np.random.Generator) -> SspParams:
    """Gaussian(0, 0.02^2) projections, identity layer norms; draws consume
    the generator in field order (wq, wk, wv, wo, mlp_w1, mlp_w2)."""
    def gauss(*shape):
        return Tensor(rng.standard_normal(shape) * PARAM_STD, requires_grad=True)

    return SspParams(
        wq=gauss(dim, dim), wk=gauss(dim, dim), wv=gauss(dim, dim),
        wo=gauss(dim, dim),
        ln_attn_gain=Tensor(np.ones(dim), requires_grad=True),
        ln_attn_bias=Tensor(np.zeros(dim), requires_grad=True),
        ln_mlp_gain=Tensor(np.ones(dim), requires_grad=True),
        ln_mlp_bias=Tensor(np.zeros(dim), requires_grad=True),
        mlp_w1=gauss(dim, MLP_RATIO * dim),
        mlp_w2=gauss(MLP_RATIO * dim, dim),
    )


def ssp_param_count(dim: int) -> int:
    """Closed-form scalar count of one SspParams block."""
    return (4 + 2 * MLP_RATIO) * dim * dim + 4 * dim


def select_tokens(seq: TokenSequence, k: int) -> Tensor:
    """The k content rows with the largest response (sum of squared
    channels), descending, ties by original index. Class-token and
    prompt rows are excluded from the pool."""
    lo, hi = seq.content_bounds()
    if k > hi - lo:
        raise ValueError(f"cannot select {k} tokens from {hi - lo} content rows")
    pool = slice_rows(seq.tokens, lo, hi)
    rows, _ = topk_rows(pool, k)
    return rows


def cross_attention(prompts: Tensor, selected: Tensor, params: SspParams) -> Tensor:
    """Single-head scaled dot-product attention: prompts query the
    selected tokens. No residual; row weights sum to 1."""
    pn = layer_norm(prompts, params.ln_attn_gain, params.ln_attn_bias)
    xn = layer_norm(selected, params.ln_attn_gain, params.ln_attn_bias)
    q = matmul(pn, params.wq)
    k = matmul(xn, params.wk)
    v = matmul(xn, params.wv)
    scale = 1.0 / np.sqrt(params.dim)
    weights = softmax_rows(mul(matmul_t(q, k), scale))
    return matmul(matmul(weights, v), params.wo)


def attention_weights(prompts: Tensor, selected: Tensor, params: SspParams) -> Tensor:
    """The softmax weight matrix alone (diagnostics and tests)."""
    pn = layer_norm(prompts, params.ln_attn_gain, params.ln_attn_bias)
    xn = layer_norm(selected, params.ln_attn_gain, params.ln_attn_bias)
    q = matmul(pn, params.wq)
    k = matmul(xn, params.wk)
    return softmax_rows(mul(matmul_t(q, k), 1.0 / np.sqrt(params.dim)))


def refine_prompts(prompts: Tensor, selected: Tensor, params: SspParams,
                   residual: str = "tokens") -> Tensor:
    """Refine prompts against same-modality selected tokens.

    The attention residual adds the selected tokens by default
    (``residual="tokens"``); ``"prompts"`` switches to the conventional
    +prompts variant for ablation.
    """
    if prompts.shape != selected.shape:
        raise ValueError(f"prompt rows {prompts.shape} and selected rows "
                         f"{selected.shape} must match")
    if residual not in RESIDUAL_MODES:
        raise ValueError(f"residual must be one of {RESIDUAL_MODES}")
    attended = cross_attention(prompts, selected, params)
    a = add(attended, selected if residual == "tokens" else prompts)
    normed = layer_norm(a, params.ln_mlp_gain, params.ln_mlp_bias)
    mlp = matmul(gelu(matmul(normed, params.mlp_w1)), params.mlp_w2)
    return add(mlp, a)
