"""Cross-structural prompt refinement.

Visual tokens are first reduced to the text width by a parameter-free
orthonormal channel DCT that keeps the low-frequency coefficients. Each
prompt is then described by its cosine affinity profile over the
opposite modality's tokens; a Gaussian kernel of pairwise profile
distances yields a symmetric prompt-prompt graph with unit diagonal,
and a single degree-normalized graph convolution propagates information
between the prompts of a modality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    InvalidTruncationError,
    Tensor,
    cosine_rows,
    dct_channels,
    idct_channels,
    matmul,
    rbf_rows,
    relu,
    slice_cols,
    sym_normalize,
)

PARAM_STD = 0.02


@dataclass
class CspParams:
    """Trainable graph-convolution projections of one layer/modality."""

    theta1: Tensor
    theta2: Tensor

    FIELD_ORDER = ("theta1", "theta2")

    def named(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.FIELD_ORDER}


def init_csp_params(dim: int, rng: np.random.Generator) -> CspParams:
    def gauss():
        return Tensor(rng.standard_normal((dim, dim)) * PARAM_STD,
                      requires_grad=True)
    return CspParams(theta1=gauss(), theta2=gauss())


def csp_param_count(dim: int) -> int:
    return 2 * dim * dim


@dataclass
class AffinityPair:
    """Cross-modal affinity matrices and the derived prompt-prompt graphs
    of one layer. a_vt/a_tv hold cosines in [-1, 1]; a_vv/a_tt are
    symmetric with unit diagonal and entries in (0, 1]."""

    a_vt: Tensor
    a_tv: Tensor
    a_vv: Tensor
    a_tt: Tensor
    beta: float


def reduce_visual(tokens: Tensor, d_t: int) -> Tensor:
    """Channel-reduce visual rows to width d_t: orthonormal DCT, keep the
    d_t lowest-frequency coefficients, inverse transform at length d_t.

    The output lives in the d_t-dimensional reconstruction space so it
    can be compared against text tokens.
    """
    d_v = tokens.shape[1]
    if d_t > d_v:
        raise InvalidTruncationError(
            f"cannot reduce width {d_v} to larger width {d_t}")
    coeffs = dct_channels(tokens)
    kept = coeffs if d_t == d_v else slice_cols(coeffs, 0, d_t)
    return idct_channels(kept, d_t)


def prompt_graph(affinity: Tensor, beta: float) -> Tensor:
    """Prompt-prompt adjacency from an affinity-profile matrix: entry
    (i, j) is exp(-beta * ||profile_i - profile_j||^2)."""
    return rbf_rows(affinity, beta)


def cross_affinities(refined_visual: Tensor, refined_text: Tensor,
                     text_tokens: Tensor, reduced_visual: Tensor,
                     beta: float = 10.0) -> AffinityPair:
    """Build both cross-modal affinity matrices and the prompt graphs.

    Visual prompts are channel-reduced to the text width before the
    cosine; text prompts are compared against all reduced visual rows.
    """
    d_t = text_tokens.shape[1]
    visual_reduced_prompts = reduce_visual(refined_visual, d_t)
    a_vt = cosine_rows(visual_reduced_prompts, text_tokens)
    a_tv = cosine_rows(refined_text, reduced_visual)
    return AffinityPair(a_vt=a_vt, a_tv=a_tv,
                        a_vv=prompt_graph(a_vt, beta),
                        a_tt=prompt_graph(a_tv, beta), beta=beta)


def graph_refine(prompts: Tensor, adjacency: Tensor, params: CspParams) -> Tensor:
    """One degree-normalized graph convolution over the prompt graph:
    relu(D^{-1/2} A D^{-1/2} P theta1) theta2."""
    normalized = sym_normalize(adjacency)
    return matmul(relu(matmul(matmul(normalized, prompts), params.theta1)),
                  params.theta2)
