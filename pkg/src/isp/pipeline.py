"""Prompted forward pass through the frozen dual encoder.

Learnable prompt rows are appended to the embedded visual sequence and
to every class's text sequence once, at the input. Each frozen block
then processes the sequences; on configured layers the prompts are
refined in place -- first within each modality against its
highest-response tokens, then across modalities through the affinity
graphs -- and the refined rows propagate into the next layer (they are
never re-injected fresh). After the last layer the pooled features meet
in the shared space and a temperature-scaled cosine softmax yields
class probabilities.

The text branch of each class evolves independently (prompt rows
diverge per class across layers); the visual branch is shared. The
cross-modal context seen by the visual prompts is the mean text token
matrix over the active classes by default, or the per-class
concatenation of affinity profiles with ``csp_text_context="per_class"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .csp import (
    AffinityPair,
    CspParams,
    csp_param_count,
    graph_refine,
    init_csp_params,
    prompt_graph,
    reduce_visual,
)
from .encoder import TEXT, VISUAL, FrozenEncoder, TokenSequence
from .ssp import (
    SspParams,
    init_ssp_params,
    refine_prompts,
    select_tokens,
    ssp_param_count,
)
from .tensor import Tensor, concat_cols, cosine_rows, mul, reshape, slice_rows, softmax_rows

PROMPT_STD = 0.02

TEXT_CONTEXT_MODES = ("mean_classes", "per_class")


@dataclass
class PromptSet:
    """All trainable state: input prompt matrices plus per-layer
    refinement parameters for the active layer range."""

    p_v0: Tensor
    p_t0: Tensor
    isp_layers: tuple[int, ...]
    ssp_visual: dict[int, SspParams] = field(default_factory=dict)
    ssp_text: dict[int, SspParams] = field(default_factory=dict)
    csp_visual: dict[int, CspParams] = field(default_factory=dict)
    csp_text: dict[int, CspParams] = field(default_factory=dict)

    @property
    def num_visual(self) -> int:
        return self.p_v0.shape[0]

    @property
    def num_text(self) -> int:
        return self.p_t0.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        """Named trainable parameters in a fixed, documented order:
        the two input prompt matrices, then per active layer (ascending)
        the visual SSP block, text SSP block, visual CSP block, text CSP
        block, each in field order."""
        params: dict[str, Tensor] = {
            "prompts/visual": self.p_v0,
            "prompts/text": self.p_t0,
        }
        for layer in self.isp_layers:
            for mod, blocks in ((VISUAL, self.ssp_visual), (TEXT, self.ssp_text)):
                for name, t in blocks[layer].named().items():
                    params[f"ssp/l{layer:02d}/{mod}/{name}"] = t
            for mod, blocks in ((VISUAL, self.csp_visual), (TEXT, self.csp_text)):
                for name, t in blocks[layer].named().items():
                    params[f"csp/l{layer:02d}/{mod}/{name}"] = t
        return params

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.parameters().items():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ValueError(f"parameter {name}: shape {src.shape} != "
                                 f"{t.data.shape}")
            t.data[:] = src


@dataclass
class PromptedOutput:
    """Features and class probabilities of one prompted forward pass."""

    x: Tensor
    w: Tensor
    p: Tensor
    trace: list[dict] | None = None

    def __post_init__(self):
        if abs(float(self.p.data.sum()) - 1.0) > 1e-10:
            raise ValueError("class probabilities must sum to 1")


def parse_isp_layers(spec: str, num_layers: int) -> tuple[int, ...]:
    """Parse an inclusive layer range like "1-12", a single layer "7",
    or "none" for an empty range."""
    text = spec.strip().lower()
    if text in ("none", ""):
        return ()
    if "-" in text:
        lo_s, hi_s = text.split("-", 1)
        lo, hi = int(lo_s), int(hi_s)
    else:
        lo = hi = int(text)
    if not 1 <= lo <= hi <= num_layers:
        raise ValueError(f"isp layer range {spec!r} outside [1, {num_layers}]")
    return tuple(range(lo, hi + 1))


def isp_layer_param_count(visual_dim: int, text_dim: int) -> int:
    """Closed-form trainable parameter count of one active layer."""
    return sum(ssp_param_count(d) + csp_param_count(d)
               for d in (visual_dim, text_dim))


def init_prompts(encoder_config, num_visual: int, num_text: int,
                 isp_layers: Sequence[int], seed) -> PromptSet:
    """Gaussian(0, 0.02^2) prompt vectors and per-layer refinement blocks,
    deterministic per seed.

    Draw order: visual prompts, text prompts, then per active layer the
    visual SSP, text SSP, visual CSP, text CSP blocks.
    """
    rng = np.random.default_rng(seed)
    p_v0 = Tensor(rng.standard_normal((num_visual, encoder_config.visual_dim))
                  * PROMPT_STD, requires_grad=True)
    p_t0 = Tensor(rng.standard_normal((num_text, encoder_config.text_dim))
                  * PROMPT_STD, requires_grad=True)
    prompts = PromptSet(p_v0=p_v0, p_t0=p_t0, isp_layers=tuple(sorted(isp_layers)))
    for layer in prompts.isp_layers:
        prompts.ssp_visual[layer] = init_ssp_params(encoder_config.visual_dim, rng)
        prompts.ssp_text[layer] = init_ssp_params(encoder_config.text_dim, rng)
        prompts.csp_visual[layer] = init_csp_params(encoder_config.visual_dim, rng)
        prompts.csp_text[layer] = init_csp_params(encoder_config.text_dim, rng)
    return prompts


def _mean_tokens(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return mul(total, 1.0 / len(parts))


def forward(image, prompt_set: PromptSet, encoder: FrozenEncoder,
            class_ids: Iterable[int], *, beta: float = 10.0,
            ssp_residual: str = "tokens", csp_text_context: str = "mean_classes",
            text_pool: str = "last", trace: bool = False,
            mask_prompt_attention: bool = False) -> PromptedOutput:
    """Run the prompted dual-encoder forward pass for one image against
    a class set. Returns features, probabilities, and (optionally) a
    per-layer trace of refined prompts and affinity matrices."""
    if csp_text_context not in TEXT_CONTEXT_MODES:
        raise ValueError(f"csp_text_context must be one of {TEXT_CONTEXT_MODES}")
    cfg = encoder.config
    class_ids = list(class_ids)
    vis = encoder.embed_image(image).append_prompts(prompt_set.p_v0)
    txts = [encoder.embed_text(c).append_prompts(prompt_set.p_t0)
            for c in class_ids]
    traces: list[dict] | None = [] if trace else None

    for layer in range(1, cfg.num_layers + 1):
        vis = encoder.encode_layer(vis, layer, mask_prompt_attention)
        txts = [encoder.encode_layer(t, layer, mask_prompt_attention) for t in txts]
        if layer not in prompt_set.isp_layers:
            continue

        # within-modality refinement
        pv = refine_prompts(vis.prompt_rows(),
                            select_tokens(vis, prompt_set.num_visual),
                            prompt_set.ssp_visual[layer], ssp_residual)
        pts = [refine_prompts(t.prompt_rows(),
                              select_tokens(t, prompt_set.num_text),
                              prompt_set.ssp_text[layer], ssp_residual)
               for t in txts]

        # cross-modality refinement through the affinity graphs
        vis = vis.with_prompt_rows(pv)
        reduced = reduce_visual(vis.tokens, cfg.text_dim)
        pv_reduced = slice_rows(reduced, vis.prompt_start, len(vis.roles))
        text_rows = [slice_rows(t.tokens, 0, t.prompt_start) for t in txts]
        if csp_text_context == "mean_classes":
            a_vt = cosine_rows(pv_reduced, _mean_tokens(text_rows))
        else:
            a_vt = concat_cols([cosine_rows(pv_reduced, rows) for rows in text_rows])
        a_vv = prompt_graph(a_vt, beta)
        pv_bar = graph_refine(pv, a_vv, prompt_set.csp_visual[layer])

        new_txts = []
        a_tv0 = a_tt0 = None
        for i, t in enumerate(txts):
            a_tv = cosine_rows(pts[i], reduced)
            a_tt = prompt_graph(a_tv, beta)
            if i == 0:
                a_tv0, a_tt0 = a_tv, a_tt
            pt_bar = graph_refine(pts[i], a_tt, prompt_set.csp_text[layer])
            new_txts.append(t.with_prompt_rows(pt_bar))

        vis = vis.with_prompt_rows(pv_bar)
        txts = new_txts
        if traces is not None:
            traces.append({
                "layer": layer,
                "visual_prompts": pv_bar.data.copy(),
                "affinities": AffinityPair(a_vt=a_vt, a_tv=a_tv0,
                                           a_vv=a_vv, a_tt=a_tt0, beta=beta),
            })

    x = encoder.project_features(vis, text_pool)
    w_rows = [reshape(encoder.project_features(t, text_pool), (1, cfg.embed_dim))
              for t in txts]
    w = w_rows[0] if len(w_rows) == 1 else _concat(w_rows)
    logits = mul(cosine_rows(reshape(x, (1, cfg.embed_dim)), w),
                 1.0 / cfg.temperature)
    p = reshape(softmax_rows(logits), (len(class_ids),))
    return PromptedOutput(x=x, w=w, p=p, trace=traces)


def _concat(rows: list[Tensor]) -> Tensor:
    from .tensor import concat_rows
    return concat_rows(rows)
