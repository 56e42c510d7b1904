"""Named finite-difference gradient checks over every differentiable
operation, from single primitives up to the full forward pass and the
difficulty-weighted loss.

Fixtures use well-conditioned magnitudes (unit-scale projections) so
the comparison probes the backward implementation rather than
finite-difference round-off. The package-wide gate is 1e-4.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .csp import graph_refine, init_csp_params, prompt_graph, reduce_visual
from .encoder import EncoderConfig, FrozenEncoder
from .objective import total_loss
from .pipeline import PromptSet, forward, init_prompts, parse_isp_layers
from .ssp import SspParams, init_ssp_params, refine_prompts
from .tensor import (
    GradReport,
    Tensor,
    cosine_rows,
    dct_channels,
    grad_check,
    idct_channels,
    layer_norm,
    log,
    matmul,
    mul,
    rbf_rows,
    slice_cols,
    softmax_rows,
    sum_all,
    sym_normalize,
    take,
    topk_rows,
)

TOLERANCE = 1e-4

TOY_ENCODER = EncoderConfig(num_layers=2, visual_dim=8, text_dim=4, embed_dim=4,
                            visual_tokens=5, text_tokens=7, num_heads=2, seed=5)
TOY_CLASSES = 2


def _rand(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


def _scaled_ssp_params(dim: int, seed: int) -> SspParams:
    params = init_ssp_params(dim, np.random.default_rng(seed))
    for name in ("wq", "wk", "wv", "wo", "mlp_w1", "mlp_w2"):
        getattr(params, name).data[:] *= 20.0
    return params


def _toy_setup():
    encoder = FrozenEncoder(TOY_ENCODER)
    encoder.bind_class_identities(
        _rand((TOY_CLASSES, TOY_ENCODER.text_dim), 31))
    image = _rand((TOY_ENCODER.visual_tokens, TOY_ENCODER.visual_dim), 32)
    prompts = init_prompts(TOY_ENCODER, 4, 6,
                           parse_isp_layers("1-2", 2), seed=33)
    return encoder, image, prompts


def _with_visual_prompts(base: PromptSet, x: Tensor) -> PromptSet:
    return PromptSet(p_v0=x, p_t0=base.p_t0, isp_layers=base.isp_layers,
                     ssp_visual=base.ssp_visual, ssp_text=base.ssp_text,
                     csp_visual=base.csp_visual, csp_text=base.csp_text)


def check_matmul() -> list[GradReport]:
    b = Tensor(_rand((4, 2), 1))
    return [grad_check(lambda x: sum_all(matmul(x, b)),
                       Tensor(_rand((3, 4), 2)), "matmul")]


def check_softmax_rows() -> list[GradReport]:
    w = Tensor(_rand((2, 4), 3))
    return [grad_check(lambda x: sum_all(mul(softmax_rows(x), w)),
                       Tensor(_rand((2, 4), 4)), "softmax_rows")]


def check_layer_norm() -> list[GradReport]:
    gain = Tensor(_rand(6, 5) + 2.0)
    bias = Tensor(_rand(6, 6))
    w = Tensor(_rand((3, 6), 7))
    return [grad_check(lambda x: sum_all(mul(layer_norm(x, gain, bias), w)),
                       Tensor(_rand((3, 6), 8)), "layer_norm")]


def check_cosine_rows() -> list[GradReport]:
    b = Tensor(_rand((4, 5), 9))
    w = Tensor(_rand((3, 4), 10))
    return [grad_check(lambda x: sum_all(mul(cosine_rows(x, b), w)),
                       Tensor(_rand((3, 5), 11)), "cosine_rows")]


def check_dct() -> list[GradReport]:
    w = Tensor(_rand((3, 8), 12))
    def f(x):
        return sum_all(mul(idct_channels(slice_cols(dct_channels(x), 0, 5), 8), w))
    return [grad_check(f, Tensor(_rand((3, 8), 13)), "dct")]


def check_topk_rows() -> list[GradReport]:
    return [grad_check(lambda x: sum_all(topk_rows(x, 2)[0]),
                       Tensor(_rand((5, 3), 14)), "topk_rows")]


def check_rbf_rows() -> list[GradReport]:
    w = Tensor(_rand((4, 4), 15))
    return [grad_check(lambda x: sum_all(mul(rbf_rows(x, 10.0), w)),
                       Tensor(0.3 * _rand((4, 5), 16)), "rbf_rows")]


def check_sym_normalize() -> list[GradReport]:
    w = Tensor(_rand((4, 4), 17))
    def f(x):
        return sum_all(mul(sym_normalize(rbf_rows(x, 3.0)), w))
    return [grad_check(f, Tensor(0.5 * _rand((4, 3), 18)), "sym_normalize")]


def check_ssp_block() -> list[GradReport]:
    dim = 8
    prompts = Tensor(_rand((4, dim), 19))
    selected = Tensor(_rand((4, dim), 20))
    params = _scaled_ssp_params(dim, 21)
    reports = [grad_check(lambda p: sum_all(refine_prompts(p, selected, params)),
                          prompts, "ssp_block/prompts")]
    for name in SspParams.FIELD_ORDER:
        def f(x, name=name):
            trial = dataclasses.replace(params, **{name: x})
            return sum_all(refine_prompts(prompts, selected, trial))
        reports.append(grad_check(f, getattr(params, name), f"ssp_block/{name}"))
    return reports


def check_csp_graph() -> list[GradReport]:
    dim = 8
    rng = np.random.default_rng(22)
    params = init_csp_params(dim, rng)
    params.theta1.data[:] *= 20.0
    params.theta2.data[:] *= 20.0
    prompts = Tensor(rng.standard_normal((4, dim)))
    profiles = Tensor(0.3 * rng.standard_normal((4, 6)))
    reports = [grad_check(
        lambda p: sum_all(graph_refine(p, prompt_graph(profiles, 10.0), params)),
        prompts, "csp_graph/prompts")]
    reports.append(grad_check(
        lambda a: sum_all(graph_refine(prompts, prompt_graph(a, 10.0), params)),
        profiles, "csp_graph/profiles"))
    for name in ("theta1", "theta2"):
        def f(x, name=name):
            trial = dataclasses.replace(params, **{name: x})
            return sum_all(graph_refine(prompts, prompt_graph(profiles, 10.0), trial))
        reports.append(grad_check(f, getattr(params, name), f"csp_graph/{name}"))
    reports.append(grad_check(
        lambda t: sum_all(reduce_visual(t, 4)), Tensor(_rand((5, 8), 23)),
        "csp_graph/reduce_visual"))
    return reports


def check_pipeline() -> list[GradReport]:
    encoder, image, base = _toy_setup()
    reports = []

    def ce_visual(x):
        out = forward(image, _with_visual_prompts(base, x), encoder,
                      range(TOY_CLASSES))
        return -log(take(out.p, 0))

    reports.append(grad_check(ce_visual, base.p_v0, "pipeline/visual_prompts"))

    def ce_text(x):
        trial = PromptSet(p_v0=base.p_v0, p_t0=x, isp_layers=base.isp_layers,
                          ssp_visual=base.ssp_visual, ssp_text=base.ssp_text,
                          csp_visual=base.csp_visual, csp_text=base.csp_text)
        out = forward(image, trial, encoder, range(TOY_CLASSES))
        return -log(take(out.p, 0))

    reports.append(grad_check(ce_text, base.p_t0, "pipeline/text_prompts"))
    return reports


def check_total_loss() -> list[GradReport]:
    encoder, image, base = _toy_setup()
    frozen = encoder.zero_shot_predict(image, range(TOY_CLASSES))
    baseline = forward(image, base, encoder, range(TOY_CLASSES))
    _, breakdown = total_loss(baseline, frozen, 0, gamma=0.3,
                              omega_v=1.0, omega_t=1.0)
    alpha0 = breakdown.alpha

    def f(x):
        out = forward(image, _with_visual_prompts(base, x), encoder,
                      range(TOY_CLASSES))
        loss, _ = total_loss(out, frozen, 0, gamma=0.3, omega_v=1.0,
                             omega_t=1.0, alpha_override=alpha0)
        return loss

    return [grad_check(f, base.p_v0, "total_loss/visual_prompts")]


CHECKS = {
    "matmul": check_matmul,
    "softmax_rows": check_softmax_rows,
    "layer_norm": check_layer_norm,
    "cosine_rows": check_cosine_rows,
    "dct": check_dct,
    "topk_rows": check_topk_rows,
    "rbf_rows": check_rbf_rows,
    "sym_normalize": check_sym_normalize,
    "ssp_block": check_ssp_block,
    "csp_graph": check_csp_graph,
    "pipeline": check_pipeline,
    "total_loss": check_total_loss,
}


def run_grad_checks(op: str | None = None) -> list[GradReport]:
    """Run one named check, or all of them."""
    if op is not None:
        if op not in CHECKS:
            raise KeyError(f"unknown grad-check op {op!r}; "
                           f"choose from {sorted(CHECKS)}")
        return CHECKS[op]()
    reports = []
    for check in CHECKS.values():
        reports.extend(check())
    return reports
