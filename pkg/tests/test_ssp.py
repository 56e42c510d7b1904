import numpy as np
import pytest

from isp.encoder import CLASS_TOKEN, CONTENT, PROMPT, TokenSequence
from isp.ssp import (
    SspParams,
    attention_weights,
    cross_attention,
    init_ssp_params,
    refine_prompts,
    select_tokens,
    ssp_param_count,
)
from isp.tensor import Tensor, grad_check, sum_all

DIM = 6


def make_params(seed=0, scale=1.0):
    params = init_ssp_params(DIM, np.random.default_rng(seed))
    if scale != 1.0:
        # well-conditioned magnitudes for finite-difference comparisons
        for name in ("wq", "wk", "wv", "wo", "mlp_w1", "mlp_w2"):
            getattr(params, name).data[:] *= scale
    return params


def visual_seq(content, prompts=None):
    content = np.asarray(content, dtype=float)
    rows = [np.zeros((1, content.shape[1])) + 0.001, content]
    roles = (CLASS_TOKEN,) + (CONTENT,) * content.shape[0]
    if prompts is not None:
        rows.append(prompts)
        roles += (PROMPT,) * len(prompts)
    return TokenSequence(Tensor(np.vstack(rows)), roles, "visual", 0)


class TestSelectTokens:
    def test_all_equal_rows_select_first_by_index(self):
        seq = visual_seq(np.ones((5, DIM)))
        out = select_tokens(seq, 3)
        assert np.array_equal(out.data, np.ones((3, DIM)))

    def test_scaled_row_ranks_first(self):
        content = np.ones((5, DIM))
        content[3] *= 10.0
        out = select_tokens(visual_seq(content), 1)
        assert np.array_equal(out.data, content[3:4])

    def test_matches_brute_force_sort(self):
        rng = np.random.default_rng(21)
        content = rng.standard_normal((16, 8))
        seq = TokenSequence(
            Tensor(np.vstack([np.ones((1, 8)), content])),
            (CLASS_TOKEN,) + (CONTENT,) * 16, "visual", 0)
        out = select_tokens(seq, 4)
        resp = (content ** 2).sum(axis=1)
        expected = content[sorted(range(16), key=lambda i: (-resp[i], i))[:4]]
        assert np.array_equal(out.data, expected)

    def test_pool_excludes_class_token_and_prompts(self):
        content = 0.01 * np.ones((4, DIM))
        prompts = 100.0 * np.ones((2, DIM))
        seq = visual_seq(content, prompts)
        out = select_tokens(seq, 4)
        assert np.array_equal(out.data, content)

    def test_k_exceeding_content_rows(self):
        with pytest.raises(ValueError):
            select_tokens(visual_seq(np.ones((3, DIM))), 4)


class TestRefinePrompts:
    def test_zeroed_projections_pass_tokens_through(self):
        params = make_params(1)
        params.wo.data[:] = 0.0
        params.mlp_w2.data[:] = 0.0
        rng = np.random.default_rng(2)
        prompts = Tensor(rng.standard_normal((4, DIM)))
        selected = Tensor(rng.standard_normal((4, DIM)))
        out = refine_prompts(prompts, selected, params)
        assert np.array_equal(out.data, selected.data)

    def test_prompt_residual_variant(self):
        params = make_params(1)
        params.wo.data[:] = 0.0
        params.mlp_w2.data[:] = 0.0
        rng = np.random.default_rng(3)
        prompts = Tensor(rng.standard_normal((4, DIM)))
        selected = Tensor(rng.standard_normal((4, DIM)))
        out = refine_prompts(prompts, selected, params, residual="prompts")
        assert np.array_equal(out.data, prompts.data)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        w = attention_weights(Tensor(rng.standard_normal((3, DIM))),
                              Tensor(rng.standard_normal((5, DIM))),
                              make_params(5))
        assert np.max(np.abs(w.data.sum(axis=1) - 1.0)) <= 1e-12

    def test_shape_contract_and_mismatch(self):
        rng = np.random.default_rng(6)
        prompts = Tensor(rng.standard_normal((4, DIM)))
        out = refine_prompts(prompts, Tensor(rng.standard_normal((4, DIM))),
                             make_params(7))
        assert out.shape == prompts.shape
        with pytest.raises(ValueError):
            refine_prompts(prompts, Tensor(rng.standard_normal((3, DIM))),
                           make_params(7))

    def test_attention_term_invariant_to_key_permutation(self):
        rng = np.random.default_rng(8)
        prompts = Tensor(rng.standard_normal((4, DIM)))
        selected = rng.standard_normal((4, DIM))
        params = make_params(9)
        base = cross_attention(prompts, Tensor(selected), params).data
        perm = cross_attention(prompts, Tensor(selected[[2, 0, 3, 1]]), params).data
        assert np.max(np.abs(base - perm)) <= 1e-12

    def test_gradients_of_all_parameters(self):
        import dataclasses
        rng = np.random.default_rng(10)
        prompts = Tensor(rng.standard_normal((4, DIM)))
        selected = Tensor(rng.standard_normal((4, DIM)))
        params = make_params(11, scale=20.0)
        worst = 0.0
        for name in SspParams.FIELD_ORDER:
            def f(x, name=name):
                trial = dataclasses.replace(params, **{name: x})
                return sum_all(refine_prompts(prompts, selected, trial))
            report = grad_check(f, getattr(params, name), f"ssp_{name}")
            worst = max(worst, report.max_rel_err)
        assert worst <= 1e-4

    def test_gradients_of_inputs(self):
        rng = np.random.default_rng(12)
        selected = Tensor(rng.standard_normal((4, DIM)))
        params = make_params(13, scale=20.0)
        report = grad_check(
            lambda p: sum_all(refine_prompts(p, selected, params)),
            Tensor(rng.standard_normal((4, DIM))), "ssp_prompts")
        assert report.max_rel_err <= 1e-4
        prompts = Tensor(rng.standard_normal((4, DIM)))
        report = grad_check(
            lambda s: sum_all(refine_prompts(prompts, s, params)),
            Tensor(rng.standard_normal((4, DIM))), "ssp_selected")
        assert report.max_rel_err <= 1e-4


def test_param_count_formula():
    params = make_params(14)
    total = sum(t.data.size for t in params.named().values())
    assert total == ssp_param_count(DIM)
