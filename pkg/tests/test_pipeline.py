import numpy as np
import pytest

from isp.encoder import EncoderConfig, FrozenEncoder
from isp.pipeline import (
    PromptSet,
    forward,
    init_prompts,
    isp_layer_param_count,
    parse_isp_layers,
)
from isp.tensor import Tensor, grad_check, log, take

TOY = EncoderConfig(num_layers=2, visual_dim=8, text_dim=4, embed_dim=4,
                    visual_tokens=5, text_tokens=7, num_heads=2, seed=5)
L_V, L_T = 4, 6


@pytest.fixture(scope="module")
def encoder():
    enc = FrozenEncoder(TOY)
    enc.bind_class_identities(
        np.random.default_rng(31).standard_normal((2, TOY.text_dim)))
    return enc


def toy_image(seed=0):
    return np.random.default_rng(seed).standard_normal(
        (TOY.visual_tokens, TOY.visual_dim))


def make_prompts(isp="1-2", seed=7):
    return init_prompts(TOY, L_V, L_T, parse_isp_layers(isp, TOY.num_layers), seed)


class TestParseIspLayers:
    def test_range(self):
        assert parse_isp_layers("1-12", 12) == tuple(range(1, 13))
        assert parse_isp_layers("10-12", 12) == (10, 11, 12)
        assert parse_isp_layers("7", 12) == (7,)
        assert parse_isp_layers("none", 12) == ()

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            parse_isp_layers("0-3", 12)
        with pytest.raises(ValueError):
            parse_isp_layers("10-13", 12)


class TestInitPrompts:
    def test_same_seed_identical_bytes(self):
        a, b = make_prompts(seed=9), make_prompts(seed=9)
        for name, t in a.parameters().items():
            assert np.array_equal(t.data, b.parameters()[name].data)

    def test_different_seeds_differ(self):
        a, b = make_prompts(seed=9), make_prompts(seed=10)
        assert not np.array_equal(a.p_v0.data, b.p_v0.data)

    def test_layer_range_parameter_accounting(self):
        full = make_prompts("1-2")
        last = make_prompts("2-2")
        count = lambda ps: sum(t.data.size for t in ps.parameters().values())
        per_layer = isp_layer_param_count(TOY.visual_dim, TOY.text_dim)
        assert count(full) - count(last) == per_layer

    def test_parameter_sets_differ_by_layer_blocks(self):
        full = set(make_prompts("1-2").parameters())
        last = set(make_prompts("2-2").parameters())
        extra = full - last
        assert extra == {n for n in full if "/l01/" in n}


class TestForward:
    def test_probabilities_sum_to_one(self, encoder):
        out = forward(toy_image(1), make_prompts(), encoder, [0, 1])
        assert abs(float(out.p.data.sum()) - 1.0) <= 1e-10
        assert out.w.shape == (2, TOY.embed_dim)
        assert out.x.shape == (TOY.embed_dim,)

    def test_ablation_identity_with_masked_inert_prompts(self, encoder):
        # no refinement layers, zeroed prompts, attention masked to ignore
        # them: probabilities match the fully frozen path
        prompts = make_prompts("none")
        prompts.p_v0.data[:] = 0.0
        prompts.p_t0.data[:] = 0.0
        img = toy_image(2)
        out = forward(img, prompts, encoder, [0, 1], mask_prompt_attention=True)
        frozen = encoder.zero_shot_predict(img, [0, 1])
        assert np.max(np.abs(out.p.data - frozen.p_zero_shot)) <= 1e-10

    def test_prompts_change_predictions_without_mask(self, encoder):
        prompts = make_prompts()
        img = toy_image(3)
        out = forward(img, prompts, encoder, [0, 1])
        frozen = encoder.zero_shot_predict(img, [0, 1])
        assert not np.allclose(out.p.data, frozen.p_zero_shot, atol=1e-12)

    def test_trace_records_active_layers(self, encoder):
        out = forward(toy_image(4), make_prompts("2-2"), encoder, [0, 1],
                      trace=True)
        assert len(out.trace) == 1
        entry = out.trace[0]
        assert entry["layer"] == 2
        assert entry["visual_prompts"].shape == (L_V, TOY.visual_dim)
        assert entry["affinities"].a_vv.shape == (L_V, L_V)

    def test_per_class_context_mode(self, encoder):
        out = forward(toy_image(5), make_prompts(), encoder, [0, 1],
                      csp_text_context="per_class", trace=True)
        assert abs(float(out.p.data.sum()) - 1.0) <= 1e-10
        # affinity profile spans both classes' tokens
        assert out.trace[0]["affinities"].a_vt.shape == (L_V, 2 * TOY.text_tokens)

    def test_deterministic(self, encoder):
        img = toy_image(6)
        a = forward(img, make_prompts(seed=8), encoder, [0, 1])
        b = forward(img, make_prompts(seed=8), encoder, [0, 1])
        assert np.array_equal(a.p.data, b.p.data)


class TestEndToEndGradients:
    def grad_of(self, encoder, which, seed=12):
        img = toy_image(seed)
        base = make_prompts(seed=seed)

        def f(x):
            trial = PromptSet(
                p_v0=x if which == "visual" else base.p_v0,
                p_t0=x if which == "text" else base.p_t0,
                isp_layers=base.isp_layers, ssp_visual=base.ssp_visual,
                ssp_text=base.ssp_text, csp_visual=base.csp_visual,
                csp_text=base.csp_text)
            out = forward(img, trial, encoder, [0, 1])
            return -log(take(out.p, 0))

        leaf = base.p_v0 if which == "visual" else base.p_t0
        return grad_check(f, leaf, f"pipeline_{which}")

    def test_cross_entropy_gradient_wrt_visual_prompts(self, encoder):
        assert self.grad_of(encoder, "visual").max_rel_err <= 1e-4

    def test_cross_entropy_gradient_wrt_text_prompts(self, encoder):
        assert self.grad_of(encoder, "text").max_rel_err <= 1e-4
