import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isp.encoder import EncoderConfig, FrozenEncoder, FrozenFeatures
from isp.objective import (
    LossBreakdown,
    cross_entropy,
    regularization,
    sample_weight,
    total_loss,
)
from isp.pipeline import PromptedOutput, forward, init_prompts, parse_isp_layers
from isp.tensor import Tensor, grad_check


class TestSampleWeight:
    def test_zero_gap(self):
        assert sample_weight(0.8, 0.8, gamma=0.3) == 0.0

    def test_unit_gamma_arithmetic(self):
        # 2 * |0.3 - 0.1| / (0.3 + 0.1) = 1.0
        assert sample_weight(0.3, 0.1, gamma=1.0) == pytest.approx(1.0, abs=1e-12)

    def test_cap_applies(self):
        # raw = 1.6 ** 0.3 > 1, clipped to the default cap
        assert sample_weight(0.9, 0.1, gamma=0.3) == 1.0
        raw = (2 * 0.8 / 1.0) ** 0.3
        assert sample_weight(0.9, 0.1, gamma=0.3, clip="none") == pytest.approx(raw)

    def test_max1_literal_variant(self):
        assert sample_weight(0.5, 0.45, gamma=0.3, clip="max1") == 1.0
        assert sample_weight(0.9, 0.1, gamma=0.3, clip="max1") == pytest.approx(
            (1.6) ** 0.3)

    def test_degenerate_denominator(self):
        assert sample_weight(0.0, 0.0, gamma=0.3) == 0.0

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            sample_weight(1.2, 0.5, gamma=0.3)
        with pytest.raises(ValueError):
            sample_weight(0.5, -0.1, gamma=0.3)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.05, 3.0))
    @settings(max_examples=200, deadline=None)
    def test_symmetry_and_bounds(self, p, q, gamma):
        a = sample_weight(q, p, gamma)
        assert a == sample_weight(p, q, gamma)
        assert 0.0 <= a <= 1.0

    def test_monotone_in_gap_at_fixed_sum(self):
        total = 0.9
        gaps = np.linspace(0.0, total, 30)
        raws = [sample_weight((total + g) / 2, (total - g) / 2, 0.3, clip="none")
                for g in gaps]
        assert all(b >= a - 1e-15 for a, b in zip(raws, raws[1:]))


class TestRegularization:
    def rand(self, shape, seed):
        return np.random.default_rng(seed).standard_normal(shape)

    def test_identical_features_zero(self):
        x = self.rand(6, 1)
        w = self.rand((3, 6), 2)
        reg_v, reg_t = regularization(Tensor(x), x, Tensor(w), w)
        assert abs(reg_v.item()) <= 1e-12
        assert abs(reg_t.item()) <= 1e-12

    def test_antipodal_gives_two(self):
        x = self.rand(6, 3)
        w = self.rand((2, 6), 4)
        reg_v, _ = regularization(Tensor(-x), x, Tensor(w), w)
        assert abs(reg_v.item() - 2.0) <= 1e-12

    def test_orthogonal_gives_one(self):
        x = np.array([1.0, 0.0])
        xp = np.array([0.0, 1.0])
        w = self.rand((2, 2), 5)
        reg_v, _ = regularization(Tensor(x), xp, Tensor(w), w)
        assert abs(reg_v.item() - 1.0) <= 1e-12

    def test_text_term_averages_classes(self):
        w_prime = np.array([[1.0, 0.0], [0.0, 1.0]])
        w = np.array([[1.0, 0.0], [1.0, 0.0]])  # cos 1 and cos 0
        _, reg_t = regularization(Tensor([1.0, 0.0]), np.array([1.0, 0.0]),
                                  Tensor(w), w_prime)
        assert abs(reg_t.item() - 0.5) <= 1e-12


def fake_prompted(p, x, w):
    return PromptedOutput(x=Tensor(x), w=Tensor(w), p=Tensor(p))


def fake_frozen(q, x, w):
    return FrozenFeatures(x_prime=x, w_prime=w, p_zero_shot=q)


class TestTotalLoss:
    def setup_method(self):
        rng = np.random.default_rng(6)
        self.x = rng.standard_normal(5)
        self.w = rng.standard_normal((3, 5))

    def test_degenerate_hypers_reduce_to_cross_entropy(self):
        p = np.array([0.2, 0.5, 0.3])
        prompted = fake_prompted(p, self.x, self.w)
        frozen = fake_frozen(p.copy(), self.x * 2, self.w * 3)
        loss, br = total_loss(prompted, frozen, 1, gamma=0.3,
                              omega_v=0.0, omega_t=0.0)
        assert br.alpha == 0.0
        assert abs(loss.item() - (-math.log(0.5))) <= 1e-12

    def test_perfect_prediction_leaves_regularization(self):
        p = np.array([1.0, 0.0])
        q = np.array([0.6, 0.4])
        prompted = fake_prompted(p, self.x, self.w[:2])
        frozen = fake_frozen(q, self.x.copy(), self.w[:2].copy())
        loss, br = total_loss(prompted, frozen, 0, gamma=0.3,
                              omega_v=1.0, omega_t=1.0)
        assert br.ce == 0.0
        assert abs(loss.item() - (br.reg_v + br.reg_t)) <= 1e-12

    def test_breakdown_recomposes(self):
        rng = np.random.default_rng(7)
        p = rng.dirichlet(np.ones(3))
        q = rng.dirichlet(np.ones(3))
        prompted = fake_prompted(p, self.x, self.w)
        frozen = fake_frozen(q, rng.standard_normal(5), rng.standard_normal((3, 5)))
        omega_v, omega_t = 0.7, 1.3
        loss, br = total_loss(prompted, frozen, 2, gamma=0.3,
                              omega_v=omega_v, omega_t=omega_t)
        recomposed = (1 + br.alpha) * br.ce + omega_v * br.reg_v + omega_t * br.reg_t
        assert abs(br.total - recomposed) <= 1e-12
        assert abs(loss.item() - br.total) <= 1e-12

    def test_cross_entropy_label_bounds(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor([0.5, 0.5]), 2)


class TestEndToEndGradient:
    def test_total_loss_gradient_with_alpha_frozen(self):
        cfg = EncoderConfig(num_layers=2, visual_dim=8, text_dim=4, embed_dim=4,
                            visual_tokens=5, text_tokens=7, num_heads=2, seed=5)
        encoder = FrozenEncoder(cfg)
        encoder.bind_class_identities(
            np.random.default_rng(8).standard_normal((2, cfg.text_dim)))
        img = np.random.default_rng(9).standard_normal(
            (cfg.visual_tokens, cfg.visual_dim))
        frozen = encoder.zero_shot_predict(img, [0, 1])
        base = init_prompts(cfg, 4, 6, parse_isp_layers("1-2", 2), seed=10)
        baseline = forward(img, base, encoder, [0, 1])
        _, base_breakdown = total_loss(baseline, frozen, 0, gamma=0.3,
                                       omega_v=1.0, omega_t=1.0)
        alpha0 = base_breakdown.alpha

        def f(x):
            from isp.pipeline import PromptSet
            trial = PromptSet(p_v0=x, p_t0=base.p_t0, isp_layers=base.isp_layers,
                              ssp_visual=base.ssp_visual, ssp_text=base.ssp_text,
                              csp_visual=base.csp_visual, csp_text=base.csp_text)
            out = forward(img, trial, encoder, [0, 1])
            loss, _ = total_loss(out, frozen, 0, gamma=0.3,
                                 omega_v=1.0, omega_t=1.0, alpha_override=alpha0)
            return loss

        report = grad_check(f, base.p_v0, "total_loss_visual_prompts")
        assert report.max_rel_err <= 1e-4
