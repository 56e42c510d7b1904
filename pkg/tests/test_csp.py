import math

import numpy as np
import pytest

from isp.csp import (
    cross_affinities,
    csp_param_count,
    graph_refine,
    init_csp_params,
    prompt_graph,
    reduce_visual,
)
from isp.tensor import (
    InvalidTruncationError,
    Tensor,
    grad_check,
    sum_all,
    sym_normalize,
)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestReduceVisual:
    def test_same_width_is_identity(self):
        x = rand((4, 8), 1)
        out = reduce_visual(Tensor(x), 8)
        assert np.max(np.abs(out.data - x)) <= 1e-9

    def test_constant_token_scales_by_sqrt_ratio(self):
        x = np.full((1, 16), 3.0)
        out = reduce_visual(Tensor(x), 4).data
        # DC-only signal: reconstruction is constant, scaled by sqrt(16/4)
        assert np.allclose(out, 3.0 * 2.0, atol=1e-12)

    def test_dropped_energy_matches_parseval(self):
        from isp.tensor import dct_channels
        x = rand((5, 32), 2)
        out = reduce_visual(Tensor(x), 16).data
        coeffs = dct_channels(Tensor(x)).data
        dropped = (x ** 2).sum(axis=1) - (out ** 2).sum(axis=1)
        expected = (coeffs[:, 16:] ** 2).sum(axis=1)
        assert np.max(np.abs(dropped - expected)) <= 1e-9

    def test_wider_target_rejected(self):
        with pytest.raises(InvalidTruncationError):
            reduce_visual(Tensor(np.ones((2, 4))), 8)


class TestCrossAffinities:
    def make_pair(self, seed=0, beta=10.0, lv=4, lt=6, n=8, m=10, dv=16, dt=8):
        rng = np.random.default_rng(seed)
        pv = Tensor(rng.standard_normal((lv, dv)))
        pt = Tensor(rng.standard_normal((lt, dt)))
        text = Tensor(rng.standard_normal((n, dt)))
        reduced = Tensor(rng.standard_normal((m, dt)))
        return cross_affinities(pv, pt, text, reduced, beta)

    def test_shapes_and_cosine_bounds(self):
        pair = self.make_pair(1)
        assert pair.a_vt.shape == (4, 8)
        assert pair.a_tv.shape == (6, 10)
        for a in (pair.a_vt, pair.a_tv):
            assert np.all(a.data >= -1.0 - 1e-12) and np.all(a.data <= 1.0 + 1e-12)

    def test_graph_diagonal_exactly_one(self):
        pair = self.make_pair(2)
        assert np.array_equal(np.diag(pair.a_vv.data), np.ones(4))
        assert np.array_equal(np.diag(pair.a_tt.data), np.ones(6))

    def test_graphs_exactly_symmetric_in_unit_interval(self):
        pair = self.make_pair(3)
        for g in (pair.a_vv, pair.a_tt):
            assert np.array_equal(g.data, g.data.T)
            assert np.all(g.data > 0.0) and np.all(g.data <= 1.0)

    def test_identical_prompts_fully_connected(self):
        rng = np.random.default_rng(4)
        row = rng.standard_normal(16)
        pv = Tensor(np.stack([row, row]))
        pt = Tensor(rng.standard_normal((3, 8)))
        pair = cross_affinities(pv, pt, Tensor(rng.standard_normal((5, 8))),
                                Tensor(rng.standard_normal((7, 8))))
        assert pair.a_vv.data[0, 1] == 1.0

    def test_single_entry_gap_value(self):
        # two profiles differing by 0.1 in one entry: exp(-10 * 0.01)
        a = np.zeros((2, 5))
        a[1, 0] = 0.1
        g = prompt_graph(Tensor(a), 10.0).data
        assert abs(g[0, 1] - math.exp(-0.1)) <= 1e-12
        assert abs(g[0, 1] - 0.9048374180359595) <= 1e-12

    def test_larger_beta_weakly_decreases_offdiagonals(self):
        a = Tensor(rand((5, 7), 5))
        g1 = prompt_graph(a, 5.0).data
        g2 = prompt_graph(a, 20.0).data
        off = ~np.eye(5, dtype=bool)
        assert np.all(g2[off] <= g1[off])


class TestGraphRefine:
    def test_identity_graph_no_mixing(self):
        params = init_csp_params(6, np.random.default_rng(6))
        prompts = rand((4, 6), 7)
        base = graph_refine(Tensor(prompts), Tensor(np.eye(4)), params).data
        bumped = prompts.copy()
        bumped[2] += 1.0
        out = graph_refine(Tensor(bumped), Tensor(np.eye(4)), params).data
        changed = np.flatnonzero(np.any(out != base, axis=1))
        assert list(changed) == [2]

    def test_complete_graph_averages(self):
        params = init_csp_params(5, np.random.default_rng(8))
        out = graph_refine(Tensor(rand((2, 5), 9)), Tensor(np.ones((2, 2))),
                           params).data
        assert np.allclose(out[0], out[1], atol=1e-14)

    def test_gradients(self):
        rng = np.random.default_rng(10)
        params = init_csp_params(5, rng)
        prompts = Tensor(rng.standard_normal((4, 5)))
        adj = prompt_graph(Tensor(0.4 * rng.standard_normal((4, 6))), 10.0).detach()

        report = grad_check(lambda p: sum_all(graph_refine(p, adj, params)),
                            prompts, "csp_prompts")
        assert report.max_rel_err <= 1e-4
        import dataclasses
        for name in ("theta1", "theta2"):
            def f(x, name=name):
                trial = dataclasses.replace(params, **{name: x})
                return sum_all(graph_refine(prompts, adj, trial))
            report = grad_check(f, getattr(params, name), f"csp_{name}")
            assert report.max_rel_err <= 1e-4

    def test_gradient_through_graph_construction(self):
        rng = np.random.default_rng(11)
        params = init_csp_params(5, rng)
        prompts = Tensor(rng.standard_normal((4, 5)))

        def f(profiles):
            return sum_all(graph_refine(prompts, prompt_graph(profiles, 10.0), params))
        report = grad_check(f, Tensor(0.3 * rng.standard_normal((4, 6))),
                            "csp_profiles")
        assert report.max_rel_err <= 1e-4


def power_iteration_radius(m: np.ndarray, iters: int = 200) -> float:
    v = np.ones(m.shape[0]) / math.sqrt(m.shape[0])
    for _ in range(iters):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return float(abs(v @ (m @ v)))


def test_normalized_adjacency_spectral_radius():
    for seed in range(20):
        adj = prompt_graph(Tensor(rand((6, 9), seed)), 10.0)
        n = sym_normalize(adj).data
        assert power_iteration_radius(n) <= 1.0 + 1e-8


def test_param_count_formula():
    params = init_csp_params(7, np.random.default_rng(12))
    assert sum(t.data.size for t in params.named().values()) == csp_param_count(7)
