"""Tests for relevance propagation, attribution maps and the faithfulness score."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import dense_relevance, perturbed_params, random_trace
from actress import attribution as A
from actress import model as M
from actress.synthdata import GenSpec, encode_batch, generate_dataset


class TestLayerAbar:
    def test_zero_gradient(self):
        rng = np.random.default_rng(0)
        a = M.softmax(rng.normal(size=(2, 5, 5)))
        assert not np.any(A.layer_abar(a, np.zeros_like(a)))

    def test_unit_gradient_gives_head_mean(self):
        rng = np.random.default_rng(0)
        a = M.softmax(rng.normal(size=(3, 5, 5)))
        abar = A.layer_abar(a, np.ones_like(a))
        np.testing.assert_allclose(abar, a.mean(axis=0))
        np.testing.assert_allclose(abar.sum(axis=-1), 1.0)

    def test_negative_entries_clamped(self):
        a = np.full((1, 2, 2), 0.5)
        g = np.array([[[-1.0, 2.0], [3.0, -4.0]]])
        np.testing.assert_allclose(A.layer_abar(a, g), [[0.0, 1.0], [1.5, 0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            A.layer_abar(np.ones((2, 3, 3)), np.ones((2, 3, 4)))


class TestPropagate:
    def test_zero_abar_is_identity_map(self):
        s0 = A.RelevanceState.initial(4)
        s1 = A.propagate(s0, np.zeros((4, 4)), np.zeros(4))
        np.testing.assert_array_equal(s1.r_vv, np.eye(4))
        np.testing.assert_array_equal(s1.r_rv, np.zeros(4))

    def test_one_hot_query_row(self):
        e = np.zeros(5)
        e[2] = 1.0
        s1 = A.propagate(A.RelevanceState.initial(5), np.zeros((5, 5)), e)
        np.testing.assert_array_equal(s1.r_rv, e)

    def test_query_row_reads_pre_update_r_vv(self):
        # second layer: R_rv gains row @ R_vv(after layer 1), not after layer 2
        rng = np.random.default_rng(3)
        vv1, vv2 = rng.random((4, 4)), rng.random((4, 4))
        q1, q2 = rng.random(4), rng.random(4)
        s = A.propagate(A.RelevanceState.initial(4), vv1, q1)
        s = A.propagate(s, vv2, q2)
        r1 = np.eye(4) + vv1 @ np.eye(4)
        expected = q1 + q2 @ r1
        np.testing.assert_allclose(s.r_rv, expected, atol=1e-14)
        np.testing.assert_allclose(s.r_vv, r1 + vv2 @ r1, atol=1e-14)

    def test_two_layer_dense_oracle(self):
        rng = np.random.default_rng(0)
        attn, grads = random_trace(rng, n_layers=2, n_visual=4, n_text=2)
        state = A.relevance_from_trace(attn, grads, 4)
        r_vv, r_rv = dense_relevance([a[0] for a in attn], [g[0] for g in grads], 4)
        np.testing.assert_allclose(state.r_vv[0], r_vv, atol=1e-12)
        np.testing.assert_allclose(state.r_rv[0], r_rv, atol=1e-12)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(1)
        attn, grads = random_trace(rng, batch=5)
        batched = A.relevance_from_trace(attn, grads, 6)
        for b in range(5):
            single = A.relevance_from_trace([a[b : b + 1] for a in attn], [g[b : b + 1] for g in grads], 6)
            np.testing.assert_allclose(batched.r_rv[b], single.r_rv[0], atol=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 5.0))
    def test_scaling_matches_oracle(self, seed, c):
        rng = np.random.default_rng(seed)
        attn, grads = random_trace(rng, n_layers=3, n_visual=4, n_text=1)
        scaled = [c * g for g in grads]
        state = A.relevance_from_trace(attn, scaled, 4)
        _, r_rv = dense_relevance([a[0] for a in attn], [g[0] for g in scaled], 4)
        np.testing.assert_allclose(state.r_rv[0], r_rv, atol=1e-10 * max(1.0, c**3))
        # one layer is exactly linear in the scale
        one = A.relevance_from_trace(attn[:1], scaled[:1], 4).r_rv
        base = A.relevance_from_trace(attn[:1], grads[:1], 4).r_rv
        np.testing.assert_allclose(one, c * base, atol=1e-12 * max(1.0, c))

    def test_row_normalize_variant(self):
        rng = np.random.default_rng(2)
        s = A.propagate(A.RelevanceState.initial(4), rng.random((4, 4)), rng.random(4), normalize=True)
        np.testing.assert_allclose((s.r_vv - np.eye(4)).sum(axis=-1), 1.0)

    def test_missing_gradients(self):
        rng = np.random.default_rng(0)
        attn, _ = random_trace(rng)
        with pytest.raises(ValueError):
            A.relevance_from_trace(attn, [None] * 3, 6)


@pytest.fixture(scope="module")
def setup():
    return generate_dataset(GenSpec(n=10, seed=4))[:8], M.ModelConfig()


class TestAttributionMaps:
    def maps_for(self, params, cfg, samples):
        vis, tokens = encode_batch(samples)
        out = M.forward(params, cfg, vis, tokens)
        M.grad_of_argmax_sum(params, out)
        return A.attribution_maps(out.attention, out.attention_grad, cfg.grid_size, False, out.visual_cells)

    def test_nonnegative_deterministic_and_zero_off_objects(self, setup):
        data, cfg = setup
        p = perturbed_params(cfg, 0)
        maps, degenerate = self.maps_for(p, cfg, data)
        again, _ = self.maps_for(p, cfg, data)
        assert maps.shape == (8, 8, 8)
        assert np.all(maps >= 0) and np.array_equal(maps, again)
        assert not degenerate.any()
        for s, m in zip(data, maps):
            empty = ~s.scene.feature_grid[..., :-2].any(axis=-1)
            assert not np.any(m[empty])

    def test_zeroed_quant_head_is_flagged(self, setup):
        data, cfg = setup
        p = perturbed_params(cfg, 0)
        p["quant_head.w2"][:] = 0.0
        maps, degenerate = self.maps_for(p, cfg, data[:3])
        assert degenerate.all() and not np.any(maps)

    def test_scatter_to_cells(self):
        # two slots holding cells 5 and 9 of a 4x4 grid, one padding slot
        rng = np.random.default_rng(0)
        attn, grads = random_trace(rng, n_layers=1, n_visual=3, n_text=1)
        cells = np.array([[5, 9, -1]])
        maps, _ = A.attribution_maps(attn, grads, 4, visual_cells=cells)
        rel = np.maximum(A.relevance_from_trace(attn, grads, 3).r_rv[0], 0)
        flat = maps[0].reshape(-1)
        assert flat[5] == rel[0] and flat[9] == rel[1]
        assert flat.sum() == pytest.approx(rel[0] + rel[1])


class TestFaithfulness:
    def test_uniform_quarter(self):
        score, deg = A.faithfulness(np.ones((8, 8)), np.array([0.25, 0.25, 0.5, 0.5]))
        assert score == pytest.approx(0.25) and not deg

    def test_all_mass_inside(self):
        m = np.zeros((8, 8))
        m[2:4, 2:4] = 1.0
        assert A.faithfulness(m, np.array([0.375, 0.375, 0.5, 0.5]))[0] == pytest.approx(1.0)

    def test_three_to_one(self):
        m = np.zeros((4, 4))
        m[0, 0] = 1.0
        m[3, 3] = 3.0
        assert A.faithfulness(m, np.array([0.125, 0.125, 0.25, 0.25]))[0] == pytest.approx(0.25)

    def test_partial_cells(self):
        # a box covering half of one cell picks up half of its mass
        m = np.zeros((4, 4))
        m[1, 1] = 1.0
        m[3, 3] = 1.0
        box = np.array([0.3125, 0.375, 0.125, 0.25])
        assert A.faithfulness(m, box)[0] == pytest.approx(0.25)

    def test_degenerate(self):
        score, deg = A.faithfulness(np.zeros((8, 8)), np.array([0.5, 0.5, 0.5, 0.5]))
        assert score == 0.0 and deg

    def test_coverage_sums_to_area(self):
        rng = np.random.default_rng(0)
        boxes = np.concatenate([rng.uniform(0.3, 0.7, (50, 2)), rng.uniform(0.05, 0.5, (50, 2))], axis=1)
        cov = A.cell_coverage(boxes, 8)
        np.testing.assert_allclose(cov.sum(axis=(1, 2)) / 64, boxes[:, 2] * boxes[:, 3])

    @settings(max_examples=100, deadline=None)
    @given(
        st.integers(0, 2**31 - 1),
        st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.01, 0.5), st.floats(0.01, 0.5), st.floats(0.0, 0.3),
    )
    def test_bounded_and_monotone_in_box_growth(self, seed, cx, cy, w, h, grow):
        m = np.random.default_rng(seed).random((8, 8))
        small = np.array([cx, cy, w, h])
        big = np.array([cx, cy, w + grow, h + grow])
        s_small, s_big = A.faithfulness(m, small)[0], A.faithfulness(m, big)[0]
        assert 0.0 <= s_small <= 1.0 and 0.0 <= s_big <= 1.0
        assert s_big >= s_small - 1e-12
