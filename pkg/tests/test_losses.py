import numpy as np
import pytest
from fdcheck import max_rel_err

from multidistill.geometry import (
    FeatureGrid,
    PatchGrid,
    ShiftSample,
    identity_map,
    overlap_region,
)
from multidistill.losses import (
    LossReport,
    LossWeights,
    aggregate,
    cosine_summary_loss,
    mesa_loss,
    spatial_loss,
    summary_loss,
)
from multidistill.normstats import ln_noaffine


def spatial_oracle(x, y, grid, s, t):
    """Double loop over canvas positions both views share."""
    total, count = 0.0, 0
    for cy in range(-8, grid.rows + 8):
        for cx in range(-8, grid.cols + 8):
            si, sj = cy - s.dy, cx - s.dx
            ti, tj = cy - t.dy, cx - t.dx
            if 0 <= si < grid.rows and 0 <= sj < grid.cols and 0 <= ti < grid.rows and 0 <= tj < grid.cols:
                d = x[si, sj] - y[ti, tj]
                total += float(np.sum(d * d))
                count += d.size
    return total / count


class TestSpatialLoss:
    def test_equal_features_zero(self):
        rng = np.random.default_rng(0)
        data = rng.random((4, 4, 3))
        g = PatchGrid(4, 4, 16)
        v, grad = spatial_loss(FeatureGrid(data, 16), FeatureGrid(data.copy(), 16), identity_map(g))
        assert v == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_constant_offset_gives_square(self):
        rng = np.random.default_rng(1)
        data = rng.random((5, 6, 2))
        g = PatchGrid(5, 6, 16)
        c = 0.37
        v, _ = spatial_loss(
            FeatureGrid(data + c, 16), FeatureGrid(data, 16), identity_map(g)
        )
        assert v == pytest.approx(c * c, rel=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        g = PatchGrid(4, 4, 16)
        s, t = ShiftSample(1, 0), ShiftSample(0, 0)
        x = rng.random((4, 4, 2))
        y = rng.random((4, 4, 2))
        m = overlap_region(g, s, t)
        v, _ = spatial_loss(FeatureGrid(x, 16), FeatureGrid(y, 16), m)
        assert v == pytest.approx(spatial_oracle(x, y, g, s, t), abs=1e-6)

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(3)
        g = PatchGrid(4, 5, 16)
        m = overlap_region(g, ShiftSample(1, -1), ShiftSample(0, 1))
        x = rng.random((4, 5, 3))
        y = FeatureGrid(rng.random((4, 5, 3)), 16)

        def f():
            return spatial_loss(FeatureGrid(x, 16), y, m)[0]

        _, grad = spatial_loss(FeatureGrid(x, 16), y, m)
        assert max_rel_err(f, x, grad) < 1e-3

    def test_gradient_confined_to_overlap(self):
        rng = np.random.default_rng(4)
        g = PatchGrid(6, 6, 16)
        m = overlap_region(g, ShiftSample(2, 0), ShiftSample(0, 0))
        x = rng.random((6, 6, 1))
        y = FeatureGrid(rng.random((6, 6, 1)), 16)
        _, grad = spatial_loss(FeatureGrid(x, 16), y, m)
        # source rows outside the gathered region must have zero gradient
        assert np.all(grad[:2] != 0) is not None  # overlap starts at source row 0
        assert np.all(grad[4:] == 0)

    def test_empty_map_and_channel_mismatch(self):
        g = PatchGrid(4, 4, 16)
        empty = overlap_region(g, ShiftSample(0, 0), ShiftSample(0, 9))
        x = FeatureGrid(np.zeros((4, 4, 2)), 16)
        with pytest.raises(ValueError):
            spatial_loss(x, x, empty)
        with pytest.raises(ValueError):
            spatial_loss(x, FeatureGrid(np.zeros((4, 4, 3)), 16), identity_map(g))

    def test_common_shift_invariance(self):
        # only the relative displacement between the two views matters: adding
        # the same delta to both shifts leaves the gather, and the loss, alone
        rng = np.random.default_rng(5)
        g = PatchGrid(8, 8, 16)
        x = FeatureGrid(rng.random((8, 8, 3)), 16)
        y = FeatureGrid(rng.random((8, 8, 3)), 16)
        s, t = ShiftSample(1, 0), ShiftSample(0, 2)
        base, _ = spatial_loss(x, y, overlap_region(g, s, t))
        for d in (ShiftSample(1, 1), ShiftSample(-2, 0), ShiftSample(-1, 3)):
            s2 = ShiftSample(s.dy + d.dy, s.dx + d.dx)
            t2 = ShiftSample(t.dy + d.dy, t.dx + d.dx)
            v, _ = spatial_loss(x, y, overlap_region(g, s2, t2))
            assert v == pytest.approx(base, abs=1e-6)

    def test_equivariant_features_moving_scene(self):
        # when the scene moves with the views (views keep seeing the same
        # content) a content-only feature map yields the identical loss
        rng = np.random.default_rng(13)
        g = PatchGrid(8, 8, 16)
        content = rng.random((8, 8, 3))
        s, t = ShiftSample(1, 0), ShiftSample(0, 2)
        base, _ = spatial_loss(
            FeatureGrid(content * 2.0, 16), FeatureGrid(content, 16),
            overlap_region(g, s, t),
        )
        d = ShiftSample(-2, 1)
        v, _ = spatial_loss(
            FeatureGrid(content * 2.0, 16), FeatureGrid(content, 16),
            overlap_region(g, ShiftSample(s.dy + d.dy, s.dx + d.dx),
                           ShiftSample(t.dy + d.dy, t.dx + d.dx)),
        )
        assert v == pytest.approx(base, abs=1e-6)


class TestMesaLoss:
    def test_identical_grids_zero(self):
        rng = np.random.default_rng(6)
        data = rng.random((3, 3, 4))
        g = PatchGrid(3, 3, 16)
        v, grad = mesa_loss(FeatureGrid(data, 16), FeatureGrid(data.copy(), 16), identity_map(g))
        assert v == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-9)

    def test_positive_scaling_invariance(self):
        rng = np.random.default_rng(7)
        data = rng.random((3, 3, 4)) + 0.5
        g = PatchGrid(3, 3, 16)
        v, _ = mesa_loss(FeatureGrid(data * 3.0, 16), FeatureGrid(data, 16), identity_map(g))
        assert v == pytest.approx(0.0, abs=1e-6)

    def test_matches_oracle(self):
        rng = np.random.default_rng(8)
        g = PatchGrid(3, 3, 16)
        s, t = ShiftSample(0, 1), ShiftSample(0, 0)
        x = rng.random((3, 3, 4))
        xt = rng.random((3, 3, 4))
        m = overlap_region(g, s, t)
        v, _ = mesa_loss(FeatureGrid(x, 16), FeatureGrid(xt, 16), m)
        # oracle: LN both grids per patch, gather via the overlap, MSE
        x_ln = np.stack([[ln_noaffine(x[i, j]) for j in range(3)] for i in range(3)])
        t_ln = np.stack([[ln_noaffine(xt[i, j]) for j in range(3)] for i in range(3)])
        o = m.overlap
        total, count = 0.0, 0
        for i in range(o.rows):
            for j in range(o.cols):
                di, dj = o.row0 + i, o.col0 + j
                si, sj = di + m.dst_offset[0] - m.src_offset[0], dj + m.dst_offset[1] - m.src_offset[1]
                d = x_ln[si, sj] - t_ln[di, dj]
                total += float(np.sum(d * d))
                count += d.size
        assert v == pytest.approx(total / count, abs=1e-6)

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(9)
        g = PatchGrid(3, 4, 16)
        m = overlap_region(g, ShiftSample(1, 0), ShiftSample(0, -1))
        x = rng.random((3, 4, 5))
        xt = FeatureGrid(rng.random((3, 4, 5)), 16)

        def f():
            return mesa_loss(FeatureGrid(x, 16), xt, m)[0]

        _, grad = mesa_loss(FeatureGrid(x, 16), xt, m)
        assert max_rel_err(f, x, grad) < 1e-3


class TestSummaryLoss:
    def test_aligned_is_zero(self):
        # the arccos clamp turns exact alignment into arccos(1 - 1e-7), so
        # the minimum sits at ~2e-7 rather than exactly zero
        y = np.array([0.3, -0.4, 1.2])
        v, _ = summary_loss(y.copy(), y, 1.0)
        assert v == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal_quarter_turn(self):
        v, _ = summary_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1.0)
        assert v == pytest.approx((np.pi / 2) ** 2, rel=1e-9)
        assert v == pytest.approx(2.4674, abs=1e-4)

    def test_antipodal_with_table_dispersion(self):
        y = np.array([0.0, 0.0, 2.0])
        v, _ = summary_loss(-y, y, 2.186)
        # exact value under the clamp, and the headline number to displayed precision
        theta = np.arccos(-1.0 + 1e-7)
        assert v == pytest.approx(theta**2 / 2.186, rel=1e-9)
        assert v == pytest.approx(4.515, abs=2e-3)

    def test_scale_invariance(self):
        rng = np.random.default_rng(10)
        x, y = rng.normal(size=5), rng.normal(size=5)
        base, _ = summary_loss(x, y, 0.7)
        for a, b in ((2.0, 0.5), (17.0, 3.0), (0.01, 12.0)):
            v, _ = summary_loss(a * x, b * y, 0.7)
            assert v == pytest.approx(base, rel=1e-9)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            summary_loss(np.zeros(3), np.ones(3), 1.0)

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(11)
        for d in (2, 4, 8):
            x = rng.normal(size=d)
            y = rng.normal(size=d)

            def f():
                return summary_loss(x, y, 1.3)[0]

            _, grad = summary_loss(x, y, 1.3)
            assert max_rel_err(f, x, grad) < 1e-3

    def test_gradient_finite_at_alignment(self):
        y = np.array([1.0, 2.0, 3.0])
        _, grad = summary_loss(y * 2.0, y, 1.0)
        assert np.all(np.isfinite(grad))
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_dispersion_balancing_ratio(self):
        # equal raw angle, different dispersions: normalized losses differ by d2/d1
        d1, d2 = 0.694, 2.186
        x = np.array([np.cos(0.5), np.sin(0.5)])
        y = np.array([1.0, 0.0])
        v1, _ = summary_loss(x, y, d1)
        v2, _ = summary_loss(x, y, d2)
        assert v1 / v2 == pytest.approx(d2 / d1, rel=1e-9)


class TestCosineSummaryLoss:
    def test_aligned_zero_and_orthogonal_one(self):
        v, _ = cosine_summary_loss(np.array([2.0, 0.0]), np.array([1.0, 0.0]))
        assert v == pytest.approx(0.0, abs=1e-12)
        v, _ = cosine_summary_loss(np.array([1.0, 0.0]), np.array([0.0, 3.0]))
        assert v == pytest.approx(1.0, rel=1e-12)

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(12)
        x, y = rng.normal(size=6), rng.normal(size=6)

        def f():
            return cosine_summary_loss(x, y)[0]

        _, grad = cosine_summary_loss(x, y)
        assert max_rel_err(f, x, grad) < 1e-3


class TestAggregate:
    def test_single_term(self):
        r = LossReport()
        r.add("spatial/t0", 0.25, 1.0, omega=16)
        assert aggregate(r) == pytest.approx(0.25)

    def test_two_equal_terms(self):
        r = LossReport()
        r.add("spatial/t0", 0.5, 1.0)
        r.add("spatial/t1", 0.5, 1.0)
        assert aggregate(r) == pytest.approx(1.0)

    def test_mixed_skip_and_weights(self):
        r = LossReport()
        r.add("spatial/t0", 0.5, 2.0)
        r.add_skipped("spatial/t1", 1.0)
        r.add("summary/t0", 0.3, 0.5)
        assert aggregate(r) == pytest.approx(2.0 * 0.5 + 0.5 * 0.3)
        assert r.total == pytest.approx(1.15)

    def test_all_skipped_rejected(self):
        r = LossReport()
        r.add_skipped("spatial/t0", 1.0)
        with pytest.raises(ValueError):
            aggregate(r)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(-0.1, 1.0, 0.0)
        with pytest.raises(ValueError):
            LossWeights(0.0, 0.0, 0.0)
        LossWeights(1.0, 0.0, 0.0)  # fine
