import io
import math

import numpy as np
import pytest

from ldplab.paths import (ControlPath, DiscretePath, PathPoint, TimeGrid,
                          concat, freeze_after, lipschitz_constant,
                          path_from_csv, path_to_csv, pseudo_distance,
                          sup_norm_to)


def make_path(values, horizon=None, **kw):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    grid = TimeGrid(horizon if horizon is not None else 1.0, values.shape[0] - 1)
    return DiscretePath(grid, values, **kw)


class TestTimeGrid:
    def test_basic(self):
        g = TimeGrid(2.0, 8)
        assert g.dt == 0.25
        assert abs(g.dt * g.steps - g.horizon) <= 1e-15
        t = g.times()
        assert t[0] == 0.0 and t[-1] == 2.0
        assert np.all(np.diff(t) > 0)

    def test_index_of(self):
        g = TimeGrid(1.0, 4)
        assert g.index_of(0.5) == 2
        assert g.index_of(1.0) == 4
        with pytest.raises(ValueError):
            g.index_of(0.3)
        with pytest.raises(ValueError):
            g.index_of(-0.25)

    def test_validation(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 0)
        with pytest.raises(ValueError):
            TimeGrid(0.0, 4)

    def test_prefix(self):
        g = TimeGrid(1.0, 8)
        p = g.prefix(3)
        assert p.steps == 3 and abs(p.horizon - 0.375) < 1e-15
        assert p.compatible(g)


class TestSupNorm:
    def test_zero_path(self):
        p = make_path(np.zeros(5))
        for i in range(5):
            assert sup_norm_to(p, i * 0.25) == 0.0

    def test_hand_case(self):
        p = make_path([0.0, 1.0, -3.0])
        assert sup_norm_to(p, 1.0) == 3.0

    def test_matches_exhaustive_scan(self):
        rn = np.random.default_rng(5)
        for _ in range(30):
            vals = rn.standard_normal((9, 2))
            p = make_path(vals)
            expected = max(math.sqrt(float(np.sum(v * v))) for v in vals)
            assert sup_norm_to(p, 1.0) == pytest.approx(expected, rel=1e-15)

    def test_monotone_in_t(self):
        rn = np.random.default_rng(1)
        for _ in range(20):
            p = make_path(rn.standard_normal((17, 3)))
            t = p.grid.times()
            norms = [sup_norm_to(p, ti) for ti in t]
            assert all(b >= a for a, b in zip(norms, norms[1:]))


class TestConcat:
    def test_at_horizon_is_identity(self):
        rn = np.random.default_rng(2)
        p = make_path(rn.standard_normal(9))
        tail = make_path(rn.standard_normal(5) * 0.0)
        assert np.array_equal(concat(p, 1.0, tail).values, p.values)

    def test_at_zero_is_tail(self):
        tail_vals = np.array([0.0, 1.0, 2.0, -1.0, 0.5])
        zero = make_path(np.zeros(5), origin_anchored=True)
        tail = make_path(tail_vals)
        out = concat(zero, 0.0, tail)
        assert np.array_equal(out.values[:, 0], tail_vals)

    def test_hand_case(self):
        # base known up to the midpoint (later content irrelevant), tail on the half grid
        base = make_path([0.0, 1.0, 999.0])
        tail = make_path([0.0, 2.0], horizon=0.5)
        out = concat(base, 0.5, tail)
        assert np.array_equal(out.values[:, 0], [0.0, 1.0, 3.0])

    def test_prefix_bit_identical(self):
        rn = np.random.default_rng(3)
        base = make_path(rn.standard_normal(9))
        tail_vals = rn.standard_normal(5)
        tail_vals[0] = 0.0
        tail = make_path(tail_vals, horizon=0.5)
        out = concat(base, 0.5, tail)
        assert np.array_equal(out.values[:5], base.values[:5])
        # continuation shifts by the base value at t
        assert np.allclose(out.values[5:, 0], base.values[4, 0] + tail_vals[1:])

    def test_grid_mismatch_rejected(self):
        base = make_path(np.zeros(9))
        tail = make_path(np.zeros(4), horizon=0.5)  # dt differs
        with pytest.raises(ValueError):
            concat(base, 0.5, tail)

    def test_unanchored_tail_rejected(self):
        base = make_path(np.zeros(9))
        tail = make_path(np.ones(5), horizon=0.5)
        with pytest.raises(ValueError):
            concat(base, 0.5, tail)


class TestPseudoDistance:
    def test_identical_points(self):
        p = make_path(np.arange(5.0))
        a = PathPoint(0.5, p)
        assert pseudo_distance(a, a) == 0.0

    def test_flat_extension_time_gap(self):
        vals = np.array([0.0, 0.3, 0.3, 0.3, 0.3])
        p = make_path(vals)
        a = PathPoint(0.25, p)
        b = PathPoint(0.5, p)
        assert pseudo_distance(a, b) == pytest.approx(0.25, abs=1e-15)

    def test_matches_direct_formula(self):
        rn = np.random.default_rng(7)
        for _ in range(20):
            va, vb = rn.standard_normal((2, 9, 2))
            ta, tb = rn.integers(0, 10, size=2) * 0.125
            ta, tb = min(ta, 1.0), min(tb, 1.0)
            a = PathPoint(ta, make_path(va))
            b = PathPoint(tb, make_path(vb))
            fa = freeze_after(a.omega_hat, ta).values
            fb = freeze_after(b.omega_hat, tb).values
            direct = abs(ta - tb) + np.max(np.linalg.norm(fa - fb, axis=1))
            assert pseudo_distance(a, b) == pytest.approx(direct, abs=0.0)
            assert pseudo_distance(a, b) == pseudo_distance(b, a)

    def test_zero_iff_same_time_and_frozen_path(self):
        vals = np.array([0.0, 0.3, 0.7, 0.7, 0.7])
        frozen_early = make_path(vals)  # constant after t = 0.5
        a = PathPoint(0.5, frozen_early)
        b = PathPoint(0.5, make_path([0.0, 0.3, 0.7, 9.0, -9.0]))  # same frozen part
        assert pseudo_distance(a, b) == 0.0
        c = PathPoint(0.75, frozen_early)  # same frozen path, later time
        assert pseudo_distance(a, c) > 0.0
        d = PathPoint(0.5, make_path([0.0, 0.3, 0.8, 0.7, 0.7]))
        assert pseudo_distance(a, d) > 0.0

    def test_triangle_inequality(self):
        rn = np.random.default_rng(11)
        for _ in range(50):
            pts = [PathPoint(float(rn.integers(0, 9)) * 0.125, make_path(rn.standard_normal(9)))
                   for _ in range(3)]
            dab = pseudo_distance(pts[0], pts[1])
            dbc = pseudo_distance(pts[1], pts[2])
            dac = pseudo_distance(pts[0], pts[2])
            assert dac <= dab + dbc + 1e-12


class TestLipschitzConstant:
    def test_zero(self):
        assert lipschitz_constant(make_path(np.zeros(9))) == 0.0

    def test_line(self):
        g = TimeGrid(1.0, 8)
        p = DiscretePath(g, 3.0 * g.times()[:, None])
        assert lipschitz_constant(p) == pytest.approx(3.0, rel=1e-12)

    def test_matches_exhaustive_scan(self):
        rn = np.random.default_rng(13)
        vals = rn.standard_normal((17, 2))
        p = make_path(vals)
        dt = p.grid.dt
        expected = max(np.linalg.norm(vals[i + 1] - vals[i]) / dt for i in range(16))
        assert lipschitz_constant(p) == pytest.approx(expected, abs=0.0)


class TestControlPath:
    def test_action_formula_and_sign_flip(self):
        rn = np.random.default_rng(17)
        g = TimeGrid(2.0, 16)
        slopes = rn.standard_normal((16, 3))
        c = ControlPath(g, slopes)
        expected = 0.5 * np.sum(slopes**2) * g.dt
        assert c.action == pytest.approx(expected, rel=1e-14)
        assert ControlPath(g, -slopes).action == pytest.approx(c.action, rel=1e-14)
        assert c.action >= 0.0

    def test_integrated_is_piecewise_linear(self):
        g = TimeGrid(1.0, 4)
        c = ControlPath(g, np.array([[1.0], [-2.0], [0.0], [4.0]]))
        p = c.integrated()
        assert np.allclose(p.values[:, 0], [0.0, 0.25, -0.25, -0.25, 0.75])
        assert lipschitz_constant(p) == pytest.approx(4.0, rel=1e-12)


class TestCsv:
    def test_round_trip_full_precision(self):
        rn = np.random.default_rng(19)
        p = make_path(rn.standard_normal((9, 2)) * math.pi)
        buf = io.StringIO()
        path_to_csv(p, buf)
        buf.seek(0)
        header = buf.readline().strip()
        assert header == "t,c0,c1"
        buf.seek(0)
        q = path_from_csv(buf)
        assert np.array_equal(q.values, p.values)  # 17 sig digits round-trips exactly
        assert q.grid.steps == p.grid.steps
