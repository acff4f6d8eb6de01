import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slamnc.errors import DegenerateGeometry, DegenerateHorizontalField, InvalidConfig
from slamnc.evaluation import (
    NneConfig,
    cauchy_fit,
    compass_headings,
    nearest_eligible,
    nne,
    nne_details,
    sphere_fit,
    sphere_fit_rms,
    world_fields,
)
from slamnc.frames import Rotation3, planar_rotation_from_gravity, sensor_to_world
from slamnc.mfmap import DataPoint, MfMap
from slamnc.synthworld import make_scenario, sense

ID = Rotation3.identity()


def build_map(points):
    m = MfMap()
    for z, x, y, th, r, t in points:
        m.insert(DataPoint(np.asarray(z, float), x, y, th, r, t))
    return m


def random_map(rng, n=200, extent=8.0, offset=(0.0, 0.0)):
    pts = []
    for i in range(n):
        r = planar_rotation_from_gravity(rng.normal(0, 1, 3) + [0, 0, 9.81])
        pts.append((rng.normal(0, 40, 3), offset[0] + rng.uniform(0, extent), offset[1] + rng.uniform(0, extent),
                    rng.uniform(-math.pi, math.pi), r, 0.5 * i))
    return build_map(pts), pts


def brute_nne(pts, b, t_min=5.0, r_max=7.0):
    """Quadratic scan over all pairs; world vectors come from the same rotation routine as the library."""
    w = world_fields(build_map(pts), b)
    errs = []
    for i, (z, x, y, th, r, t) in enumerate(pts):
        best, bd = None, math.inf
        for j, (z2, x2, y2, th2, r2, t2) in enumerate(pts):
            if j == i or abs(t - t2) < t_min:
                continue
            d = math.hypot(x - x2, y - y2)
            if d < bd:
                best, bd = j, d
        if best is None or bd >= r_max:
            continue
        errs.append(np.linalg.norm(w[i] - w[best]))
    return float(np.median(errs)) if errs else None


class TestNne:
    def test_exact_revisits_give_zero(self):
        sc = make_scenario(seed=0, noise_mag=0.0, bias=(20, 0, 0))
        steps, gt = sense(sc)
        m = build_map([(s.z, *p, s.r_sp, s.t) for s, p in zip(steps, gt.poses)])
        assert nne(m, sc.injected_bias) == pytest.approx(0.0, abs=1e-9)
        assert nne(m, [0, 0, 0]) > 5.0

    def test_three_four_five(self):
        m = build_map([((50, 0, 0), 1, 1, 0.0, ID, 0.0), ((53, 4, 0), 1, 1, 0.0, ID, 10.0)])
        det = nne_details(m, [0, 0, 0])
        assert det.median == pytest.approx(5.0)
        assert det.n_eligible == 2

    def test_matches_quadratic_scan(self, rng):
        m, pts = random_map(rng)
        b = rng.normal(0, 20, 3)
        assert nne(m, b) == brute_nne(pts, b)

    @pytest.mark.parametrize("t_min, r_max", [(0.0, 7.0), (5.0, 1.0), (20.0, 3.0), (5.0, 100.0)])
    def test_matches_quadratic_scan_configs(self, rng, t_min, r_max):
        m, pts = random_map(rng, n=150)
        assert nne(m, [1, 2, 3], NneConfig(t_min, r_max)) == brute_nne(pts, np.array([1, 2, 3]), t_min, r_max)

    def test_translation_invariant(self, rng):
        m, pts = random_map(rng)
        moved = build_map([(z, x + 123.4, y - 56.7, th, r, t) for z, x, y, th, r, t in pts])
        a, b = nne_details(m, [3, 2, 1]), nne_details(moved, [3, 2, 1])
        assert a.median == b.median
        np.testing.assert_array_equal(a.neighbor, b.neighbor)

    def test_no_eligible_points(self):
        m = build_map([((1, 0, 0), 0, 0, 0, ID, 0.0), ((1, 0, 0), 0, 0, 0, ID, 1.0)])
        assert nne(m, [0, 0, 0]) is None

    def test_far_pairs_skipped(self):
        m = build_map([((1, 0, 0), 0, 0, 0, ID, 0.0), ((9, 0, 0), 7.0, 0, 0, ID, 10.0)])
        assert nne_details(m, [0, 0, 0]).n_eligible == 0
        assert nne(m, [0, 0, 0], NneConfig(r_max=7.01)) == pytest.approx(8.0)

    def test_ties_go_to_lowest_index(self):
        xy = np.array([[0, 0], [1, 0], [-1, 0]], float)
        idx, dist = nearest_eligible(xy, np.array([0.0, 10.0, 20.0]), NneConfig())
        assert idx[0] == 1 and dist[0] == 1.0

    def test_blocks_agree_with_single_pass(self, rng):
        xy = rng.uniform(0, 30, (1500, 2))
        t = np.arange(1500) * 0.2
        idx, dist = nearest_eligible(xy, t, NneConfig())
        d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
        d[np.abs(t[:, None] - t[None, :]) < 5.0] = np.inf
        np.fill_diagonal(d, np.inf)
        np.testing.assert_array_equal(idx, np.argmin(d, axis=1))
        np.testing.assert_array_equal(dist, d.min(axis=1))

    def test_empty_map(self):
        with pytest.raises(ValueError):
            nne(MfMap(), [0, 0, 0])

    @pytest.mark.parametrize("kw", [{"t_min": -1.0}, {"r_max": 0.0}])
    def test_config_validation(self, kw):
        with pytest.raises(InvalidConfig):
            NneConfig(**kw)

    def test_world_fields(self, rng):
        m, pts = random_map(rng, n=50)
        b = np.array([4.0, -3.0, 2.0])
        ref = [sensor_to_world(r, th).apply(np.asarray(z) - b) for z, x, y, th, r, t in pts]
        np.testing.assert_allclose(world_fields(m, b), ref, atol=1e-12)


class TestCauchy:
    def test_by_hand(self):
        loc, scale = cauchy_fit([-0.1, 0.0, 0.1])
        assert loc == pytest.approx(0.0, abs=1e-15)
        assert scale == pytest.approx(0.1)

    def test_wraparound(self):
        loc, scale = cauchy_fit([math.pi - 0.05, -math.pi + 0.05, math.pi])
        assert abs(abs(loc) - math.pi) < 1e-12
        assert scale == pytest.approx(0.05)

    @given(st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=50), st.floats(-3.0, 3.0))
    def test_shift_moves_location(self, h, delta):
        loc0, s0 = cauchy_fit(h)
        loc1, s1 = cauchy_fit(np.array(h) + delta)
        assert abs(math.remainder(loc1 - loc0 - delta, 2 * math.pi)) < 1e-9
        assert s1 == pytest.approx(s0, abs=1e-9)

    def test_recovers_cauchy_parameters(self, rng):
        h = np.clip(0.3 + 0.05 * rng.standard_cauchy(100000), -3, 3)
        loc, scale = cauchy_fit(h)
        assert loc == pytest.approx(0.3, abs=0.002)
        assert scale == pytest.approx(0.05, rel=0.03)

    def test_empty(self):
        with pytest.raises(ValueError):
            cauchy_fit([])


class TestCompass:
    def uniform_map(self, rng, bias=np.zeros(3), n=300):
        world = np.array([20.0, 0.0, -40.0])
        pts = []
        for i in range(n):
            r = planar_rotation_from_gravity(rng.normal(0, 1, 3) + [0, 0, 9.81])
            th = rng.uniform(-math.pi, math.pi)
            z = sensor_to_world(r, th).inverse().apply(world) + bias
            pts.append((z, rng.uniform(0, 5), rng.uniform(0, 5), th, r, float(i)))
        return build_map(pts)

    def test_uniform_field_points_north(self, rng):
        rep = compass_headings(self.uniform_map(rng), [0, 0, 0])
        np.testing.assert_allclose(rep.headings, 0.0, atol=1e-9)
        assert rep.cauchy_location == pytest.approx(0.0, abs=1e-9)

    def test_bias_error_widens_spread(self, rng):
        sc = make_scenario(seed=0, bias=(0, 0, 0))
        steps, gt = sense(sc)
        m = build_map([(s.z, *p, s.r_sp, s.t) for s, p in zip(steps, gt.poses)])
        good = compass_headings(m, [0, 0, 0])
        bad = compass_headings(m, [100, 0, 0])
        assert bad.cauchy_scale > good.cauchy_scale
        assert good.cauchy_scale > 0

    @pytest.mark.parametrize("north_deg", [-170.0, -30.0, 15.0, 90.0])
    def test_declared_north_shifts_location(self, rng, north_deg):
        sc = make_scenario(seed=1)
        steps, gt = sense(sc)
        m = build_map([(s.z, *p, s.r_sp, s.t) for s, p in zip(steps, gt.poses)])
        base = compass_headings(m, [0, 0, 0])
        rep = compass_headings(m, [0, 0, 0], math.radians(north_deg))
        shift = math.remainder(base.cauchy_location - rep.cauchy_location - math.radians(north_deg), 2 * math.pi)
        assert abs(shift) < 1e-9
        assert rep.cauchy_scale == pytest.approx(base.cauchy_scale, abs=1e-9)

    def test_vertical_field_is_degenerate(self):
        m = build_map([((0.2, 0.1, -50), 0, 0, 0, ID, float(i)) for i in range(5)])
        with pytest.raises(DegenerateHorizontalField):
            compass_headings(m, [0, 0, 0])


def sphere_points(rng, center, radius, n, noise=0.0):
    u = rng.standard_normal((n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return center + radius * u + noise * rng.standard_normal((n, 3))


class TestSphereFit:
    def test_exact(self, rng):
        c0 = np.array([-18.0, 48.0, -118.0])
        c, r = sphere_fit(sphere_points(rng, c0, 50.0, 200))
        np.testing.assert_allclose(c, c0, atol=1e-9)
        assert r == pytest.approx(50.0, abs=1e-9)

    def test_tetrahedron(self):
        pts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / math.sqrt(3)
        c, r = sphere_fit(pts)
        np.testing.assert_allclose(c, 0.0, atol=1e-12)
        assert r == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_exact_any_center_radius(self, seed):
        rng = np.random.default_rng(seed)
        c0 = rng.uniform(-500, 500, 3)
        r0 = rng.uniform(1, 300)
        c, r = sphere_fit(sphere_points(rng, c0, r0, 50))
        np.testing.assert_allclose(c, c0, atol=1e-9 * max(1.0, r0))
        assert r == pytest.approx(r0, rel=1e-10)

    def test_noisy_monte_carlo(self, rng):
        c0 = np.array([-18.0, 48.0, -118.0])
        for _ in range(100):
            c, _ = sphere_fit(sphere_points(rng, c0, 50.0, 500, noise=1.0))
            assert np.all(np.abs(c - c0) <= 0.5)

    def test_rms(self, rng):
        c0 = np.array([1.0, 2.0, 3.0])
        pts = sphere_points(rng, c0, 10.0, 100)
        assert sphere_fit_rms(pts, c0, 10.0) == pytest.approx(0.0, abs=1e-12)
        assert sphere_fit_rms(pts, c0, 9.0) == pytest.approx(1.0)

    @pytest.mark.parametrize("pts", [
        np.zeros((3, 3)),
        np.column_stack([np.cos(np.linspace(0, 6, 20)), np.sin(np.linspace(0, 6, 20)), np.zeros(20)]),
        np.column_stack([np.linspace(0, 1, 10)] * 3),
    ])
    def test_degenerate(self, pts):
        with pytest.raises(DegenerateGeometry):
            sphere_fit(pts)
