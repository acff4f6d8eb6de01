import math

import numpy as np
import pytest

from slamnc.errors import TooCloseToSource
from slamnc.frames import Rotation3, planar_rotation_from_gravity, wrap_angle
from slamnc.likelihood import segments_intersect
from slamnc.mfmap import DataPoint, MfMap, map_estimate_world
from slamnc.rbpf import MotionNoise
from slamnc.synthworld import (
    MU0_4PI_UT,
    FieldModel,
    Scenario,
    accel_from_rsp,
    draw_bias,
    field_at,
    ground_truth_steps,
    make_field,
    make_figure_eight,
    make_scenario,
    make_trajectory,
    sense,
    wobble_rotation,
)

BOUNDS = (0.0, 0.0, 10.0, 6.0)


class TestField:
    def test_no_dipoles(self, rng):
        fm = FieldModel(np.array([18.0, 0.0, -45.0]))
        pts = rng.uniform(-10, 10, (20, 3))
        np.testing.assert_array_equal(field_at(fm, pts), np.tile([18.0, 0.0, -45.0], (20, 1)))

    @pytest.mark.parametrize("d", [0.5, 1.0, 2.5])
    def test_on_axis_dipole(self, d):
        m = 30.0
        fm = FieldModel(np.zeros(3), [[0, 0, 0]], [[0, 0, m]])
        np.testing.assert_allclose(field_at(fm, [0, 0, d]), [0, 0, MU0_4PI_UT * 2 * m / d**3], rtol=1e-12)
        # equatorial plane: half the axial magnitude, antiparallel
        np.testing.assert_allclose(field_at(fm, [d, 0, 0]), [0, 0, -MU0_4PI_UT * m / d**3], rtol=1e-12,
                                   atol=1e-15)

    def test_divergence_free(self, rng):
        fm = make_field(rng, BOUNDS)
        h = 1e-4
        for p in rng.uniform([0, 0, -0.2], [10, 6, 0.2], (50, 3)):
            div, scale = 0.0, 0.0
            for a in range(3):
                e = np.zeros(3)
                e[a] = h
                g = (field_at(fm, p + e)[a] - field_at(fm, p - e)[a]) / (2 * h)
                div += g
                scale += abs(g)
            assert abs(div) <= 1e-6 * scale

    def test_too_close(self):
        fm = FieldModel(np.zeros(3), [[0, 0, 1.0]], [[1, 0, 0]], clearance=0.5)
        with pytest.raises(TooCloseToSource):
            field_at(fm, [0, 0, 0.7])

    def test_planar_positions_at_height_zero(self, rng):
        fm = make_field(rng, BOUNDS)
        np.testing.assert_array_equal(field_at(fm, [[1.0, 2.0]]), field_at(fm, [[1.0, 2.0, 0.0]]))

    @pytest.mark.parametrize("seed", range(5))
    def test_magnitude_and_anomaly(self, seed):
        fm = make_field(np.random.default_rng(seed), BOUNDS)
        gx, gy = np.meshgrid(np.linspace(0, 10, 81), np.linspace(0, 6, 49))
        b = field_at(fm, np.stack([gx, gy], axis=-1).reshape(-1, 2))
        mag = np.linalg.norm(b, axis=1)
        assert mag.min() >= 10.0 and mag.max() <= 200.0
        assert math.sqrt(np.mean(np.var(b, axis=0))) == pytest.approx(15.0, rel=0.15)

    def test_round_trip(self, rng):
        fm = make_field(rng, BOUNDS)
        back = FieldModel.from_dict(fm.to_dict())
        np.testing.assert_array_equal(field_at(back, [[1, 1]]), field_at(fm, [[1, 1]]))


class TestFigureEight:
    @pytest.fixture(scope="class")
    @staticmethod
    def loop():
        return make_figure_eight(BOUNDS, 0.1)

    def test_inside_bounds(self, loop):
        assert np.all((loop[:, 0] >= 0) & (loop[:, 0] <= 10) & (loop[:, 1] >= 0) & (loop[:, 1] <= 6))

    def test_step_spacing(self, loop):
        d = np.hypot(*np.diff(loop[:, :2], axis=0).T)
        assert d.max() < 0.1 * 1.05 and d.min() > 0.1 * 0.9

    def test_closure(self, loop):
        assert np.hypot(*(loop[-1, :2] - loop[0, :2])) <= 0.1 * 1.05

    def test_heading_tangent(self, loop):
        d = np.diff(loop[:, :2], axis=0)
        chord = np.arctan2(d[:, 1], d[:, 0])
        assert np.max(np.abs(wrap_angle(chord - loop[:-1, 2]))) < 0.1

    def test_crossing_in_two_directions(self, loop):
        center = np.array([5.0, 3.0])
        near = np.flatnonzero(np.hypot(*(loop[:, :2] - center).T) < 0.3)
        headings = loop[near, 2]
        diff = np.abs(wrap_angle(headings[:, None] - headings[None, :]))
        assert diff.max() > math.radians(45)
        # two separate passes, not one contiguous run of samples
        assert np.any(np.diff(near) > 1)

    def test_two_loops_revisit_every_pose(self):
        traj = make_trajectory(BOUNDS, 0.1, loops=2)
        one = make_figure_eight(BOUNDS, 0.1)
        assert len(traj) >= 2 * len(one)
        second = traj[len(one):]
        d = np.min(np.hypot(second[:, None, 0] - one[None, :, 0], second[:, None, 1] - one[None, :, 1]), axis=1)
        assert d.max() < 1e-9

    def test_inside_floor_plan(self):
        sc = make_scenario(seed=0)
        tr = sc.trajectory[:, :2]
        assert not segments_intersect(tr[:-1], tr[1:], sc.plan.walls).any()

    def test_too_small(self):
        with pytest.raises(ValueError):
            make_figure_eight((0, 0, 1, 1), 0.1)


class TestSense:
    def test_round_trip_reconstructs_world_field(self):
        sc = make_scenario(seed=3, noise_mag=0.0, noise_odom=MotionNoise(0, 0, 0), kind="phone")
        steps, gt = sense(sc)
        m = MfMap()
        for s, pose in zip(steps, gt.poses):
            m.insert(DataPoint(s.z, *pose, s.r_sp, s.t))
        for i, d in enumerate(m):
            np.testing.assert_allclose(d.world_field([0, 0, 0]), gt.field_world[i], atol=1e-9)
        nb = m.neighborhood(gt.poses[10, :2], gt.t[10], k=1, t_excl=0.0)
        np.testing.assert_allclose(map_estimate_world(nb, [0, 0, 0]), gt.field_world[10], atol=1e-9)

    def test_bias_is_additive(self):
        sc = make_scenario(seed=1, bias=(50, 50, 0), noise_mag=0.0)
        steps, gt = sense(sc)
        z = np.array([s.z for s in steps])
        np.testing.assert_allclose(z - gt.z_clean, np.tile(sc.injected_bias, (len(z), 1)), atol=1e-12)

    def test_drawn_bias_range(self):
        for seed in range(200):
            b = make_scenario(seed=seed, bias=(50, 50, 0), n_dipoles=0).injected_bias
            assert 45.0 <= b[0] <= 55.0 and 45.0 <= b[1] <= 55.0 and b[2] == 0.0

    def test_draw_bias_spread(self, rng):
        b = np.array([draw_bias([100, 100, 100], rng, 0.1) for _ in range(2000)])
        assert b.min() >= 90 and b.max() <= 110 and b.std() > 4

    def test_deterministic(self):
        a, ga = sense(make_scenario(seed=4, bias=(10, 10, 0)))
        b, gb = sense(make_scenario(seed=4, bias=(10, 10, 0)))
        assert np.array([s.z for s in a]).tobytes() == np.array([s.z for s in b]).tobytes()
        assert [(s.u.dx, s.u.dy, s.u.dtheta) for s in a] == [(s.u.dx, s.u.dy, s.u.dtheta) for s in b]

    def test_robot_sensor_is_level(self):
        steps, _ = sense(make_scenario(seed=0, loops=1))
        assert all(s.r_sp.allclose(Rotation3.identity()) for s in steps)

    def test_phone_wobble(self):
        steps, _ = sense(make_scenario(seed=0, kind="phone", loops=1))
        tilt = [math.degrees(math.acos(np.clip(s.r_sp.apply([0, 0, 1])[2], -1, 1))) for s in steps]
        assert 5.0 < max(tilt) <= 10.0 * math.sqrt(2) + 1e-9

    def test_hold_pitch(self):
        r = wobble_rotation(0.0, amplitude_deg=0.0, hold_pitch_deg=30.0)
        tilt = math.degrees(math.acos(r.apply([0, 0, 1])[2]))
        assert tilt == pytest.approx(30.0)

    def test_times_increase(self):
        steps, _ = sense(make_scenario(seed=0, loops=1))
        t = np.array([s.t for s in steps])
        assert np.all(np.diff(t) > 0)
        np.testing.assert_allclose(np.diff(t), 0.1 / 0.5, rtol=0.1)

    def test_include_first(self):
        sc = make_scenario(seed=0, loops=1)
        a, _ = sense(sc)
        b, gt = sense(sc, include_first=True)
        assert len(b) == len(a) + 1 and b[0].u.dx == 0.0
        np.testing.assert_array_equal(gt.poses[0], sc.trajectory[0])

    def test_ground_truth_steps_dead_reckon_exactly(self):
        sc = make_scenario(seed=0, loops=1)
        steps, gt = sense(sc)
        pose = np.array(sc.initial_pose)
        for s, truth in zip(ground_truth_steps(steps, gt, sc.initial_pose), gt.poses):
            c, sn = math.cos(pose[2]), math.sin(pose[2])
            pose = np.array([pose[0] + c * s.u.dx - sn * s.u.dy, pose[1] + sn * s.u.dx + c * s.u.dy,
                             wrap_angle(pose[2] + s.u.dtheta)])
            np.testing.assert_allclose(pose, truth, atol=1e-9)

    def test_lipschitz_bound(self, rng):
        sc = make_scenario(seed=2)
        lip = sc.lipschitz()
        p = rng.uniform([0.5, 0.5], [9.5, 5.5], (500, 2))
        q = p + rng.normal(0, 0.1, (500, 2))
        db = np.linalg.norm(field_at(sc.field, p) - field_at(sc.field, q), axis=1)
        assert np.all(db <= lip * np.hypot(*(p - q).T) * 1.05)

    def test_accel_round_trip(self):
        for t in np.linspace(0, 30, 13):
            r = wobble_rotation(t)
            assert planar_rotation_from_gravity(accel_from_rsp(r)).allclose(r, atol=1e-12)


def test_scenario_round_trip(tmp_path):
    sc = make_scenario(seed=5, bias=(5, 5, 0), kind="phone", hold_pitch=20.0)
    sc.save(tmp_path / "s.json")
    back = Scenario.load(tmp_path / "s.json")
    a, _ = sense(sc)
    b, _ = sense(back)
    assert np.array([s.z for s in a]).tobytes() == np.array([s.z for s in b]).tobytes()
    assert back.hold_pitch == 20.0 and back.phone


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_scenario(kind="drone")
