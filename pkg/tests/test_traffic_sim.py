import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lanerec import _kernels as K
from lanerec.traffic_sim import (
    IDMParams, NeighborSet, RoadConfig, SimWorld, SpawnConfig, VehicleState,
    car_following_accel, make_world, step_world,
)

LIMIT = 55 / 3.6

# Values below were computed once with mpmath at 40 digits from the IDM
# formula and frozen here.
IDM_V10_DV5_GAP20 = -2.067992672715617896964601160958018150474
IDM_V5_STOPPED_GAP10 = -2.287956719593611832577528534644748086212


def veh(s, v, l=1, vid=0, vd=LIMIT):
    return VehicleState(vid, s, v, l, vd)


def brute_neighbors(s, occ, active, ego, num_lanes):
    """Exhaustive scan; ties go to the lower id."""
    out = []
    for lane, ahead in ((occ[ego], True), (occ[ego] - 1, True), (occ[ego] - 1, False),
                        (occ[ego] + 1, True), (occ[ego] + 1, False)):
        best = -1
        if 1 <= lane <= num_lanes:
            for j in range(len(s)):
                if j == ego or not active[j] or occ[j] != lane:
                    continue
                if ahead and not s[j] > s[ego]:
                    continue
                if not ahead and not s[j] <= s[ego]:
                    continue
                if best < 0:
                    best = j
                elif ahead and s[j] < s[best]:
                    best = j
                elif not ahead and s[j] > s[best]:
                    best = j
        out.append(best)
    return out


def random_world(rng, n):
    # quantised positions make ties common
    s = rng.integers(0, 60, n).astype(float) * 5.0
    occ = rng.integers(1, 5, n).astype(np.int64)
    active = rng.random(n) < 0.9
    active[0] = True
    return s, occ, active


# -- car following -------------------------------------------------------------

class TestIDM:
    def test_free_road_equilibrium(self):
        assert car_following_accel(veh(0, LIMIT), None) == 0.0

    def test_standstill_free_road(self):
        assert car_following_accel(veh(0, 0.0), None) == IDMParams().a_max

    def test_pinned_value(self):
        idm = IDMParams()
        a = car_following_accel(veh(0, 10.0), veh(20 + idm.vehicle_length, 5.0), idm)
        assert a == pytest.approx(IDM_V10_DV5_GAP20, rel=1e-12)

    def test_stopped_leader_brakes(self):
        idm = IDMParams()
        a = car_following_accel(veh(0, 5.0), veh(10 + idm.vehicle_length, 0.0), idm)
        assert a < 0
        assert a == pytest.approx(IDM_V5_STOPPED_GAP10, rel=1e-12)

    def test_overlap_is_emergency(self):
        idm = IDMParams()
        assert car_following_accel(veh(0, 5.0), veh(3.0, 5.0), idm) == -idm.b_max

    def test_kernel_matches_scalar(self):
        # the per-step kernel uses the same law
        idm = IDMParams()
        for step in (K.step_loop, K.step_numpy):
            s = np.array([0.0, 20 + idm.vehicle_length])
            v = np.array([10.0, 5.0])
            occ = np.array([1, 1], dtype=np.int64)
            vd = np.array([LIMIT, 5.0])
            active = np.ones(2, dtype=np.bool_)
            turn = np.zeros(6, dtype=np.bool_)
            step(s, v, occ, vd, active, turn, 220.0, 3.0, idm.a_max, idm.b, idm.s0,
                 idm.T, idm.b_max, idm.vehicle_length, 0.1)
            a = IDM_V10_DV5_GAP20
            assert v[0] == pytest.approx(10.0 + a * 0.1, rel=1e-12)
            assert s[0] == pytest.approx(1.0 + 0.5 * a * 0.01, rel=1e-12)


# -- stepping ---------------------------------------------------------------------

class TestStep:
    def test_constant_speed_kinematics(self):
        w = SimWorld()
        vid = w.add_vehicle(0.0, 10.0, 2, 10.0)
        step_world(w)
        assert w.s[vid] == 1.0
        assert w.v[vid] == 10.0

    def test_desired_speed_is_kept(self):
        w = SimWorld()
        vid = w.add_vehicle(50.0, LIMIT, 1, LIMIT)
        for _ in range(10):
            w.step()
        assert w.v[vid] == LIMIT

    def test_arrivals_removed(self):
        w = SimWorld()
        vid = w.add_vehicle(299.5, 10.0, 1, 10.0)
        w.step()
        assert not w.active[vid]
        assert vid in w.arrivals

    def test_emergency_braking_never_negative_speed(self):
        w = SimWorld()
        a = w.add_vehicle(0.0, 2.0, 1, 10.0)
        w.add_vehicle(3.0, 0.0, 1, 0.5)
        for _ in range(30):
            w.step()
            assert w.v[a] >= 0.0

    def test_invalid_dt(self):
        with pytest.raises(ValueError):
            SimWorld(dt=0.0)


class TestLaneChange:
    def test_left_from_lane_one_is_noop(self):
        w = SimWorld()
        vid = w.add_vehicle(0.0, 5.0, 1, 5.0)
        assert w.request_lane_change(vid, "L") is False
        assert w.pending_lane_changes == {}

    def test_commit_after_twenty_steps(self):
        w = SimWorld()
        vid = w.add_vehicle(0.0, 5.0, 2, 5.0)
        assert w.request_lane_change(vid, "R")
        assert w.occ[vid] == 3
        for k in range(19):
            w.step()
            assert w.lane[vid] == 2
        w.step()
        assert w.lane[vid] == 3

    def test_second_request_ignored(self):
        w = SimWorld()
        vid = w.add_vehicle(0.0, 5.0, 2, 5.0)
        w.request_lane_change(vid, "R")
        w.step()
        assert w.request_lane_change(vid, "L") is False
        assert w.pending_lane_changes == {vid: (3, 19)}

    def test_solid_line_blocks_in_zone(self):
        w = SimWorld()
        vid = w.add_vehicle(230.0, 5.0, 3, 5.0, is_ego=True)
        assert not w.lane_change_allowed(vid, "L")
        assert w.lane_change_allowed(vid, "R")


class TestCollision:
    def test_overlap(self):
        w = SimWorld()
        w.add_vehicle(0.0, 0.0, 2, 1.0)
        w.add_vehicle(0.5, 0.0, 2, 1.0)
        assert w.detect_collision() == (0, 1)

    def test_adjacent_lanes(self):
        w = SimWorld()
        w.add_vehicle(0.0, 0.0, 2, 1.0)
        w.add_vehicle(0.5, 0.0, 3, 1.0)
        assert w.detect_collision() is None

    def test_empty(self):
        assert SimWorld().detect_collision() is None


# -- neighbors ----------------------------------------------------------------------

class TestNeighbors:
    def test_alone(self):
        w = SimWorld()
        w.add_vehicle(10.0, 5.0, 2, 5.0, is_ego=True)
        assert w.find_neighbors(0).slots() == [None] * 5

    def test_nearest_ahead(self):
        w = SimWorld()
        w.add_vehicle(10.0, 5.0, 2, 5.0, is_ego=True)
        w.add_vehicle(50.0, 5.0, 2, 5.0)
        near = w.add_vehicle(30.0, 5.0, 2, 5.0)
        assert w.find_neighbors(0).ego_leader.id == near

    def test_leftmost_lane(self):
        w = SimWorld()
        w.add_vehicle(10.0, 5.0, 1, 5.0, is_ego=True)
        w.add_vehicle(20.0, 5.0, 2, 5.0)
        nb = w.find_neighbors(0)
        assert nb.left_leader is None and nb.left_follower is None
        assert nb.right_leader is not None

    def test_unknown_id(self):
        with pytest.raises(KeyError):
            SimWorld().find_neighbors(3)

    def test_brute_force_1000_worlds(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(1, 51))
            s, occ, active = random_world(rng, n)
            expect = brute_neighbors(s, occ, active, 0, 4)
            for fn in (K.neighbors_loop, K.neighbors_numpy):
                assert list(fn(s, occ, active, 0, 4)) == expect

    def test_world_query_matches_brute_force(self):
        rng = np.random.default_rng(8)
        for seed in range(20):
            w = make_world(seed=seed)
            for _ in range(int(rng.integers(0, 200))):
                w.step()
            n = w.n
            expect = brute_neighbors(w.s[:n], w.occ[:n], w.active[:n], 0, 4)
            got = [-1 if x is None else x.id for x in w.find_neighbors(0).slots()]
            assert got == expect


class TestLaneMeanSpeed:
    def nb(self, leader=None, follower=None):
        ego = veh(100.0, 7.0, 2)
        return NeighborSet(ego, None, leader, follower, None, None)

    def test_mean(self):
        w = SimWorld()
        assert w.lane_mean_speed(1, self.nb(veh(120, 10.0, 1), veh(90, 6.0, 1))) == 8.0

    def test_missing_counts_as_limit(self):
        w = SimWorld()
        assert w.lane_mean_speed(1, self.nb(veh(120, 10.0, 1))) == pytest.approx(
            0.5 * (10.0 + LIMIT))
        assert w.lane_mean_speed(1, self.nb(veh(120, 10.0, 1))) == pytest.approx(12.64, abs=5e-3)

    def test_both_missing(self):
        assert SimWorld().lane_mean_speed(1, self.nb()) == SimWorld().road.speed_limit

    def test_nonexistent_lane(self):
        assert SimWorld().lane_mean_speed(0, self.nb()) == SimWorld().road.speed_limit


# -- whole-world properties ------------------------------------------------------------

def run(seed, steps=400):
    w = make_world(seed=seed)
    snaps = []
    for _ in range(steps):
        w.step()
        snaps.append(w.state_bytes())
    return w, snaps


def test_determinism_state_and_trace():
    (w1, a), (w2, b) = run(3), run(3)
    assert a == b
    f1, f2 = io.StringIO(), io.StringIO()
    w1.write_trace(f1)
    w2.write_trace(f2)
    assert f1.getvalue() == f2.getvalue()


def test_different_seeds_differ():
    assert run(1, 50)[1] != run(2, 50)[1]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conservation_speed_bounds_no_teleport(seed):
    w = make_world(seed=seed)
    a_max = w.idm.a_max
    bound = w.road.speed_limit * w.dt + 0.5 * a_max * w.dt ** 2 + 1e-9
    for _ in range(300):
        n0 = w.n
        s0 = w.s[:n0].copy()
        was = w.active[:n0].copy()
        w.step()
        n = w.n
        assert len(w.arrivals) + int(w.active[:n].sum()) + len(w.removed) == w.spawned
        v = w.v[:n][w.active[:n]]
        assert np.all(v >= 0.0)
        assert np.all(v <= w.v_des[:n][w.active[:n]] + 1e-12)
        assert np.all(w.v_des[:n] <= w.road.speed_limit)
        moved = np.abs(w.s[:n0] - s0)[was]
        assert np.all(moved <= bound)


def test_kernel_backends_agree_over_episode():
    worlds = []
    for step in (K.step_loop, K.step_numpy):
        w = make_world(seed=11)
        snaps = []
        orig = K.step
        try:
            import lanerec.traffic_sim as ts
            ts._kernels.step = step
            for _ in range(300):
                w.step()
                snaps.append((w.s[:w.n].copy(), w.v[:w.n].copy()))
        finally:
            ts._kernels.step = orig
        worlds.append(snaps)
    for (s1, v1), (s2, v2) in zip(*worlds):
        np.testing.assert_allclose(s1, s2, rtol=0, atol=1e-9)
        np.testing.assert_allclose(v1, v2, rtol=0, atol=1e-9)


@pytest.mark.parametrize("pair", [("leaders_loop", "leaders_numpy"),
                                  ("first_overlap_loop", "first_overlap_numpy")])
def test_kernel_pairs_agree(pair):
    rng = np.random.default_rng(5)
    f, g = (getattr(K, p) for p in pair)
    for _ in range(300):
        s, occ, active = random_world(rng, int(rng.integers(1, 40)))
        s = s + rng.random(s.size) * 3.0
        args = (s, occ, active) if "leaders" in pair[0] else (s, occ, active, 4.5)
        a, b = f(*args), g(*args)
        assert np.array_equal(np.asarray(a), np.asarray(b))


class TestConfig:
    def test_road_validation(self):
        with pytest.raises(ValueError):
            RoadConfig(num_lanes=1)
        with pytest.raises(ValueError):
            RoadConfig(mandatory_zone_start=400.0)
        with pytest.raises(ValueError):
            RoadConfig(right_turn_only_lanes=(5,))

    def test_default_scenario(self):
        r = RoadConfig()
        assert (r.num_lanes, r.lane_width, r.road_length) == (4, 3.5, 300.0)
        assert math.isclose(r.speed_limit, 15.277777, rel_tol=1e-6)


def test_nonpositive_desired_speed_rejected():
    with pytest.raises(ValueError):
        SimWorld().add_vehicle(0.0, 0.0, 1, 0.0)
