"""Discrete-time multi-lane highway micro-simulator.

Longitudinal motion follows the Intelligent Driver Model, lane changes are
discrete maneuvers of fixed duration, and the road carries a mandatory
lane-change zone: past ``mandatory_zone_start`` the boundary between the
right-turn-only lanes and the through lanes is a solid line, and vehicles in
right-turn-only lanes slow down to ``turn_speed`` for the turn.

Lanes are numbered from 1 (leftmost) to ``num_lanes`` (rightmost).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from lanerec import _kernels

KMH = 1.0 / 3.6
THROUGH, RIGHT = 0, 1


@dataclass(frozen=True)
class RoadConfig:
    num_lanes: int = 4
    lane_width: float = 3.5
    road_length: float = 300.0
    speed_limit: float = 55.0 * KMH
    mandatory_zone_start: float = 220.0
    entrance_lane: int = 1
    right_turn_only_lanes: tuple = (3, 4)
    turn_speed: float = 3.0

    def __post_init__(self):
        if self.num_lanes < 2:
            raise ValueError("num_lanes must be >= 2")
        if not 0 < self.mandatory_zone_start < self.road_length:
            raise ValueError("mandatory_zone_start must lie inside the road")
        if not set(self.right_turn_only_lanes) <= set(range(1, self.num_lanes + 1)):
            raise ValueError("right_turn_only_lanes must be valid lane indices")
        if not 1 <= self.entrance_lane <= self.num_lanes:
            raise ValueError("entrance_lane out of range")
        if self.speed_limit <= 0 or self.turn_speed <= 0:
            raise ValueError("speeds must be positive")

    def is_turn_lane(self, lane: int) -> bool:
        return lane in self.right_turn_only_lanes


@dataclass(frozen=True)
class IDMParams:
    a_max: float = 2.0
    b: float = 3.0
    s0: float = 2.0
    T: float = 1.5
    b_max: float = 9.0
    vehicle_length: float = 4.5


@dataclass(frozen=True)
class SpawnConfig:
    """Initial placements and arrivals. Defaults are scenario choices.

    ``fixed`` holds ``(lane, s)`` pairs; desired speeds of every non-ego
    vehicle are drawn uniformly from ``lane_speed_range[lane]``.
    """

    ego_start_s: float = 5.0
    ego_start_v: float = 8.0
    fixed: tuple = (
        (1, 25.0), (1, 55.0), (1, 90.0), (1, 130.0), (1, 175.0), (1, 230.0),
        (2, 30.0), (2, 75.0), (2, 125.0), (2, 180.0), (2, 240.0),
        (3, 120.0), (4, 60.0), (4, 200.0),
    )
    lane_speed_range: tuple = ((5.5, 6.5), (7.0, 8.5), (12.5, 15.2), (12.5, 15.2))
    entrance_s: float = 40.0
    entrance_rate: float = 0.15
    entrance_speed: float = 5.0
    n_random: int = 4
    random_s_range: tuple = (20.0, 260.0)
    clearance: float = 10.0
    traffic_lc_threshold: float = 5.0
    traffic_decision_period: float = 1.0
    horizon: float = 150.0


@dataclass
class VehicleState:
    id: int
    s: float
    v: float
    l: int
    v_desired: float
    is_ego: bool = False


@dataclass
class NeighborSet:
    ego: VehicleState
    ego_leader: Optional[VehicleState] = None
    left_leader: Optional[VehicleState] = None
    left_follower: Optional[VehicleState] = None
    right_leader: Optional[VehicleState] = None
    right_follower: Optional[VehicleState] = None

    SLOTS = ("ego_leader", "left_leader", "left_follower",
             "right_leader", "right_follower")

    def slots(self) -> list:
        return [getattr(self, name) for name in self.SLOTS]


def car_following_accel(follower: VehicleState, leader: Optional[VehicleState],
                        idm: IDMParams = IDMParams()) -> float:
    """IDM acceleration of ``follower`` behind ``leader`` (free road if None).

    A non-positive bumper gap returns ``-idm.b_max`` (emergency braking).
    """
    r = follower.v / follower.v_desired
    acc = idm.a_max * (1.0 - r ** 4)
    if leader is None:
        return acc
    gap = leader.s - follower.s - idm.vehicle_length
    if gap <= 0.0:
        return -idm.b_max
    dv = follower.v - leader.v
    s_star = idm.s0 + follower.v * idm.T + follower.v * dv / (2.0 * math.sqrt(idm.a_max * idm.b))
    return acc - idm.a_max * (s_star / gap) ** 2


class SimWorld:
    """Vehicle arrays plus road geometry and a per-instance RNG.

    Vehicle ids are array indices in spawn order; inactive slots are vehicles
    that arrived or were removed.
    """

    def __init__(self, road: RoadConfig = RoadConfig(), idm: IDMParams = IDMParams(),
                 dt: float = 0.1, lane_change_duration: float = 2.0,
                 rng_seed: int = 0, g_lead_min: float = 5.0, g_follow_min: float = 5.0,
                 capacity: int = 64):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.road = road
        self.idm = idm
        self.dt = dt
        self.lane_change_duration = lane_change_duration
        self.lane_change_steps = max(1, int(round(lane_change_duration / dt)))
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self.g_lead_min = g_lead_min
        self.g_follow_min = g_follow_min
        self.time = 0.0
        self.step_count = 0
        self.n = 0
        self._alloc(capacity)
        self.turn_lane = np.zeros(road.num_lanes + 2, dtype=np.bool_)
        for lane in road.right_turn_only_lanes:
            self.turn_lane[lane] = True
        self.arrivals: dict = {}
        self.removed: list = []
        self.emergency = np.zeros(0, dtype=bool)
        self.spawn: Optional[SpawnConfig] = None
        self._entrance_times: list = []
        self._traffic_every = 0

    def _alloc(self, cap):
        self.s = np.zeros(cap)
        self.v = np.zeros(cap)
        self.lane = np.ones(cap, dtype=np.int64)
        self.occ = np.ones(cap, dtype=np.int64)
        self.v_des = np.ones(cap)
        self.route = np.zeros(cap, dtype=np.int64)
        self.lc_steps = np.zeros(cap, dtype=np.int64)
        self.active = np.zeros(cap, dtype=np.bool_)
        self.is_ego = np.zeros(cap, dtype=np.bool_)

    def _grow(self):
        names = ("s", "v", "lane", "occ", "v_des", "route", "lc_steps", "active", "is_ego")
        old = {k: getattr(self, k) for k in names}
        self._alloc(2 * old["s"].shape[0])
        for k, arr in old.items():
            getattr(self, k)[: arr.shape[0]] = arr

    # -- population -------------------------------------------------------

    def add_vehicle(self, s: float, v: float, lane: int, v_desired: float,
                    route: int = THROUGH, is_ego: bool = False) -> int:
        if not 1 <= lane <= self.road.num_lanes:
            raise ValueError(f"lane {lane} out of range")
        if not v_desired > 0:
            raise ValueError("v_desired must be positive")
        v_desired = min(v_desired, self.road.speed_limit)
        if self.n == self.s.shape[0]:
            self._grow()
        i = self.n
        self.s[i], self.v[i] = s, min(max(v, 0.0), v_desired)
        self.lane[i] = self.occ[i] = lane
        self.v_des[i] = v_desired
        self.route[i] = route
        self.lc_steps[i] = 0
        self.active[i] = True
        self.is_ego[i] = is_ego
        self.n += 1
        return i

    def remove_vehicle(self, vid: int):
        if self.active[vid]:
            self.active[vid] = False
            self.removed.append(vid)

    def is_clear(self, lane: int, s: float, clearance: float) -> bool:
        m = self._view("active") & (self._view("occ") == lane)
        return not np.any(np.abs(self._view("s")[m] - s) < clearance)

    def populate(self, spawn: SpawnConfig):
        """Place ego and traffic per ``spawn``; all randomness from the world RNG."""
        self.spawn = spawn
        road = self.road
        rng = self.rng
        self.add_vehicle(spawn.ego_start_s, spawn.ego_start_v, 1, road.speed_limit,
                         THROUGH, is_ego=True)

        def lane_speed(lane):
            lo, hi = spawn.lane_speed_range[min(lane, len(spawn.lane_speed_range)) - 1]
            return float(rng.uniform(lo, hi))

        def place(lane, s):
            if not self.is_clear(lane, s, spawn.clearance):
                return
            vd = lane_speed(lane)
            route = RIGHT if road.is_turn_lane(lane) else THROUGH
            self.add_vehicle(s, vd, lane, vd, route)

        for lane, s in spawn.fixed:
            if 1 <= lane <= road.num_lanes:
                place(int(lane), float(s))
        for _ in range(spawn.n_random):
            lane = int(rng.integers(1, road.num_lanes + 1))
            s = float(rng.uniform(*spawn.random_s_range))
            place(lane, s)

        times = []
        t = 0.0
        if spawn.entrance_rate > 0:
            while True:
                t += float(rng.exponential(1.0 / spawn.entrance_rate))
                if t > spawn.horizon:
                    break
                times.append(t)
        self._entrance_times = times
        self._traffic_every = max(1, int(round(spawn.traffic_decision_period / self.dt)))

    # -- accessors ----------------------------------------------------------

    def _view(self, name):
        return getattr(self, name)[: self.n]

    @property
    def spawned(self) -> int:
        return self.n

    def active_ids(self) -> np.ndarray:
        return np.flatnonzero(self._view("active"))

    def vehicle(self, vid: int) -> VehicleState:
        if not 0 <= vid < self.n:
            raise KeyError(f"unknown vehicle id {vid}")
        return VehicleState(int(vid), float(self.s[vid]), float(self.v[vid]),
                            int(self.lane[vid]), float(self.v_des[vid]), bool(self.is_ego[vid]))

    @property
    def pending_lane_changes(self) -> dict:
        ids = np.flatnonzero(self._view("lc_steps") > 0)
        return {int(i): (int(self.occ[i]), int(self.lc_steps[i])) for i in ids}

    # -- stepping and queries---------------------------------------------------

    def step(self) -> "SimWorld":
        """Advance one timestep ``dt`` in place and return self."""
        n = self.n
        r, p = self.road, self.idm
        self.emergency = _kernels.step(
            self.s[:n], self.v[:n], self.occ[:n], self.v_des[:n], self.active[:n],
            self.turn_lane, r.mandatory_zone_start, r.turn_speed,
            p.a_max, p.b, p.s0, p.T, p.b_max, p.vehicle_length, self.dt)
        self.step_count += 1
        self.time = self.step_count * self.dt

        lc = self.lc_steps[:n]
        pending = lc > 0
        if pending.any():
            lc[pending] -= 1
            done = pending & (lc == 0)
            self.lane[:n][done] = self.occ[:n][done]

        gone = self.active[:n] & (self.s[:n] > r.road_length)
        for i in np.flatnonzero(gone):
            self.arrivals[int(i)] = self.time
        self.active[:n][gone] = False

        self._spawn_entrance()
        if self.spawn is not None and self.step_count % self._traffic_every == 0:
            self._traffic_lane_changes()
        return self

    def find_neighbors(self, ego_id: int) -> NeighborSet:
        # an inactive (arrived) ego is still queried for terminal observations
        if not 0 <= ego_id < self.n:
            raise KeyError(f"unknown ego id {ego_id}")
        n = self.n
        idx = _kernels.neighbors(self.s[:n], self.occ[:n], self.active[:n],
                                 ego_id, self.road.num_lanes)
        states = [self._occupancy_state(int(i)) if i >= 0 else None for i in idx]
        return NeighborSet(self._occupancy_state(ego_id), *states)

    def _occupancy_state(self, vid):
        st = self.vehicle(vid)
        st.l = int(self.occ[vid])
        return st

    def request_lane_change(self, vehicle_id: int, direction: str) -> bool:
        """Start a lane change; returns False (no-op) when the target lane
        does not exist or a maneuver is already pending."""
        target = self.occ[vehicle_id] + (-1 if direction == "L" else 1)
        if not 1 <= target <= self.road.num_lanes:
            return False
        if self.lc_steps[vehicle_id] > 0:
            return False
        self.occ[vehicle_id] = target
        self.lc_steps[vehicle_id] = self.lane_change_steps
        return True

    def detect_collision(self) -> Optional[tuple]:
        n = self.n
        i, j = _kernels.first_overlap(self.s[:n], self.occ[:n], self.active[:n],
                                      self.idm.vehicle_length)
        if i < 0:
            return None
        return int(i), int(j)

    def lane_mean_speed(self, lane: int, neighbors: NeighborSet) -> float:
        """Mean of leader and follower speed in ``lane``; a missing vehicle
        counts as the speed limit. In the ego lane the ego itself is the
        follower."""
        limit = self.road.speed_limit
        if not 1 <= lane <= self.road.num_lanes:
            return limit
        ego_lane = neighbors.ego.l
        if lane == ego_lane:
            pair = (neighbors.ego_leader, neighbors.ego)
        elif lane == ego_lane - 1:
            pair = (neighbors.left_leader, neighbors.left_follower)
        elif lane == ego_lane + 1:
            pair = (neighbors.right_leader, neighbors.right_follower)
        else:
            raise ValueError("lane must be the ego lane or adjacent to it")
        return 0.5 * sum(limit if x is None else x.v for x in pair)

    # -- lane-change legality -------------------------------------------------

    def lane_change_allowed(self, vid: int, direction: str) -> bool:
        """Target lane exists, no maneuver pending, no solid line crossed and,
        for traffic vehicles, the target lane serves their route."""
        cur = int(self.occ[vid])
        target = cur + (-1 if direction == "L" else 1)
        if not 1 <= target <= self.road.num_lanes or self.lc_steps[vid] > 0:
            return False
        turn_cur, turn_tgt = self.road.is_turn_lane(cur), self.road.is_turn_lane(target)
        if self.s[vid] >= self.road.mandatory_zone_start and turn_cur != turn_tgt:
            return False
        if not self.is_ego[vid] and turn_tgt != (self.route[vid] == RIGHT):
            return False
        return True

    def gaps_ok(self, vid: int, direction: str, g_lead: float, g_follow: float) -> bool:
        target = int(self.occ[vid]) + (-1 if direction == "L" else 1)
        n = self.n
        m = self._view("active") & (self._view("occ") == target)
        m[vid] = False
        if not m.any():
            return True
        ds = self.s[:n][m] - self.s[vid]
        L = self.idm.vehicle_length
        ahead = ds[ds > 0]
        behind = ds[ds <= 0]
        if ahead.size and ahead.min() - L < g_lead:
            return False
        if behind.size and -behind.max() - L < g_follow:
            return False
        return True

    def can_change_lane(self, vid: int, direction: str,
                        g_lead: Optional[float] = None, g_follow: Optional[float] = None) -> bool:
        g_lead = self.g_lead_min if g_lead is None else g_lead
        g_follow = self.g_follow_min if g_follow is None else g_follow
        return self.lane_change_allowed(vid, direction) and self.gaps_ok(vid, direction, g_lead, g_follow)

    # -- traffic behaviour ------------------------------------------------------

    def _spawn_entrance(self):
        sp = self.spawn
        if sp is None:
            return
        while self._entrance_times and self._entrance_times[0] <= self.time + 1e-12:
            lane = self.road.entrance_lane
            if not self.is_clear(lane, sp.entrance_s, sp.clearance):
                return
            self._entrance_times.pop(0)
            lo, hi = sp.lane_speed_range[min(lane, len(sp.lane_speed_range)) - 1]
            vd = float(self.rng.uniform(lo, hi))
            route = RIGHT if self.road.is_turn_lane(lane) else THROUGH
            self.add_vehicle(sp.entrance_s, min(sp.entrance_speed, vd), lane, vd, route)

    def _traffic_lane_changes(self):
        th = self.spawn.traffic_lc_threshold
        n = self.n
        cand = np.flatnonzero(self.active[:n] & ~self.is_ego[:n] &
                              (self.v[:n] < th) & (self.lc_steps[:n] == 0))
        for i in cand:
            opts = [d for d in ("L", "R") if self.can_change_lane(int(i), d)]
            if not opts:
                continue
            d = opts[0] if len(opts) == 1 else opts[int(self.rng.integers(2))]
            self.request_lane_change(int(i), d)

    # -- traces -------------------------------------------------------------------

    def trace_records(self) -> Iterator[dict]:
        for i in self.active_ids():
            yield {"time": round(self.time, 10), "id": int(i), "s": float(self.s[i]),
                   "v": float(self.v[i]), "l": int(self.lane[i])}

    def write_trace(self, fh):
        for rec in self.trace_records():
            fh.write(json.dumps(rec) + "\n")

    def state_bytes(self) -> bytes:
        n = self.n
        return b"".join(getattr(self, k)[:n].tobytes() for k in
                        ("s", "v", "lane", "occ", "v_des", "lc_steps", "active"))


def step_world(world: SimWorld) -> SimWorld:
    return world.step()


def make_world(road: RoadConfig = RoadConfig(), spawn: Optional[SpawnConfig] = SpawnConfig(),
               idm: IDMParams = IDMParams(), seed: int = 0, **kwargs) -> SimWorld:
    world = SimWorld(road, idm, rng_seed=seed, **kwargs)
    if spawn is not None:
        world.populate(spawn)
    return world
