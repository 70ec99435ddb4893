"""Lane-change recommendation MDP on top of :mod:`lanerec.traffic_sim`.

The state is the ego vehicle plus its five key neighbors, the action set is
{L, R, K}, and the per-step reward penalises deviation from the desired
speed, unnecessary lane changes, short time headways and missed lane-change
opportunities.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from lanerec.traffic_sim import (
    IDMParams, NeighborSet, RoadConfig, SimWorld, SpawnConfig, VehicleState, make_world,
)


class Action(enum.IntEnum):
    L = 0
    R = 1
    K = 2


ACTIONS = (Action.L, Action.R, Action.K)
OBS_DIM = 18


@dataclass(frozen=True)
class RewardWeights:
    alpha1: float = 1.0
    alpha2: float = 5.0
    alpha3: float = 5.0
    alpha4: float = 5.0
    v_des: Optional[float] = None  # None -> road speed limit
    v_th1: float = 8.0
    delta_v_min: float = 1.0
    t_th: float = 1.5
    eps_v: float = 0.1

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "alpha4"):
            if getattr(self, name) < 0:
                raise ValueError(f"reward weight {name} must be >= 0")
        if self.t_th <= 0:
            raise ValueError("t_th must be positive")
        if self.eps_v < 0:
            raise ValueError("eps_v must be >= 0")


@dataclass
class RewardBreakdown:
    speed_term: float
    lane_cost: float
    safety_cost: float
    missing_cost: float
    total: float
    # collision penalty on the terminal step; 0 otherwise
    terminal_penalty: float = 0.0

    def as_dict(self) -> dict:
        return {"speed_term": self.speed_term, "lane_cost": self.lane_cost,
                "safety_cost": self.safety_cost, "missing_cost": self.missing_cost,
                "terminal_penalty": self.terminal_penalty, "total": self.total}


@dataclass
class Observation:
    """Ego state, five neighbor entries (virtual where missing) and the
    lane-level quantities the reward needs.

    Neighbor arrays follow slot order ego_leader, left_leader, left_follower,
    right_leader, right_follower. ``real[k]`` is False for virtual vehicles.
    """

    ego: VehicleState
    nb_s: np.ndarray
    nb_v: np.ndarray
    nb_l: np.ndarray
    real: np.ndarray
    lane_speeds: tuple  # (left, keep, right)
    avail_left: bool
    avail_right: bool
    vector: np.ndarray
    time: float = 0.0

    @property
    def avail(self) -> tuple:
        return self.avail_left, self.avail_right


@dataclass
class StepResult:
    next_observation: Observation
    reward: RewardBreakdown
    done: bool
    done_reason: Optional[str] = None
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EnvConfig:
    road: RoadConfig = RoadConfig()
    spawn: SpawnConfig = SpawnConfig()
    idm: IDMParams = IDMParams()
    weights: RewardWeights = RewardWeights()
    dt: float = 0.1
    lane_change_duration: float = 2.0
    decision_period: float = 1.0
    max_steps: int = 120
    d_virtual: float = 100.0
    g_lead_min: float = 5.0
    g_follow_min: float = 5.0
    collision_penalty: float = 50.0

    def __post_init__(self):
        if self.dt <= 0 or self.decision_period < self.dt:
            raise ValueError("need 0 < dt <= decision_period")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.d_virtual <= 0:
            raise ValueError("d_virtual must be positive")
        if self.weights.v_th1 >= self.road.speed_limit:
            raise ValueError("v_th1 must be below the speed limit")

    @property
    def v_des(self) -> float:
        w = self.weights.v_des
        return self.road.speed_limit if w is None else w


# -- reward terms ------------------------------------------------------------

def time_headway(ego, other, eps_v: float = 0.1) -> float:
    """|ds / dv| between two vehicles; +inf when the relative speed is below eps_v."""
    dv = ego.v - other.v
    if abs(dv) < eps_v:
        return math.inf
    return abs((ego.s - other.s) / dv)


def cost_lane(obs: Observation, action, weights: RewardWeights) -> int:
    if Action(action) == Action.K:
        return 0
    ve = obs.ego.v
    if ve > weights.v_th1 or ve - obs.nb_v[0] < weights.delta_v_min:
        return 1
    return 0


def cost_safe(obs: Observation, weights: RewardWeights) -> int:
    count = 0
    for k in range(5):
        if not obs.real[k]:
            continue
        other = VehicleState(-1, float(obs.nb_s[k]), float(obs.nb_v[k]), int(obs.nb_l[k]), 1.0)
        if time_headway(obs.ego, other, weights.eps_v) < weights.t_th:
            count += 1
    return count


def cost_missing(obs: Observation, action, weights: RewardWeights,
                 lane_change_available_L: bool, lane_change_available_R: bool) -> int:
    if Action(action) != Action.K:
        return 0
    if not (lane_change_available_L or lane_change_available_R):
        return 0
    return int(obs.ego.v < min(obs.lane_speeds))


def reward(obs: Observation, action, weights: RewardWeights,
           v_des: Optional[float] = None) -> RewardBreakdown:
    v_des = weights.v_des if v_des is None else v_des
    if v_des is None:
        raise ValueError("desired speed not set")
    speed = abs(obs.ego.v - v_des)
    lane = cost_lane(obs, action, weights)
    safe = cost_safe(obs, weights)
    miss = cost_missing(obs, action, weights, obs.avail_left, obs.avail_right)
    total = -(weights.alpha1 * speed + weights.alpha2 * lane
              + weights.alpha3 * safe + weights.alpha4 * miss)
    return RewardBreakdown(speed, lane, safe, miss, total)


# -- observation -----------------------------------------------------------------

def lane_change_available(world: SimWorld, ego_id: int, direction, cfg: EnvConfig = None) -> bool:
    name = direction.name if isinstance(direction, Action) else direction
    if cfg is None:
        return world.can_change_lane(ego_id, name)
    return world.can_change_lane(ego_id, name, cfg.g_lead_min, cfg.g_follow_min)


def build_observation(world: SimWorld, ego_id: int, cfg: EnvConfig = EnvConfig(),
                      neighbors: Optional[NeighborSet] = None) -> Observation:
    nbs = world.find_neighbors(ego_id) if neighbors is None else neighbors
    road = world.road
    ego = nbs.ego
    lanes = (ego.l, ego.l - 1, ego.l - 1, ego.l + 1, ego.l + 1)
    ahead = (True, True, False, True, False)
    nb_s = np.empty(5)
    nb_v = np.empty(5)
    nb_l = np.empty(5, dtype=np.int64)
    real = np.zeros(5, dtype=bool)
    for k, veh in enumerate(nbs.slots()):
        if veh is None:
            nb_s[k] = ego.s + (cfg.d_virtual if ahead[k] else -cfg.d_virtual)
            nb_v[k] = ego.v
            nb_l[k] = min(max(lanes[k], 1), road.num_lanes)
        else:
            nb_s[k], nb_v[k], nb_l[k] = veh.s, veh.v, veh.l
            real[k] = True
    speeds = tuple(world.lane_mean_speed(lane, nbs) for lane in (ego.l - 1, ego.l, ego.l + 1))
    if world.active[ego_id]:
        avail_l = lane_change_available(world, ego_id, "L", cfg)
        avail_r = lane_change_available(world, ego_id, "R", cfg)
    else:
        avail_l = avail_r = False

    vmax, L = road.speed_limit, road.num_lanes
    vec = np.empty(OBS_DIM)
    vec[0], vec[1], vec[2] = ego.s / road.road_length, ego.v / vmax, ego.l / L
    vec[3::3] = (nb_s - ego.s) / cfg.d_virtual
    vec[4::3] = nb_v / vmax
    vec[5::3] = nb_l / L
    return Observation(ego, nb_s, nb_v, nb_l, real, speeds, avail_l, avail_r, vec, world.time)


# -- environment -----------------------------------------------------------------

class EpisodeFinished(RuntimeError):
    pass


class LaneChangeEnv:
    """Single-ego episodic environment. ``step`` takes the action the driver
    actually executes; lane changes that are not available are not performed."""

    EGO = 0

    def __init__(self, cfg: EnvConfig = EnvConfig()):
        self.cfg = cfg
        self.world: Optional[SimWorld] = None
        self.obs: Optional[Observation] = None
        self.done = True
        self.steps = 0
        self.seed = None
        self._sub = int(round(cfg.decision_period / cfg.dt))

    def reset(self, seed: int = 0) -> Observation:
        c = self.cfg
        self.seed = seed
        self.world = make_world(c.road, c.spawn, c.idm, seed=seed, dt=c.dt,
                                lane_change_duration=c.lane_change_duration,
                                g_lead_min=c.g_lead_min, g_follow_min=c.g_follow_min)
        self.start_s = float(self.world.s[self.EGO])
        self.steps = 0
        self.done = False
        self.done_reason = None
        self.obs = build_observation(self.world, self.EGO, c)
        return self.obs

    def _ego_collision(self) -> Optional[int]:
        w = self.world
        n = w.n
        m = w.active[:n] & (w.occ[:n] == w.occ[self.EGO])
        m[self.EGO] = False
        hit = np.flatnonzero(m & (np.abs(w.s[:n] - w.s[self.EGO]) < w.idm.vehicle_length))
        return int(hit[0]) if hit.size else None

    def step(self, executed_action) -> StepResult:
        if self.done:
            raise EpisodeFinished("episode finished; call reset()")
        action = Action(executed_action)
        obs = self.obs
        w = self.world
        performed = False
        if action != Action.K and (obs.avail_left if action == Action.L else obs.avail_right):
            performed = w.request_lane_change(self.EGO, action.name)
        rb = reward(obs, action, self.cfg.weights, self.cfg.v_des)

        reason = None
        for _ in range(self._sub):
            w.step()
            if not w.active[self.EGO]:
                reason = "arrived"
                break
            if self._ego_collision() is not None:
                reason = "collision"
                break
        self.steps += 1
        if reason == "collision":
            rb.terminal_penalty = self.cfg.collision_penalty
            rb.total -= self.cfg.collision_penalty
        if reason is None and self.steps >= self.cfg.max_steps:
            reason = "max_steps"
        self.done = reason is not None
        self.done_reason = reason
        self.obs = build_observation(w, self.EGO, self.cfg)
        return StepResult(self.obs, rb, self.done, reason,
                          {"performed": performed, "time": w.time})

    # -- episode summary ------------------------------------------------------

    @property
    def travel_time(self) -> float:
        return self.world.arrivals.get(self.EGO, self.world.time)

    @property
    def distance(self) -> float:
        return float(self.world.s[self.EGO]) - self.start_s

    @property
    def ego_lane(self) -> int:
        return int(self.world.occ[self.EGO])


def reset(cfg: EnvConfig, seed: int):
    """Functional form: returns ``(env, observation)``."""
    env = LaneChangeEnv(cfg)
    return env, env.reset(seed)
