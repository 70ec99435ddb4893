"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 and 8 share one full desk-scale training run (both agents, then
100 paired evaluation episodes) driven by ``configs/desk.yaml``.
"""

import dataclasses
import io
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lanerec import _kernels as K
from lanerec import harness
from lanerec.adherence import AdherenceEstimator
from lanerec.config import load_config
from lanerec.dqn import (
    Batch, MLPParams, Transition, forward, loss_and_gradients, target_value, targets,
)
from lanerec.mdp_env import OBS_DIM, Action, RewardWeights, cost_lane, cost_missing, cost_safe, reward
from lanerec.qcore import adherence_value_iteration, load_mdp, train_tabular, value_iteration
from lanerec.traffic_sim import IDMParams, VehicleState, car_following_accel, make_world

from test_mdp_env import make_obs, observations, weights
from test_traffic_sim import IDM_V10_DV5_GAP20, brute_neighbors, random_world

ROOT = Path(__file__).resolve().parents[1]
DATA = Path(__file__).parent / "data"


# 1 ---------------------------------------------------------------------------------

def test_c1_estimator_convergence(report):
    rng = np.random.default_rng(20240601)
    outcomes = (rng.random((100, 10_000)) < 0.5).tolist()
    t0 = time.perf_counter()
    traces = []
    for row in outcomes:
        est = AdherenceEstimator()
        upd = est.update
        seq = []
        push = seq.append
        for y in row:
            push(upd(y).theta_hat)
        traces.append(seq)
    elapsed = time.perf_counter() - t0

    ys = np.asarray(outcomes, dtype=float)
    exact = np.cumsum(ys, axis=1) / np.arange(1, ys.shape[1] + 1)
    bitwise = np.array_equal(np.asarray(traces), exact)
    close = np.mean(np.abs(exact[:, -1] - 0.5) <= 0.02)
    ok = bitwise and close >= 0.99 and elapsed < 1.0
    report("criterion 1", ok, f"within 0.02: {close:.0%}, bitwise exact: {bitwise}, "
                              f"time {elapsed:.2f}s")
    assert ok


# 2 ---------------------------------------------------------------------------------

def test_c2_tabular_oracle(report):
    mdp = load_mdp(DATA / "mdp5x3.txt")
    t0 = time.perf_counter()
    q, est = train_tabular(mdp, 0.5, episodes=2000, steps_per_episode=100, seed=0,
                           epsilon_schedule=0.3)
    elapsed = time.perf_counter() - t0
    q_star = adherence_value_iteration(mdp, 0.5, tol=1e-12)
    sup = float(np.abs(q - q_star).max())
    vi_gap = float(np.abs(adherence_value_iteration(mdp, 1.0, tol=1e-13)
                          - value_iteration(mdp, tol=1e-13)).max())
    ok = est.n == 200_000 and sup <= 5e-2 and vi_gap <= 1e-8 and elapsed < 30
    report("criterion 2", ok, f"sup error {sup:.4f}, theta=1 vs VI {vi_gap:.1e}, "
                              f"time {elapsed:.1f}s")
    assert ok


# 3 ---------------------------------------------------------------------------------

def test_c3_target_reductions(report):
    rng = np.random.default_rng(3)
    params = MLPParams.init(rng)
    gamma = 0.95
    items = [Transition(rng.normal(size=OBS_DIM), int(rng.integers(3)), int(rng.integers(3)),
                        int(rng.integers(3)), bool(rng.random() < 0.5), float(rng.normal() * 5),
                        rng.normal(size=OBS_DIM), False) for _ in range(1000)]
    exact1 = exact0 = True
    worst = 0.0
    for t in items:
        qn = forward(params, t.next_obs)
        exact1 &= target_value(t, params, 1.0, gamma) == t.reward + gamma * qn.max()
        exact0 &= target_value(t, params, 0.0, gamma) == t.reward + gamma * qn[t.baseline_next]
        y0, y1 = target_value(t, params, 0.0, gamma), target_value(t, params, 1.0, gamma)
        for th in (0.25, 0.5, 0.8):
            worst = max(worst, abs(target_value(t, params, th, gamma) - (th * y1 + (1 - th) * y0)))
    batch = Batch.stack(items)
    qn = forward(params, batch.next_obs)
    exact1 &= np.array_equal(targets(params, batch, 1.0, gamma), batch.reward + gamma * qn.max(axis=1))
    ok = bool(exact1 and exact0 and worst <= 1e-12)
    report("criterion 3", ok, f"theta=1 exact {exact1}, theta=0 exact {exact0}, "
                              f"affinity error {worst:.1e}")
    assert ok


# 4 ---------------------------------------------------------------------------------

def _fd(params, batch, y, h=1e-5):
    out = []
    for arr in params.arrays():
        g = np.empty_like(arr)
        flat, gf = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss_and_gradients(params, batch, 0.5, 0.95, y=y)[0]
            flat[i] = old - h
            lm = loss_and_gradients(params, batch, 0.5, 0.95, y=y)[0]
            flat[i] = old
            gf[i] = (lp - lm) / (2 * h)
        out.append(g)
    return out


def _batch_near_kink(params, batch, h):
    # a single-parameter step of size h moves pre[b, j] by at most h * max(1, |x_b|_inf);
    # central differences straddling a ReLU kink do not estimate the gradient
    pre = batch.obs @ params.W1.T + params.b1
    reach = 2 * h * np.maximum(1.0, np.abs(batch.obs).max(axis=1, keepdims=True))
    return bool(np.any(np.abs(pre) <= reach))


def test_c4_gradients(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    checked = redrawn = 0
    while checked < 20:
        params = MLPParams.init(rng)
        batch = Batch.stack([Transition(rng.normal(size=OBS_DIM), int(rng.integers(3)), 0,
                                        int(rng.integers(3)), True, float(rng.normal()),
                                        rng.normal(size=OBS_DIM), bool(rng.random() < 0.2))
                             for _ in range(32)])
        if _batch_near_kink(params, batch, 1e-5):
            redrawn += 1
            continue
        checked += 1
        y = targets(params, batch, 0.5, 0.95)
        _, g = loss_and_gradients(params, batch, 0.5, 0.95, y=y)
        for a, n in zip(g.arrays(), _fd(params, batch, y)):
            denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
            worst = max(worst, float(np.linalg.norm(a - n) / denom))
    ok = worst <= 1e-4
    report("criterion 4", ok, f"max relative error {worst:.2e} over 20 batches of 32 "
                              f"({redrawn} redrawn: pre-activation within step of a ReLU kink)")
    assert ok


# 5 ---------------------------------------------------------------------------------

def test_c5_simulator_sanity(report, tmp_path):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        s, occ, active = random_world(rng, int(rng.integers(1, 51)))
        ego = int(rng.choice(np.flatnonzero(active)))
        expect = brute_neighbors(s, occ, active, ego, 4)
        mismatches += list(K.neighbors(s, occ, active, ego, 4)) != expect

    cfg = load_config(None)
    params = MLPParams.init(np.random.default_rng(0))
    pol = harness.make_policy(params)
    logs = [harness.emit_episode_log(harness.run_episode(cfg, pol, 0, 99), tmp_path / f"{k}.jsonl")
            for k in range(2)]
    same_log = logs[0].read_bytes() == logs[1].read_bytes()
    traces = []
    for _ in range(2):
        w, buf = make_world(seed=42), io.StringIO()
        for _ in range(200):
            w.step()
            w.write_trace(buf)
        traces.append(buf.getvalue())
    same_trace = traces[0] == traces[1]

    idm = IDMParams()
    vd = 55 / 3.6
    free = car_following_accel(VehicleState(0, 0, vd, 1, vd), None, idm) == 0.0
    stand = car_following_accel(VehicleState(0, 0, 0.0, 1, vd), None, idm) == idm.a_max
    pinned = car_following_accel(VehicleState(0, 0, 10.0, 1, vd),
                                 VehicleState(1, 20 + idm.vehicle_length, 5.0, 1, vd), idm)
    idm_ok = free and stand and abs(pinned - IDM_V10_DV5_GAP20) <= 1e-12
    ok = mismatches == 0 and same_log and same_trace and idm_ok
    report("criterion 5", ok, f"neighbor mismatches {mismatches}/1000, logs byte-equal "
                              f"{same_log and same_trace}, IDM examples {idm_ok}")
    assert ok


# 6 ---------------------------------------------------------------------------------

_C6 = {"cases": 0}


@settings(max_examples=500, deadline=None)
@given(observations(), st.sampled_from(list(Action)), weights, st.integers(0, 4))
def _reward_properties(obs, action, w, k):
    assert cost_lane(obs, Action.K, w) == 0
    miss = cost_missing(obs, action, w, obs.avail_left, obs.avail_right)
    slow = obs.ego.v < min(obs.lane_speeds)
    if not (action == Action.K and slow and (obs.avail_left or obs.avail_right)):
        assert miss == 0
    c = cost_safe(obs, w)
    assert 0 <= c <= 5
    fewer = make_obs(obs.ego.v, obs.ego.s, nbs=[
        None if (j == k or not obs.real[j]) else (obs.nb_s[j], obs.nb_v[j]) for j in range(5)])
    assert cost_safe(fewer, w) <= c
    r = reward(obs, action, w)
    assert r.total == -(w.alpha1 * r.speed_term + w.alpha2 * r.lane_cost
                        + w.alpha3 * r.safety_cost + w.alpha4 * r.missing_cost)
    _C6["cases"] += 1


def test_c6_reward_semantics(report):
    try:
        _reward_properties()
        ok, detail = True, f"{_C6['cases']} generated cases"
    except AssertionError as exc:
        ok, detail = False, f"counterexample: {exc}"
    report("criterion 6", ok, detail)
    assert ok


# 7 and 8 ----------------------------------------------------------------------------------

DESK = ROOT / "configs" / "desk.yaml"


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    cfg = load_config(DESK)
    cfg = dataclasses.replace(cfg, out_dir=str(tmp_path_factory.mktemp("desk")),
                              eval=dataclasses.replace(cfg.eval, write_logs=False))
    t0 = time.perf_counter()
    rows, summary, _ = harness.run_compare(cfg)
    return cfg, rows, summary, time.perf_counter() - t0


@pytest.mark.slow
def test_c7_end_to_end(report, desk_run):
    cfg, rows, summary, elapsed = desk_run
    by = {r.policy: r for r in rows}
    p_ar = summary["adherence_vs_regular"]["p_permutation"]
    p_rb = summary["regular_vs_baseline"]["p_permutation"]
    red = summary["travel_time_reduction_vs_baseline"]
    order = (by["adherence"].cumulative_reward > by["regular"].cumulative_reward
             > by["baseline"].cumulative_reward)
    ok = (summary["episodes"] == 100 and order and p_ar < 0.05 and p_rb < 0.05
          and red >= 0.05 and elapsed <= 1800)
    report("criterion 7", ok,
           f"reward A {by['adherence'].cumulative_reward:.1f} / R {by['regular'].cumulative_reward:.1f}"
           f" / B {by['baseline'].cumulative_reward:.1f}, p(A>R) {p_ar:.4f}, p(R>B) {p_rb:.1e}, "
           f"travel time -{red:.1%}, time {elapsed / 60:.1f} min")
    assert ok


def smoothed_slope(x, window=50, frac=0.1):
    """Least-squares slope of the moving average over the final ``frac`` of episodes."""
    x = np.asarray(x, dtype=float)
    ma = np.convolve(x, np.ones(window) / window, mode="valid")
    tail = ma[-max(2, int(round(frac * x.size))):]
    return float(np.polyfit(np.arange(tail.size), tail, 1)[0])


@pytest.mark.slow
def test_c8_training_stability(report, desk_run):
    cfg = desk_run[0]
    curves = harness.read_curves(harness.policy_dir(cfg, "adherence") / "curves.csv")
    loss_slope = smoothed_slope(curves["loss"])
    reward_slope = smoothed_slope(curves["reward"])
    ok = loss_slope <= 0 and reward_slope >= 0
    report("criterion 8", ok, f"adherence agent: loss slope {loss_slope:.2e}, "
                              f"reward slope {reward_slope:.2e} per episode")
    assert ok
