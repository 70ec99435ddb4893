"""Training, evaluation and comparison runs.

Three policies are compared on identical traffic and compliance seeds:

``baseline``   the driver's own strategy, executed directly
``regular``    DQN trained with the plain greedy target, executed through the
               compliance model
``adherence``  DQN trained with the adherence-aware target, executed through
               the compliance model
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import stats

from lanerec.adherence import AdherenceEstimator, BaselinePolicy, ComplianceModel
from lanerec.config import RunConfig, dump_config
from lanerec.dqn import (
    MLPParams, TrainState, episode_seed, forward, load_checkpoint, save_checkpoint, train,
)
from lanerec.mdp_env import Action, LaneChangeEnv

log = logging.getLogger(__name__)

POLICIES = ("baseline", "regular", "adherence")
EVAL_STREAM = 1
CURVE_FIELDS = ("episode", "loss", "reward", "theta_hat", "epsilon")


@dataclass
class EpisodeResult:
    index: int
    seed: int
    records: list
    travel_time: float
    distance: float
    done_reason: str
    totals: dict

    @property
    def cumulative_reward(self) -> float:
        return self.totals["total"]

    @property
    def average_speed_kmh(self) -> float:
        return 3.6 * self.distance / self.travel_time


@dataclass
class MetricsRow:
    policy: str
    average_speed_kmh: float
    travel_time_s: float
    cumulative_reward: float
    speed_reward: float
    unnecessary_changing_cost: float
    safety_cost: float
    missing_changing_cost: float
    episodes: int
    stderr: dict = field(default_factory=dict)
    shift: float = 0.0

    COLUMNS = ("average_speed_kmh", "travel_time_s", "cumulative_reward", "speed_reward",
               "unnecessary_changing_cost", "safety_cost", "missing_changing_cost")


# -- episodes ------------------------------------------------------------------

def run_episode(cfg: RunConfig, policy: Optional[Callable], index: int, seed: int,
                theta_true: Optional[float] = None, estimator: Optional[AdherenceEstimator] = None,
                forced_actions: Optional[list] = None) -> EpisodeResult:
    """Roll out one episode.

    ``policy=None`` executes the baseline directly. Otherwise the policy's
    recommendation passes through the compliance model. Compliance and
    baseline RNGs derive from ``seed`` only, so policies evaluated on the
    same seed share their random numbers.
    """
    theta = cfg.eval.theta_true if theta_true is None else theta_true
    env = LaneChangeEnv(cfg.env)
    obs = env.reset(seed)
    s_comply, s_base = np.random.SeedSequence([seed, 0xC0]).spawn(2)
    compliance = ComplianceModel(theta, np.random.default_rng(s_comply))
    baseline = BaselinePolicy(cfg.baseline, np.random.default_rng(s_base))
    est = estimator if estimator is not None else AdherenceEstimator()
    sums = dict(speed_term=0.0, lane_cost=0.0, safety_cost=0.0, missing_cost=0.0,
                terminal_penalty=0.0, total=0.0)
    records = []
    step = 0
    while True:
        if forced_actions is not None and step >= len(forced_actions):
            break
        b = baseline(obs)
        if forced_actions is not None:
            rec, executed, complied = None, Action(forced_actions[step]), None
        elif policy is None:
            rec, executed, complied = None, b, None
        else:
            rec = policy(obs)
            executed, complied = compliance.sample_execution(rec, b)
            est.update(complied)
        ego = obs.ego
        res = env.step(executed)
        rb = res.reward
        for k in sums:
            sums[k] += getattr(rb, k)
        rec_row = {
            "episode": index, "seed": seed, "step": step, "time": obs.time,
            "s": ego.s, "v": ego.v, "l": ego.l,
            "recommended": None if rec is None else Action(rec).name,
            "executed": executed.name, "complied": complied,
            "reward": rb.as_dict(), "theta_hat": est.theta_hat,
        }
        if res.done:
            rec_row["done_reason"] = res.done_reason
        records.append(rec_row)
        step += 1
        obs = res.next_observation
        if res.done:
            break
    return EpisodeResult(index, seed, records, env.travel_time, env.distance,
                         env.done_reason, sums)


def eval_seeds(cfg: RunConfig, n: Optional[int] = None) -> list:
    n = cfg.eval.episodes if n is None else n
    return [episode_seed(cfg.eval.seed, i, EVAL_STREAM) for i in range(n)]


def make_policy(params: Optional[MLPParams]) -> Optional[Callable]:
    if params is None:
        return None
    return lambda obs: Action(int(np.argmax(forward(params, obs.vector))))


def evaluate(cfg: RunConfig, params: Optional[MLPParams], n: Optional[int] = None,
             theta_true: Optional[float] = None, theta_estimate: Optional[AdherenceEstimator] = None) -> list:
    """Evaluate greedily over the configured seeds; results ordered by episode index."""
    seeds = eval_seeds(cfg, n)
    if not seeds:
        raise ValueError("need at least one evaluation episode")
    policy = make_policy(params)

    def one(i):
        est = None
        if theta_estimate is not None:
            est = AdherenceEstimator(theta_estimate.theta_init, theta_estimate.n,
                                     theta_estimate.successes)
        return run_episode(cfg, policy, i, seeds[i], theta_true, est)

    if cfg.eval.workers > 1:
        with ThreadPoolExecutor(cfg.eval.workers) as pool:
            results = list(pool.map(one, range(len(seeds))))
    else:
        results = [one(i) for i in range(len(seeds))]
    return sorted(results, key=lambda r: r.index)


# -- metrics -----------------------------------------------------------------------

def _mean_se(x):
    x = np.asarray(x, dtype=float)
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")
    return float(x.mean()), se


def aggregate(policy: str, results: list, cfg: RunConfig, shift: float = 0.0) -> MetricsRow:
    w = cfg.env.weights
    cols = {
        "average_speed_kmh": [r.average_speed_kmh for r in results],
        "travel_time_s": [r.travel_time for r in results],
        "cumulative_reward": [r.totals["total"] + shift for r in results],
        "speed_reward": [-w.alpha1 * r.totals["speed_term"] + shift for r in results],
        "unnecessary_changing_cost": [-w.alpha2 * r.totals["lane_cost"] for r in results],
        "safety_cost": [-w.alpha3 * r.totals["safety_cost"] for r in results],
        "missing_changing_cost": [-w.alpha4 * r.totals["missing_cost"] for r in results],
    }
    means, ses = {}, {}
    for k, v in cols.items():
        means[k], ses[k] = _mean_se(v)
    return MetricsRow(policy, episodes=len(results), stderr=ses, shift=shift, **means)


def paired_test(a, b, n_resamples: int = 20000, seed: int = 0) -> dict:
    """One-sided paired tests of mean(a) > mean(b).

    Primary: sign-flip permutation test on the mean paired difference.
    Wilcoxon signed-rank is reported alongside.
    """
    d = np.asarray(a, float) - np.asarray(b, float)
    perm = stats.permutation_test((d,), np.mean, permutation_type="samples",
                                  alternative="greater", n_resamples=n_resamples,
                                  random_state=seed)
    wil = float("nan")
    if np.any(d != 0):
        with np.errstate(invalid="ignore", divide="ignore"):
            wil = float(stats.wilcoxon(d, alternative="greater").pvalue)
    return {"mean_diff": float(d.mean()), "p_permutation": float(perm.pvalue),
            "p_wilcoxon": wil, "n": int(d.size)}


def format_table(rows: list) -> str:
    labels = {
        "average_speed_kmh": "Average Speed (km/h)", "travel_time_s": "Travel Time (s)",
        "cumulative_reward": "Cumulative Reward", "speed_reward": "Speed Reward",
        "unnecessary_changing_cost": "Unnecessary-changing Cost",
        "safety_cost": "Safety Cost", "missing_changing_cost": "Missing-changing Cost",
    }
    shift = rows[0].shift if rows else 0.0
    width = 30
    head = f"{'Metric':<{width}}" + "".join(f"{r.policy:>20}" for r in rows)
    out = [head, "-" * len(head)]
    for col in MetricsRow.COLUMNS:
        label = labels[col]
        if shift and col in ("cumulative_reward", "speed_reward"):
            label += f" (shift {shift:+g})"
        cells = "".join(f"{getattr(r, col):>11.2f} ± {r.stderr[col]:<6.2f}" for r in rows)
        out.append(f"{label:<{width}}{cells}")
    out.append(f"{'Episodes':<{width}}" + "".join(f"{r.episodes:>20d}" for r in rows))
    return "\n".join(out)


def write_metrics_csv(path, rows: list):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["policy", *MetricsRow.COLUMNS, "episodes", "shift",
                     *[f"se_{c}" for c in MetricsRow.COLUMNS]])
        for r in rows:
            wr.writerow([r.policy, *[repr(getattr(r, c)) for c in MetricsRow.COLUMNS],
                         r.episodes, r.shift, *[repr(r.stderr[c]) for c in MetricsRow.COLUMNS]])


# -- logs --------------------------------------------------------------------------

def emit_episode_log(trace, path) -> Path:
    """Write one JSON record per decision step."""
    records = trace.records if isinstance(trace, EpisodeResult) else trace
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path


def read_episode_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay_log(cfg: RunConfig, path) -> tuple:
    """Re-simulate a logged episode with its executed actions forced.

    Returns ``(ok, first_mismatch_step_or_None)``; ok means every logged ego
    state and reward is reproduced exactly.
    """
    logged = read_episode_log(path)
    if not logged:
        raise ValueError(f"{path}: empty episode log")
    actions = [Action[r["executed"]] for r in logged]
    res = run_episode(cfg, None, logged[0]["episode"], logged[0]["seed"], forced_actions=actions)
    if len(res.records) != len(logged):
        return False, min(len(res.records), len(logged))
    keys = ("time", "s", "v", "l", "executed", "reward")
    for k, (a, b) in enumerate(zip(res.records, logged)):
        if any(a[key] != b[key] for key in keys):
            return False, k
    return True, None


def write_curves(path, curves: list, append: bool = False):
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        wr = csv.writer(fh)
        if new:
            wr.writerow(CURVE_FIELDS)
        for row in curves:
            wr.writerow([row["episode"], repr(row["loss"]), repr(row["reward"]),
                         repr(row["theta_hat"]), repr(row["epsilon"])])


def read_curves(path) -> dict:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in CURVE_FIELDS}


# -- runs --------------------------------------------------------------------------

def policy_dir(cfg: RunConfig, policy: str) -> Path:
    return Path(cfg.out_dir) / policy


def checkpoint_path(cfg: RunConfig, policy: str) -> Path:
    return policy_dir(cfg, policy) / "checkpoint.txt"


def run_train(cfg: RunConfig, policy: str = "adherence", resume: bool = False,
              episodes: Optional[int] = None) -> Path:
    if policy not in ("regular", "adherence"):
        raise ValueError("only 'regular' and 'adherence' policies are trained")
    tcfg = replace(cfg.train, target=policy)
    d = policy_dir(cfg, policy)
    d.mkdir(parents=True, exist_ok=True)
    ckpt = checkpoint_path(cfg, policy)
    state = None
    if resume and ckpt.exists():
        state, _ = load_checkpoint(ckpt)
    state = train(cfg.env, tcfg, cfg.baseline, state=state, episodes=episodes)
    save_checkpoint(ckpt, state, {"target": policy})
    write_curves(d / "curves.csv", state.curves, append=resume)
    (Path(cfg.out_dir) / "config.yaml").write_text(dump_config(cfg))
    return ckpt


def _load_params(cfg: RunConfig, policy: str):
    ckpt = checkpoint_path(cfg, policy)
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint for policy {policy!r}: {ckpt}")
    state, _ = load_checkpoint(ckpt)
    return state


def run_eval(cfg: RunConfig, policy: str, n: Optional[int] = None) -> tuple:
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    state = None if policy == "baseline" else _load_params(cfg, policy)
    results = evaluate(cfg, None if state is None else state.params, n,
                       theta_estimate=None if state is None else state.estimator)
    row = aggregate(policy, results, cfg, cfg.eval.reward_shift)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.eval.write_logs:
        for r in results:
            emit_episode_log(r, out / "episodes" / policy / f"episode_{r.index:04d}.jsonl")
    return row, results


def run_compare(cfg: RunConfig, n: Optional[int] = None) -> tuple:
    """Evaluate all three policies on paired seeds; trains missing agents when
    ``eval.train_if_missing`` is set. Writes metrics.csv, metrics.txt and
    stats.json into ``out_dir``."""
    n = cfg.eval.episodes if n is None else n
    if n <= 0:
        raise ValueError("need at least one evaluation episode")
    for policy in ("regular", "adherence"):
        if not checkpoint_path(cfg, policy).exists():
            if not cfg.eval.train_if_missing:
                raise FileNotFoundError(
                    f"missing checkpoint for policy {policy!r}: {checkpoint_path(cfg, policy)}")
            log.info("training %s agent", policy)
            run_train(cfg, policy)
    rows, results = [], {}
    for policy in POLICIES:
        row, res = run_eval(cfg, policy, n)
        rows.append(row)
        results[policy] = res
    reward = {p: [r.cumulative_reward for r in results[p]] for p in POLICIES}
    ttime = {p: np.array([r.travel_time for r in results[p]]) for p in POLICIES}
    summary = {
        "adherence_vs_regular": paired_test(reward["adherence"], reward["regular"]),
        "regular_vs_baseline": paired_test(reward["regular"], reward["baseline"]),
        "adherence_vs_baseline": paired_test(reward["adherence"], reward["baseline"]),
        "travel_time_reduction_vs_baseline": float(1.0 - ttime["adherence"].mean() / ttime["baseline"].mean()),
        "episodes": n,
    }
    out = Path(cfg.out_dir)
    write_metrics_csv(out / "metrics.csv", rows)
    (out / "metrics.txt").write_text(format_table(rows) + "\n")
    (out / "stats.json").write_text(json.dumps(summary, indent=2) + "\n")
    return rows, summary, results
