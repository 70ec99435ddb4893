"""Adherence-aware deep Q network.

A one-hidden-layer ReLU network maps the 18-dim observation to one value per
executed action. Targets mix the greedy bootstrap (driver complies next
step) and the baseline-action bootstrap (driver does not), weighted by the
running compliance estimate. With ``target="regular"`` the mix is pinned to
the greedy bootstrap, which is the ordinary DQN target.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from lanerec.adherence import AdherenceEstimator, BaselineConfig, BaselinePolicy, ComplianceModel
from lanerec.mdp_env import ACTIONS, OBS_DIM, Action, EnvConfig, LaneChangeEnv

log = logging.getLogger(__name__)

N_ACTIONS = len(ACTIONS)
PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class MLPParams:
    W1: np.ndarray  # (hidden, n_in)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (n_out, hidden)
    b2: np.ndarray  # (n_out,)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int = OBS_DIM, hidden: int = 128,
             n_out: int = N_ACTIONS) -> "MLPParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        k1, k2 = 1.0 / math.sqrt(n_in), 1.0 / math.sqrt(hidden)
        return cls(rng.uniform(-k1, k1, (hidden, n_in)), rng.uniform(-k1, k1, hidden),
                   rng.uniform(-k2, k2, (n_out, hidden)), rng.uniform(-k2, k2, n_out))

    @classmethod
    def zeros(cls, n_in: int = OBS_DIM, hidden: int = 128, n_out: int = N_ACTIONS):
        return cls(np.zeros((hidden, n_in)), np.zeros(hidden), np.zeros((n_out, hidden)),
                   np.zeros(n_out))

    def arrays(self) -> tuple:
        return self.W1, self.b1, self.W2, self.b2

    def copy(self) -> "MLPParams":
        return MLPParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "MLPParams":
        return MLPParams(*(np.zeros_like(a) for a in self.arrays()))

    def allclose(self, other: "MLPParams", **kw) -> bool:
        return all(np.allclose(a, b, **kw) for a, b in zip(self.arrays(), other.arrays()))


def _hidden(params: MLPParams, x: np.ndarray):
    pre = x @ params.W1.T + params.b1
    return pre, np.maximum(pre, 0.0)


def forward(params: MLPParams, x: np.ndarray) -> np.ndarray:
    """Q-values, shape (3,) for a single observation or (B, 3) for a batch."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    _, h = _hidden(params, x)
    return h @ params.W2.T + params.b2


# -- replay ----------------------------------------------------------------------

@dataclass
class Transition:
    obs: np.ndarray
    executed: int
    recommended: int
    baseline_next: int
    complied: bool
    reward: float
    next_obs: np.ndarray
    done: bool


class Batch(NamedTuple):
    obs: np.ndarray
    executed: np.ndarray
    recommended: np.ndarray
    baseline_next: np.ndarray
    complied: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    @classmethod
    def stack(cls, items: Sequence[Transition]) -> "Batch":
        if len(items) == 0:
            raise ValueError("empty batch")
        return cls(np.stack([t.obs for t in items]).astype(float),
                   np.array([int(t.executed) for t in items], dtype=np.int64),
                   np.array([int(t.recommended) for t in items], dtype=np.int64),
                   np.array([int(t.baseline_next) for t in items], dtype=np.int64),
                   np.array([t.complied for t in items], dtype=bool),
                   np.array([t.reward for t in items], dtype=float),
                   np.stack([t.next_obs for t in items]).astype(float),
                   np.array([t.done for t in items], dtype=bool))

    def __len__(self):
        return self.reward.shape[0]


def as_batch(batch: Union[Batch, Sequence[Transition]]) -> Batch:
    return batch if isinstance(batch, Batch) else Batch.stack(batch)


class ReplayBuffer:
    """Ring buffer of transitions stored column-wise."""

    def __init__(self, capacity: int = 50_000, obs_dim: int = OBS_DIM, rng=None):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng()
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.executed = np.zeros(capacity, dtype=np.int64)
        self.recommended = np.zeros(capacity, dtype=np.int64)
        self.baseline_next = np.zeros(capacity, dtype=np.int64)
        self.complied = np.zeros(capacity, dtype=bool)
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, t: Transition):
        i = self._next
        self.obs[i] = t.obs
        self.next_obs[i] = t.next_obs
        self.executed[i] = int(t.executed)
        self.recommended[i] = int(t.recommended)
        self.baseline_next[i] = int(t.baseline_next)
        self.complied[i] = t.complied
        self.reward[i] = t.reward
        self.done[i] = t.done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(self.obs[idx], self.executed[idx], self.recommended[idx],
                     self.baseline_next[idx], self.complied[idx], self.reward[idx],
                     self.next_obs[idx], self.done[idx])

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if batch_size > self.size:
            raise ValueError("not enough transitions stored")
        return self.rng.choice(self.size, size=batch_size, replace=False)

    def sample(self, batch_size: int) -> Batch:
        return self.take(self.sample_indices(batch_size))


# -- targets, loss, gradients ----------------------------------------------------------

def targets(params: MLPParams, batch: Batch, theta_hat: float, gamma: float) -> np.ndarray:
    q_next = forward(params, batch.next_obs)
    comply = batch.reward + gamma * q_next.max(axis=1)
    defy = batch.reward + gamma * q_next[np.arange(len(batch)), batch.baseline_next]
    y = theta_hat * comply + (1.0 - theta_hat) * defy
    return np.where(batch.done, batch.reward, y)


def target_value(item: Transition, params: MLPParams, theta_hat: float, gamma: float) -> float:
    """Adherence-aware target for one transition; ``r`` alone when terminal."""
    if item.done:
        return float(item.reward)
    q_next = forward(params, item.next_obs)
    comply = item.reward + gamma * q_next.max()
    defy = item.reward + gamma * q_next[int(item.baseline_next)]
    return float(theta_hat * comply + (1.0 - theta_hat) * defy)


def loss_and_gradients(params: MLPParams, batch, theta_hat: float, gamma: float,
                       target_params: Optional[MLPParams] = None, y: Optional[np.ndarray] = None):
    """Mean squared TD error over the batch and its gradient.

    Targets are constants (semi-gradient); only the executed-action output
    of each item receives gradient. ``target_params`` defaults to ``params``.
    """
    batch = as_batch(batch)
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    if y is None:
        y = targets(params if target_params is None else target_params, batch, theta_hat, gamma)
    pre, h = _hidden(params, batch.obs)
    q = h @ params.W2.T + params.b2
    rows = np.arange(B)
    err = y - q[rows, batch.executed]
    loss = float(np.mean(err * err))

    dq = np.zeros_like(q)
    dq[rows, batch.executed] = -2.0 * err / B
    dW2 = dq.T @ h
    db2 = dq.sum(axis=0)
    dpre = (dq @ params.W2) * (pre > 0.0)
    dW1 = dpre.T @ batch.obs
    db1 = dpre.sum(axis=0)
    return loss, MLPParams(dW1, db1, dW2, db2)


def sgd_step(params: MLPParams, grads: MLPParams, lr: float) -> MLPParams:
    out = []
    for name, p, g in zip(PARAM_NAMES, params.arrays(), grads.arrays()):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {g.shape}")
        out.append(p - lr * g)
    return MLPParams(*out)


class Adam:
    def __init__(self, params: MLPParams, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: MLPParams, grads: MLPParams) -> MLPParams:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for p, g, m, v in zip(params.arrays(), grads.arrays(), self.m.arrays(), self.v.arrays()):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            out.append(p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return MLPParams(*out)


class SGD:
    def __init__(self, params: MLPParams, lr: float, momentum: float = 0.0):
        self.lr, self.momentum = lr, momentum
        self.buf = params.zeros_like() if momentum else None

    def step(self, params: MLPParams, grads: MLPParams) -> MLPParams:
        if self.buf is None:
            return sgd_step(params, grads, self.lr)
        for b, g in zip(self.buf.arrays(), grads.arrays()):
            b *= self.momentum
            b += g
        return sgd_step(params, self.buf, self.lr)


# -- exploration ------------------------------------------------------------------------

@dataclass
class EpsilonSchedule:
    eps_max: float = 1.0
    decay: float = 0.995
    eps_min: float = 0.001
    k: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eps_min <= self.eps_max <= 1.0:
            raise ValueError("need 0 <= eps_min <= eps_max <= 1")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")

    def value(self, k: Optional[int] = None) -> float:
        k = self.k if k is None else k
        return max(self.eps_min, self.eps_max * self.decay ** k)

    @property
    def current(self) -> float:
        return self.value()

    def advance(self):
        self.k += 1


def select_recommendation(params: MLPParams, obs, epsilon: Union[float, EpsilonSchedule],
                          rng: np.random.Generator) -> Action:
    eps = epsilon.current if isinstance(epsilon, EpsilonSchedule) else float(epsilon)
    if eps > 0.0 and rng.random() < eps:
        return Action(int(rng.integers(N_ACTIONS)))
    x = obs.vector if hasattr(obs, "vector") else obs
    return Action(int(np.argmax(forward(params, x))))


# -- training ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Defaults are the reference hyperparameters; ``optimizer``,
    ``reward_scale`` and ``updates_per_step`` are desk-scale knobs."""

    learning_rate: float = 1e-6
    gamma: float = 0.95
    eps_min: float = 0.001
    eps_max: float = 1.0
    eps_decay: float = 0.995
    hidden: int = 128
    batch_size: int = 32
    episodes: int = 3000
    buffer_capacity: int = 50_000
    theta_true: float = 0.5
    theta_init: float = 0.5
    seed: int = 0
    optimizer: str = "sgd"        # sgd | momentum | adam
    momentum: float = 0.9
    reward_scale: float = 1.0
    updates_per_step: float = 1.0
    target_network: bool = False
    target: str = "adherence"     # adherence | regular

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.eps_min <= self.eps_max <= 1.0:
            raise ValueError("need 0 <= eps_min <= eps_max <= 1")
        if not 0.0 < self.eps_decay < 1.0:
            raise ValueError("eps_decay must lie in (0, 1)")
        if self.hidden <= 0 or self.batch_size <= 0 or self.episodes < 0:
            raise ValueError("hidden, batch_size must be positive, episodes >= 0")
        if not 0.0 <= self.theta_true <= 1.0:
            raise ValueError("theta_true must be in [0, 1]")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.target not in ("adherence", "regular"):
            raise ValueError(f"unknown target {self.target!r}")
        if self.reward_scale <= 0 or self.updates_per_step <= 0:
            raise ValueError("reward_scale and updates_per_step must be positive")


@dataclass
class TrainState:
    """Everything needed to resume training."""

    params: MLPParams
    estimator: AdherenceEstimator
    episode: int = 0
    curves: list = field(default_factory=list)


def make_optimizer(cfg: TrainConfig, params: MLPParams):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate)
    if cfg.optimizer == "momentum":
        return SGD(params, cfg.learning_rate, cfg.momentum)
    return SGD(params, cfg.learning_rate)


def episode_seed(seed: int, episode: int, stream: int = 0) -> int:
    """Deterministic per-episode seed; streams separate training and evaluation."""
    return int(np.random.SeedSequence([seed, stream, episode]).generate_state(1)[0])


def train(env_cfg: EnvConfig, cfg: TrainConfig, baseline_cfg: BaselineConfig = BaselineConfig(),
          state: Optional[TrainState] = None, episodes: Optional[int] = None,
          callback: Optional[Callable] = None) -> TrainState:
    """Online training against :class:`LaneChangeEnv`.

    Per decision step: recommend (epsilon-greedy), sample execution, step,
    store, update the compliance estimate. After each episode: one minibatch
    update per decision step of that episode. Passing ``state`` resumes;
    curves are appended.
    """
    episodes = cfg.episodes if episodes is None else episodes
    root = np.random.SeedSequence([cfg.seed, 0xD0])
    s_init, s_explore, s_replay, s_comply, s_base = root.spawn(5)
    if state is None:
        state = TrainState(MLPParams.init(np.random.default_rng(s_init), hidden=cfg.hidden),
                           AdherenceEstimator(cfg.theta_init))
    start = state.episode
    # resumed runs get fresh streams keyed on the start episode
    key = [start]
    explore_rng = np.random.default_rng([*s_explore.generate_state(2), *key])
    replay_rng = np.random.default_rng([*s_replay.generate_state(2), *key])
    compliance = ComplianceModel(cfg.theta_true, np.random.default_rng([*s_comply.generate_state(2), *key]))
    baseline = BaselinePolicy(baseline_cfg, np.random.default_rng([*s_base.generate_state(2), *key]))
    buffer = ReplayBuffer(cfg.buffer_capacity, rng=replay_rng)
    schedule = EpsilonSchedule(cfg.eps_max, cfg.eps_decay, cfg.eps_min, k=start)
    opt = make_optimizer(cfg, state.params)
    env = LaneChangeEnv(env_cfg)
    params, est = state.params, state.estimator
    regular = cfg.target == "regular"

    for ep in range(start, start + episodes):
        obs = env.reset(episode_seed(cfg.seed, ep))
        eps = schedule.current
        b = baseline(obs)
        ep_reward = 0.0
        steps = 0
        while True:
            rec = select_recommendation(params, obs.vector, eps, explore_rng)
            executed, complied = compliance.sample_execution(rec, b)
            est.update(complied)
            res = env.step(executed)
            nxt = res.next_observation
            b_next = baseline(nxt) if not res.done else Action.K
            buffer.add(Transition(obs.vector, executed, rec, b_next, complied,
                                  res.reward.total * cfg.reward_scale, nxt.vector, res.done))
            ep_reward += res.reward.total
            steps += 1
            obs, b = nxt, b_next
            if res.done:
                break

        losses = []
        if len(buffer) >= cfg.batch_size:
            theta = 1.0 if regular else est.theta_hat
            frozen = params.copy() if cfg.target_network else None
            for _ in range(max(1, int(round(steps * cfg.updates_per_step)))):
                batch = buffer.sample(cfg.batch_size)
                loss, grads = loss_and_gradients(params, batch, theta, cfg.gamma, frozen)
                params = opt.step(params, grads)
                losses.append(loss)
        row = {"episode": ep, "loss": float(np.mean(losses)) if losses else float("nan"),
               "reward": ep_reward, "theta_hat": est.theta_hat, "epsilon": eps,
               "steps": steps, "travel_time": env.travel_time}
        state.curves.append(row)
        schedule.advance()
        state.params = params
        state.episode = ep + 1
        if callback is not None:
            callback(state, row)
        if ep % 100 == 0:
            log.info("episode %d reward %.1f loss %.4g theta_hat %.4f eps %.4f",
                     ep, ep_reward, row["loss"], est.theta_hat, eps)
    return state


def greedy_policy(params: MLPParams) -> Callable:
    return lambda obs: Action(int(np.argmax(forward(params, obs.vector))))


# -- checkpoints --------------------------------------------------------------------------

CKPT_MAGIC = "lanerec-checkpoint v1"


def save_checkpoint(path, state: TrainState, meta: Optional[dict] = None):
    """Text tensor dump. Each tensor: ``tensor <name> <ndim> <shape...>``
    followed by its values in row-major order, one row per line. Scalars
    follow as ``meta <key> <value>`` lines."""
    lines = [CKPT_MAGIC]
    for name, arr in zip(PARAM_NAMES, state.params.arrays()):
        lines.append(f"tensor {name} {arr.ndim} " + " ".join(map(str, arr.shape)))
        rows = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
        lines += [" ".join(repr(float(x)) for x in row) for row in rows]
    est = state.estimator
    info = {"episode": state.episode, "n": est.n, "successes": est.successes,
            "theta_init": est.theta_init}
    info.update(meta or {})
    lines += [f"meta {k} {v}" for k, v in info.items()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple:
    """Returns ``(TrainState, meta)``; curves are not stored in checkpoints."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    tensors, meta = {}, {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if parts[0] == "tensor":
            name, ndim = parts[1], int(parts[2])
            shape = tuple(int(p) for p in parts[3:3 + ndim])
            nrows = shape[0] if ndim > 1 else 1
            vals = [float(x) for ln in lines[i + 1:i + 1 + nrows] for x in ln.split()]
            tensors[name] = np.array(vals).reshape(shape)
            i += 1 + nrows
        elif parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
            i += 1
        else:
            raise ValueError(f"{path}:{i + 1}: unexpected line {lines[i][:40]!r}")
    params = MLPParams(*(tensors[n] for n in PARAM_NAMES))
    est = AdherenceEstimator(float(meta.pop("theta_init", 0.5)), int(meta.pop("n", 0)),
                             int(meta.pop("successes", 0)))
    return TrainState(params, est, int(meta.pop("episode", 0))), meta
