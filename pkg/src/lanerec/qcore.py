"""Adherence-aware tabular Q-learning and its value-iteration oracle.

``Q[x, u]`` is the value of *executing* ``u`` in ``x`` when, from the next
step on, the driver follows the greedy recommendation with probability
``theta`` and their baseline action otherwise. The backup therefore mixes a
max over next actions with the value of the baseline action at the next
state.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np

from lanerec._accel import USE_NUMBA, njit
from lanerec.adherence import AdherenceEstimator


@dataclass
class FiniteMDP:
    P: np.ndarray         # (S, A, S) transition probabilities
    R: np.ndarray         # (S, A) rewards
    baseline: np.ndarray  # (S,) baseline action per state
    gamma: float

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.baseline = np.asarray(self.baseline, dtype=np.int64)
        S, A = self.R.shape
        if self.P.shape != (S, A, S):
            raise ValueError(f"P has shape {self.P.shape}, expected {(S, A, S)}")
        if self.baseline.shape != (S,) or self.baseline.min() < 0 or self.baseline.max() >= A:
            raise ValueError("baseline must map every state to a valid action")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("P rows must be probability vectors")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def S(self) -> int:
        return self.R.shape[0]

    @property
    def A(self) -> int:
        return self.R.shape[1]


def load_mdp(path: Union[str, Path]) -> FiniteMDP:
    """Read the plain-text matrix format written by :func:`save_mdp`.

    Layout (``#`` starts a comment)::

        S <int>
        A <int>
        gamma <float>
        P          # S*A rows of S numbers, row index x*A + u
        ...
        R          # S rows of A numbers
        ...
        baseline   # one row of S integers
        ...
    """
    lines = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    head = {}
    i = 0
    while i < len(lines) and lines[i].split()[0] in ("S", "A", "gamma"):
        key, val = lines[i].split()
        head[key] = val
        i += 1
    S, A, gamma = int(head["S"]), int(head["A"]), float(head["gamma"])

    def block(name, nrows):
        nonlocal i
        if lines[i] != name:
            raise ValueError(f"expected section {name!r}, found {lines[i]!r}")
        rows = [[float(t) for t in ln.split()] for ln in lines[i + 1: i + 1 + nrows]]
        i += 1 + nrows
        return np.array(rows)

    P = block("P", S * A).reshape(S, A, S)
    R = block("R", S)
    base = block("baseline", 1).astype(np.int64).ravel()
    return FiniteMDP(P, R, base, gamma)


def save_mdp(mdp: FiniteMDP, path: Union[str, Path]):
    out = [f"S {mdp.S}", f"A {mdp.A}", f"gamma {mdp.gamma!r}", "P"]
    out += [" ".join(repr(float(p)) for p in row) for row in mdp.P.reshape(-1, mdp.S)]
    out.append("R")
    out += [" ".join(repr(float(r)) for r in row) for row in mdp.R]
    out += ["baseline", " ".join(str(int(b)) for b in mdp.baseline)]
    Path(path).write_text("\n".join(out) + "\n")


def _check_index(name, i, n):
    if not 0 <= i < n:
        raise IndexError(f"{name}={i} out of range [0, {n})")


def adherence_q_update(q: np.ndarray, x: int, u: int, r: float, x_next: int,
                       theta_hat: float, alpha: float, mdp: FiniteMDP) -> np.ndarray:
    """One sample backup on ``q[x, u]``, in place. Returns ``q``."""
    _check_index("x", x, mdp.S)
    _check_index("x_next", x_next, mdp.S)
    _check_index("u", u, mdp.A)
    g = mdp.gamma
    comply = r + g * q[x_next].max()
    defy = r + g * q[x_next, mdp.baseline[x_next]]
    q[x, u] = q[x, u] + alpha * (theta_hat * comply + (1.0 - theta_hat) * defy - q[x, u])
    return q


def adherence_bellman(mdp: FiniteMDP, q: np.ndarray, theta: float) -> np.ndarray:
    cont = theta * q.max(axis=1) + (1.0 - theta) * q[np.arange(mdp.S), mdp.baseline]
    return mdp.R + mdp.gamma * mdp.P @ cont


def adherence_value_iteration(mdp: FiniteMDP, theta: float, tol: float = 1e-10,
                              max_iter: int = 100_000) -> np.ndarray:
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must be in [0, 1]")
    q = np.zeros((mdp.S, mdp.A))
    for _ in range(max_iter):
        q_new = adherence_bellman(mdp, q, theta)
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    raise RuntimeError("value iteration did not converge")


def value_iteration(mdp: FiniteMDP, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Standard optimal-control value iteration (no baseline term)."""
    q = np.zeros((mdp.S, mdp.A))
    for _ in range(max_iter):
        v = q.max(axis=1)
        q_new = mdp.R + mdp.gamma * np.einsum("xus,s->xu", mdp.P, v)
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    raise RuntimeError("value iteration did not converge")


def baseline_policy_q(mdp: FiniteMDP) -> np.ndarray:
    """Q of the baseline policy by a direct linear solve."""
    S = mdp.S
    idx = np.arange(S)
    P_b = mdp.P[idx, mdp.baseline]           # (S, S)
    v = np.linalg.solve(np.eye(S) - mdp.gamma * P_b, mdp.R[idx, mdp.baseline])
    return mdp.R + mdp.gamma * mdp.P @ v


def greedy(q: np.ndarray) -> np.ndarray:
    """Row-wise argmax, lowest index on ties."""
    return np.argmax(q, axis=1)


# -- sampled training -------------------------------------------------------------

def _tabular_loop(Pcum, R, base, gamma, theta_true, alphas, eps_ep, starts, steps,
                  u_eps, a_rand, u_comp, u_trans, Q, counts):
    S = R.shape[0]
    A = R.shape[1]
    n = counts[0]
    succ = counts[1]
    t = 0
    for ep in range(starts.shape[0]):
        x = starts[ep]
        for _ in range(steps):
            if u_eps[t] < eps_ep[ep]:
                rec = a_rand[t]
            else:
                rec = 0
                for a in range(1, A):
                    if Q[x, a] > Q[x, rec]:
                        rec = a
            complied = u_comp[t] < theta_true
            u = rec if complied else base[x]
            n += 1
            if complied:
                succ += 1
            th = succ / n
            x2 = S - 1
            for j in range(S):
                if u_trans[t] < Pcum[x, u, j]:
                    x2 = j
                    break
            r = R[x, u]
            m = Q[x2, 0]
            for a in range(1, A):
                if Q[x2, a] > m:
                    m = Q[x2, a]
            comply = r + gamma * m
            defy = r + gamma * Q[x2, base[x2]]
            Q[x, u] = Q[x, u] + alphas[t] * (th * comply + (1.0 - th) * defy - Q[x, u])
            x = x2
            t += 1
    counts[0] = n
    counts[1] = succ


tabular_loop_py = _tabular_loop
tabular_loop_jit = njit(_tabular_loop)
tabular_loop = tabular_loop_jit if USE_NUMBA else tabular_loop_py


def harmonic_alpha(alpha0: float = 0.5, tau: float = 1e4) -> Callable[[np.ndarray], np.ndarray]:
    """alpha_t = alpha0 / (1 + t / tau)."""
    return lambda t: alpha0 / (1.0 + t / tau)


def train_tabular(mdp: FiniteMDP, theta_true: float, episodes: int,
                  alpha_schedule=harmonic_alpha(), epsilon_schedule=0.2, seed: int = 0,
                  steps_per_episode: int = 100, theta_init: float = 0.5, loop=None):
    """Epsilon-greedy recommendations, compliance sampled with ``theta_true``,
    adherence estimate updated every step and used in the backup.

    ``alpha_schedule`` maps global step indices to learning rates and
    ``epsilon_schedule`` maps episode indices to exploration rates; either
    may also be a constant. Returns ``(Q, AdherenceEstimator)``.
    """
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    total = episodes * steps_per_episode
    t = np.arange(total, dtype=float)
    alphas = np.broadcast_to(alpha_schedule(t) if callable(alpha_schedule)
                             else np.float64(alpha_schedule), (total,)).astype(float)
    e = np.arange(episodes, dtype=float)
    eps = np.broadcast_to(epsilon_schedule(e) if callable(epsilon_schedule)
                          else np.float64(epsilon_schedule), (episodes,)).astype(float)

    rng = np.random.default_rng(seed)
    starts = rng.integers(0, mdp.S, size=episodes)
    u_eps = rng.random(total)
    a_rand = rng.integers(0, mdp.A, size=total)
    u_comp = rng.random(total)
    u_trans = rng.random(total)
    Pcum = np.cumsum(mdp.P, axis=2)

    Q = np.zeros((mdp.S, mdp.A))
    counts = np.zeros(2, dtype=np.int64)
    (loop or tabular_loop)(Pcum, mdp.R, mdp.baseline, mdp.gamma, float(theta_true), alphas,
                           eps, starts, steps_per_episode, u_eps, a_rand, u_comp, u_trans,
                           Q, counts)
    est = AdherenceEstimator(theta_init, int(counts[0]), int(counts[1]))
    return Q, est
