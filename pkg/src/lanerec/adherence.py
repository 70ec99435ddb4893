"""Human compliance model.

The driver executes the recommendation with probability ``theta`` and falls
back to their own baseline action otherwise. The learner never sees
``theta``; it tracks the empirical compliance frequency instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from lanerec.mdp_env import Action


@dataclass(slots=True)
class AdherenceEstimator:
    """Running compliance frequency.

    ``theta_hat`` is always stored as ``successes / n`` (the incremental update
    ``(theta_hat * n + y) / (n + 1)`` evaluated in exact counts), so no
    rounding drift accumulates.
    """

    theta_init: float = 0.5
    n: int = 0
    successes: int = 0
    theta_hat: float = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.theta_init <= 1.0:
            raise ValueError("theta_init must be in [0, 1]")
        if not 0 <= self.successes <= self.n:
            raise ValueError("need 0 <= successes <= n")
        self.theta_hat = self.successes / self.n if self.n else self.theta_init

    def update(self, complied: bool) -> "AdherenceEstimator":
        n = self.n + 1
        k = self.successes + (1 if complied else 0)
        self.n, self.successes, self.theta_hat = n, k, k / n
        return self


def update_theta(est: AdherenceEstimator, complied: bool) -> AdherenceEstimator:
    return est.update(complied)


@dataclass
class ComplianceModel:
    theta_true: float = 0.5
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __post_init__(self):
        if not 0.0 <= self.theta_true <= 1.0:
            raise ValueError("theta_true must be in [0, 1]")

    def sample_execution(self, recommended, baseline) -> tuple:
        """Return ``(executed, complied)``. ``complied`` is the Bernoulli draw,
        so it can be False even when both actions coincide."""
        complied = bool(self.rng.random() < self.theta_true)
        return (Action(recommended) if complied else Action(baseline)), complied


def sample_execution(model: ComplianceModel, recommended, baseline) -> tuple:
    return model.sample_execution(recommended, baseline)


@dataclass(frozen=True)
class BaselineConfig:
    v_baseline_th: float = 5.0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.v_baseline_th <= 0:
            raise ValueError("v_baseline_th must be positive")


def baseline_action(obs, avail_L: bool, avail_R: bool, cfg: BaselineConfig,
                    rng: np.random.Generator) -> Action:
    """Keep lane unless slowed below the threshold, then move to an available
    adjacent lane (fair coin when both are available)."""
    if obs.ego.v >= cfg.v_baseline_th:
        return Action.K
    if avail_L and avail_R:
        return Action.L if rng.random() < 0.5 else Action.R
    if avail_L:
        return Action.L
    if avail_R:
        return Action.R
    return Action.K


class BaselinePolicy:
    """The driver's own strategy with its private RNG."""

    def __init__(self, cfg: BaselineConfig = BaselineConfig(), rng=None):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)

    def __call__(self, obs) -> Action:
        return baseline_action(obs, obs.avail_left, obs.avail_right, self.cfg, self.rng)
