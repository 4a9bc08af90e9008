"""Three-stage time-varying angular perturbation schedule."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import OutOfRange

PI = math.pi


class Stage(enum.Enum):
    WIDE = "wide"
    ADAPTIVE = "adaptive"
    MICRO = "micro"


# Ablation variants of the schedule.  "three_stage" is the full mechanism.
MODES = ("three_stage", "two_stage", "fixed", "none")


@dataclass(frozen=True)
class ScheduleParams:
    """Stage parameters.  Angles in radians, times in rounds.

    ``mode`` selects an ablation variant: ``two_stage`` keeps the adaptive
    Gaussian past ``t2`` instead of switching to the truncated micro stage,
    ``fixed`` draws from one Gaussian of std ``fixed_sigma`` every round, and
    ``none`` disables perturbation.
    """

    sigma_max: float = 0.4 * PI
    sigma_min_mid: float = 0.1 * PI
    sigma_final: float = 0.05 * PI
    tau: float = 20.0
    eta: float = 0.1 * PI
    t1: float = 30.0
    t2: float = 70.0
    total_rounds: int = 100
    mode: str = "three_stage"
    fixed_sigma: float = 0.2 * PI

    def __post_init__(self):
        if not 0 < self.t1 < self.t2 < self.total_rounds:
            raise ValueError(f"need 0 < t1 < t2 < T, got {self.t1}, {self.t2}, {self.total_rounds}")
        if not 0 <= self.sigma_final <= self.sigma_min_mid <= self.sigma_max:
            raise ValueError("need 0 <= sigma_final <= sigma_min_mid <= sigma_max")
        if self.eta <= 0 or self.tau <= 0:
            raise ValueError("eta and tau must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown schedule mode {self.mode!r}")

    @classmethod
    def for_rounds(cls, total_rounds: int, **overrides) -> "ScheduleParams":
        """Defaults with tau, t1, t2 scaled to ``total_rounds`` (0.2T, 0.3T, 0.7T)."""
        base = dict(tau=0.2 * total_rounds, t1=0.3 * total_rounds, t2=0.7 * total_rounds,
                    total_rounds=total_rounds)
        base.update(overrides)
        return cls(**base)

    def with_mode(self, mode: str) -> "ScheduleParams":
        return replace(self, mode=mode)


@dataclass(frozen=True)
class AngularSample:
    dtheta: float
    stage: Stage
    sigma_t: float


def _check_t(params: ScheduleParams, t: float) -> None:
    if not 0 < t <= params.total_rounds:
        raise OutOfRange(f"round {t} outside (0, {params.total_rounds}]")


def stage_of(params: ScheduleParams, t: float) -> Stage:
    """Boundary rounds ``t1`` and ``t2`` belong to the earlier stage."""
    _check_t(params, t)
    if t <= params.t1:
        return Stage.WIDE
    if t <= params.t2:
        return Stage.ADAPTIVE
    return Stage.MICRO


def _three_stage_sigma(p: ScheduleParams, t: float) -> float:
    if t <= p.t1:
        return p.sigma_max * math.exp(-t / p.tau)
    if t <= p.t2:
        phase = math.pi * (t - p.t1) / (p.t2 - p.t1)
        return p.sigma_min_mid + 0.5 * (p.sigma_max - p.sigma_min_mid) * (1 + math.cos(phase))
    return p.sigma_final


def sigma_at(params: ScheduleParams, t: float) -> float:
    """Perturbation std at round ``t`` for the configured mode."""
    _check_t(params, t)
    if params.mode == "none":
        return 0.0
    if params.mode == "fixed":
        return params.fixed_sigma
    if params.mode == "two_stage" and t > params.t2:
        return params.sigma_min_mid
    return _three_stage_sigma(params, t)


def _truncated(params: ScheduleParams, t: float) -> bool:
    return params.mode == "three_stage" and t > params.t2


def truncated_normal(rng: np.random.Generator, sigma: float, bound: float, size: int) -> np.ndarray:
    """Zero-mean normal restricted to ``[-bound, bound]`` by rejection."""
    if sigma == 0:
        return np.zeros(size)
    out = np.empty(size)
    filled = 0
    while filled < size:
        draw = rng.normal(0.0, sigma, size=max(16, int(1.1 * (size - filled)) + 8))
        draw = draw[np.abs(draw) <= bound]
        take = min(len(draw), size - filled)
        out[filled:filled + take] = draw[:take]
        filled += take
    return out


def sample_many(params: ScheduleParams, t: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised draws of the round-``t`` perturbation."""
    sigma = sigma_at(params, t)
    if _truncated(params, t):
        return truncated_normal(rng, sigma, params.eta, size)
    if sigma == 0:
        return np.zeros(size)
    return rng.normal(0.0, sigma, size=size)


def stream(seed: int, t: int, client_id: int, purpose: int = 0) -> np.random.Generator:
    """Independent generator keyed by (master seed, round, client, purpose)."""
    return np.random.default_rng([int(seed), int(t), int(client_id), int(purpose)])


def sample_dtheta(params: ScheduleParams, t: int, seed: int, client_id: int = 0) -> AngularSample:
    """Draw one client's angular offset for round ``t``; deterministic in its keys."""
    stage = stage_of(params, t)
    dtheta = float(sample_many(params, t, 1, stream(seed, t, client_id))[0])
    # keep the draw usable as an IFS rotation
    dtheta = max(-PI, min(PI, dtheta))
    return AngularSample(dtheta, stage, sigma_at(params, t))
