"""Forward-process noise schedules.

Timesteps run ``1..T``. Every per-step array is stored with a leading
``t = 0`` entry (``beta = 0``, ``alpha = alpha_bar = 1``) so that
``schedule.alpha_bars[t]`` indexes directly by timestep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "make_cosine_schedule",
    "make_schedule",
    "q_sample",
    "epsilon_to_score",
    "score_to_epsilon",
    "epsilon_to_true_score",
    "remap_timestep",
    "remap_table",
]

COSINE_BETA_MAX = 0.999


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Immutable per-timestep ``beta``, ``alpha`` and cumulative ``alpha_bar``.

    Arrays have length ``T + 1``; index 0 holds the noise-free values.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars):
            arr.setflags(write=False)

    @classmethod
    def from_betas(cls, betas, kind, **params):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ValueError("every beta must lie in the open interval (0, 1)")
        T = betas.size
        full_betas = np.concatenate(([0.0], betas))
        alphas = 1.0 - full_betas
        alpha_bars = np.empty(T + 1)
        alpha_bars[0] = 1.0
        # one sequential accumulation; alpha_bars[t] == alpha_bars[t-1] * alphas[t] bitwise
        for t in range(1, T + 1):
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t]
        return cls(T=T, betas=full_betas, alphas=alphas, alpha_bars=alpha_bars, kind=kind, params=dict(params))

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if isinstance(t, (bool, np.bool_)) or int(t) != t:
            raise ValueError(f"timestep must be an integer, got {t!r}")
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_t(t)])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self.check_t(t, allow_zero=True)])

    def describe(self) -> dict:
        return {"kind": self.kind, "T": self.T, **self.params}

    def __repr__(self):
        extra = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
        return f"NoiseSchedule(kind={self.kind!r}, T={self.T}{', ' + extra if extra else ''})"


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule.from_betas(betas, "linear", beta_start=beta_start, beta_end=beta_end)


def cosine_profile(T: int, offset: float) -> np.ndarray:
    """Squared-cosine ``alpha_bar`` profile for ``t = 0..T``, normalized so entry 0 is 1."""
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + offset) / (1.0 + offset) * (math.pi / 2.0)) ** 2
    return f / f[0]


def make_cosine_schedule(T: int, offset: float = 0.008) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not offset > 0.0:
        raise ValueError(f"offset must be positive, got {offset!r}")
    profile = cosine_profile(int(T), offset)
    betas = np.minimum(1.0 - profile[1:] / profile[:-1], COSINE_BETA_MAX)
    return NoiseSchedule.from_betas(betas, "cosine", offset=offset)


def make_schedule(kind: str, T: int, **kwargs) -> NoiseSchedule:
    if kind == "linear":
        return make_linear_schedule(T, **kwargs)
    if kind == "cosine":
        return make_cosine_schedule(T, **kwargs)
    raise ValueError(f"unknown schedule kind {kind!r}")


def _as_state(x):
    return np.asarray(x, dtype=np.float64)


def q_sample(schedule: NoiseSchedule, z0, t: int, noise):
    """Draw from the forward marginal: ``sqrt(ab_t) * z0 + sqrt(1 - ab_t) * noise``."""
    z0, noise = _as_state(z0), _as_state(noise)
    if z0.shape != noise.shape:
        raise ValueError(f"z0 shape {z0.shape} does not match noise shape {noise.shape}")
    ab = schedule.alpha_bar(schedule.check_t(t))
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise


def _noise_scale(schedule: NoiseSchedule, t: int) -> float:
    ab = schedule.alpha_bar(schedule.check_t(t))
    if ab >= 1.0:
        raise ValueError(f"alpha_bar at t={t} is 1; epsilon and score are not related there")
    return math.sqrt(1.0 - ab)


def epsilon_to_score(eps, schedule: NoiseSchedule, t: int):
    """``eps / sqrt(1 - ab_t)``.

    This keeps the sign used by the sampler's step formula, i.e. it is the
    negative of the true gradient of the log density. Use
    :func:`epsilon_to_true_score` when comparing with finite differences.
    """
    return _as_state(eps) / _noise_scale(schedule, t)


def score_to_epsilon(score, schedule: NoiseSchedule, t: int):
    return _as_state(score) * _noise_scale(schedule, t)


def epsilon_to_true_score(eps, schedule: NoiseSchedule, t: int):
    """Gradient of the log of the diffused density implied by ``eps``."""
    return -epsilon_to_score(eps, schedule, t)


def remap_timestep(master: NoiseSchedule, expert_schedule: NoiseSchedule, t_master: int) -> int:
    """Expert timestep whose ``alpha_bar`` is nearest the master's at ``t_master``.

    Ties go to the smaller (less noisy) timestep.
    """
    target = master.alpha_bars[master.check_t(t_master)]
    diffs = np.abs(expert_schedule.alpha_bars[1:] - target)
    return int(np.argmin(diffs)) + 1


def remap_table(master: NoiseSchedule, expert_schedule: NoiseSchedule) -> np.ndarray:
    """``table[t]`` is :func:`remap_timestep` for every master ``t`` (entry 0 maps to 0)."""
    if expert_schedule is master:
        return np.arange(master.T + 1)
    table = np.zeros(master.T + 1, dtype=np.int64)
    for t in range(1, master.T + 1):
        table[t] = remap_timestep(master, expert_schedule, t)
    return table
