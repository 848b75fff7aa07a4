"""Reverse-process drivers: ancestral DDPM and deterministic DDIM.

Randomness is per chain. Chain ``m`` of a run seeded with ``seed`` draws
from ``PCG64(SeedSequence(seed, spawn_key=(m,)))``: first its initial state,
then (ancestral only) one noise vector per step from ``t = T`` down to
``t = 2``. Chains are processed in fixed-size blocks, so results do not
depend on how many worker threads run the blocks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .compose import CompositionSpec, ExpertBundle, compose_epsilon
from .schedule import NoiseSchedule

__all__ = [
    "SamplerConfig",
    "SampleBatch",
    "ddpm_step",
    "ddim_step",
    "ddim_timesteps",
    "chain_rng",
    "initial_states",
    "sample",
]

CHAIN_BLOCK = 1024
SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ancestral"
    num_steps: int | None = None
    seed: int = 0
    sigma_convention: str = "sigma"
    record_trajectory: bool = False

    def __post_init__(self):
        if self.kind not in ("ancestral", "ddim"):
            raise ValueError(f"sampler kind must be 'ancestral' or 'ddim', got {self.kind!r}")
        if self.sigma_convention not in ("sigma", "sigma_squared"):
            raise ValueError(f"sigma_convention must be 'sigma' or 'sigma_squared', got {self.sigma_convention!r}")
        if self.num_steps is not None and (int(self.num_steps) != self.num_steps or self.num_steps < 1):
            raise ValueError(f"num_steps must be a positive integer, got {self.num_steps!r}")
        if int(self.seed) != self.seed or not 0 <= self.seed <= SEED_MASK:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")

    def steps_for(self, schedule: NoiseSchedule) -> np.ndarray:
        """Timesteps visited, in decreasing order."""
        n = schedule.T if self.num_steps is None else int(self.num_steps)
        if n > schedule.T:
            raise ValueError(f"num_steps {n} exceeds schedule length {schedule.T}")
        if self.kind == "ancestral":
            if n != schedule.T:
                raise ValueError("ancestral sampling visits every timestep; num_steps must equal T")
            return np.arange(schedule.T, 0, -1)
        return ddim_timesteps(schedule.T, n)[::-1]


@dataclass
class SampleBatch:
    states: np.ndarray
    seed: int
    trajectory: np.ndarray | None = None
    trajectory_t: np.ndarray | None = None

    @property
    def dim(self):
        return self.states.shape[1]

    def __len__(self):
        return self.states.shape[0]


def ddim_timesteps(T: int, n: int) -> np.ndarray:
    """``n`` strictly increasing timesteps in ``1..T`` with uniform stride, ending at ``T``."""
    if not 1 <= n <= T:
        raise ValueError(f"need 1 <= n <= T, got n={n}, T={T}")
    steps = np.round(np.linspace(T, T / n, n)).astype(np.int64)[::-1]
    if len(np.unique(steps)) != n or steps[0] < 1 or steps[-1] != T:
        raise AssertionError(f"bad DDIM sub-sequence {steps}")
    return steps


def _noise_scale(schedule, t, convention):
    if t <= 1:
        return 0.0
    beta = schedule.betas[t]
    return math.sqrt(beta) if convention == "sigma" else beta


def ddpm_step(z_t, eps_c, schedule: NoiseSchedule, t: int, noise=None, sigma_convention="sigma"):
    """One ancestral step ``(z - beta_t / sqrt(1 - ab_t) * eps) / sqrt(1 - beta_t) + sigma_t * noise``.

    ``sigma_t = sqrt(beta_t)`` by default; ``sigma_convention="sigma_squared"``
    scales the noise by ``beta_t`` instead. No noise is added at ``t = 1``.
    """
    t = schedule.check_t(t)
    z = np.asarray(z_t, dtype=np.float64)
    eps = np.asarray(eps_c, dtype=np.float64)
    if z.shape != eps.shape or (noise is not None and np.shape(noise) != z.shape):
        raise ValueError("state, epsilon and noise must share a shape")
    scale = _noise_scale(schedule, t, sigma_convention)
    if noise is None:
        scale = 0.0
    single = z.ndim == 1
    z2, e2 = np.atleast_2d(z), np.atleast_2d(eps)
    n2 = None if noise is None else np.atleast_2d(noise)
    out = kernels.ddpm_step(z2, e2, schedule.betas[t], schedule.alpha_bars[t], scale, n2)
    return out[0] if single else out


def ddim_step(z_t, eps_c, schedule: NoiseSchedule, t: int, t_prev: int):
    """Deterministic DDIM update from ``t`` to ``t_prev`` (``t_prev = 0`` is clean data)."""
    t = schedule.check_t(t)
    t_prev = schedule.check_t(t_prev, allow_zero=True)
    if not t_prev < t:
        raise ValueError(f"DDIM needs t_prev < t, got t={t}, t_prev={t_prev}")
    z = np.asarray(z_t, dtype=np.float64)
    eps = np.asarray(eps_c, dtype=np.float64)
    if z.shape != eps.shape:
        raise ValueError("state and epsilon must share a shape")
    single = z.ndim == 1
    out = kernels.ddim_step(np.atleast_2d(z), np.atleast_2d(eps), schedule.alpha_bars[t], schedule.alpha_bars[t_prev])
    return out[0] if single else out


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & SEED_MASK, spawn_key=(int(chain),))))


def _block_draws(seed, start, stop, dim, n_noise):
    """Initial states ``(B, d)`` and per-step noise ``(n_noise, B, d)`` for chains ``start..stop-1``."""
    b = stop - start
    init = np.empty((b, dim))
    noise = np.empty((n_noise, b, dim))
    for k, m in enumerate(range(start, stop)):
        rng = chain_rng(seed, m)
        init[k] = rng.standard_normal(dim)
        if n_noise:
            noise[:, k, :] = rng.standard_normal((n_noise, dim))
    return init, noise


def initial_states(seed: int, chains: int, dim: int) -> np.ndarray:
    return _block_draws(seed, 0, chains, dim, 0)[0]


def _run_block(bundle, spec, schedule, config, steps, start, stop, record):
    ancestral = config.kind == "ancestral"
    n_noise = len(steps) - 1 if ancestral else 0
    z, noise = _block_draws(config.seed, start, stop, bundle.dim, n_noise)
    traj = [z[0].copy()] if record else None
    for k, t in enumerate(steps):
        t = int(t)
        eps = compose_epsilon(bundle, spec, z, t)
        if ancestral:
            scale = _noise_scale(schedule, t, config.sigma_convention)
            z = kernels.ddpm_step(z, eps, schedule.betas[t], schedule.alpha_bars[t], scale, noise[k] if scale else None)
        else:
            t_prev = int(steps[k + 1]) if k + 1 < len(steps) else 0
            z = kernels.ddim_step(z, eps, schedule.alpha_bars[t], schedule.alpha_bars[t_prev])
        if record:
            traj.append(z[0].copy())
    return z, (np.array(traj) if record else None)


def sample(
    bundle: ExpertBundle,
    spec: CompositionSpec,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    chains: int,
    workers: int = 1,
) -> SampleBatch:
    """Run ``chains`` independent reverse chains and return their ``t = 0`` states.

    ``schedule`` must be the bundle's master schedule. ``workers > 1`` runs
    chain blocks on a thread pool; output is identical to ``workers = 1``.
    """
    if chains < 1:
        raise ValueError(f"need at least one chain, got {chains}")
    if schedule is not bundle.master:
        raise ValueError("the sampler's schedule must be the bundle's master schedule")
    if spec.N != bundle.N:
        raise ValueError(f"composition has {spec.N} entries but bundle has {bundle.N} experts")
    steps = config.steps_for(schedule)
    blocks = [(s, min(s + CHAIN_BLOCK, chains)) for s in range(0, chains, CHAIN_BLOCK)]

    def job(i):
        start, stop = blocks[i]
        return _run_block(bundle, spec, schedule, config, steps, start, stop, config.record_trajectory and i == 0)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(len(blocks))))
    else:
        results = [job(i) for i in range(len(blocks))]
    states = np.concatenate([r[0] for r in results], axis=0)
    traj = results[0][1]
    traj_t = np.concatenate((steps, [0])) if traj is not None else None
    return SampleBatch(states=states, seed=config.seed, trajectory=traj, trajectory_t=traj_t)
