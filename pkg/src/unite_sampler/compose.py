"""Combining several experts' epsilon predictions into one.

Each expert ``i`` contributes a conditional prediction ``eps_i(z, x_i, t)``
and an unconditional one ``eps_i(z, NULL, t)``. The unconditional
predictions are blended with reliability factors ``a`` (convex weights), and
the conditional ones are weighted by ``w``::

    eps_c = sum_i w_i eps_i(x_i) - (sum_i w_i - 1) * sum_j a_j eps_j(NULL)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .experts import NULL, parse_condition
from .schedule import NoiseSchedule, remap_table

__all__ = [
    "SpecViolation",
    "CompositionSpec",
    "BundleEntry",
    "ExpertBundle",
    "unconditional_blend",
    "compose_epsilon",
    "compose_epsilon_gpoe",
    "classifier_free_epsilon",
    "compose_from_predictions",
    "gpoe_from_predictions",
]

SUM_TOL = 1e-12


class SpecViolation(ValueError):
    """A composition parameter breaks one of its constraints."""


@dataclass(frozen=True)
class CompositionSpec:
    a: tuple
    w: tuple
    allow_weak_weights: bool = False

    def __post_init__(self):
        a = tuple(float(v) for v in np.atleast_1d(self.a))
        w = tuple(float(v) for v in np.atleast_1d(self.w))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "w", w)
        if len(a) == 0 or len(a) != len(w):
            raise SpecViolation(f"need one reliability factor and one weight per expert, got {len(a)} and {len(w)}")
        if not all(math.isfinite(v) for v in a + w):
            raise SpecViolation("reliability factors and weights must be finite")
        if any(v < 0 for v in a):
            raise SpecViolation(f"reliability factors a_i must be >= 0, got {list(a)}")
        if abs(math.fsum(a) - 1.0) > SUM_TOL:
            raise SpecViolation(
                f"reliability factors must sum to 1 (sum a_i = 1 keeps the blended unconditional "
                f"density variance-preserving); got sum {math.fsum(a)!r}"
            )
        if not self.allow_weak_weights and any(v < 1 for v in w):
            raise SpecViolation(f"condition weights must satisfy w_i >= 1, got {list(w)}; set allow_weak_weights to explore w < 1")
        if self.allow_weak_weights and any(v < 0 for v in w):
            raise SpecViolation(f"condition weights must be non-negative, got {list(w)}")

    @property
    def N(self):
        return len(self.a)

    @classmethod
    def uniform(cls, n, w=1.0):
        return cls(a=(1.0 / n,) * n, w=(w,) * n)


@dataclass(frozen=True)
class BundleEntry:
    expert: object
    condition: object
    schedule: NoiseSchedule | None = None


@dataclass(frozen=True, eq=False)
class ExpertBundle:
    """Experts with their conditions, evaluated against one master schedule.

    An entry with its own schedule is queried at the timestep whose
    ``alpha_bar`` is nearest the master's.
    """

    entries: tuple
    master: NoiseSchedule
    _remaps: tuple = field(init=False, repr=False)

    def __post_init__(self):
        entries = tuple(
            e if isinstance(e, BundleEntry) else BundleEntry(*e) for e in self.entries
        )
        entries = tuple(BundleEntry(e.expert, parse_condition(e.condition), e.schedule) for e in entries)
        if not entries:
            raise ValueError("a bundle needs at least one expert")
        dims = {e.expert.dim for e in entries}
        if len(dims) != 1:
            raise ValueError(f"experts disagree in state dimension: {sorted(dims)}")
        object.__setattr__(self, "entries", entries)
        remaps = tuple(
            None if e.schedule is None or e.schedule is self.master else remap_table(self.master, e.schedule)
            for e in entries
        )
        object.__setattr__(self, "_remaps", remaps)

    @property
    def N(self):
        return len(self.entries)

    @property
    def dim(self):
        return self.entries[0].expert.dim

    def local_time(self, i, t):
        """(schedule, timestep) at which entry ``i`` is queried for master step ``t``."""
        remap = self._remaps[i]
        if remap is None:
            return self.master, t
        return self.entries[i].schedule, int(remap[t])

    def conditional(self, i, z, t):
        sched, tl = self.local_time(i, t)
        e = self.entries[i]
        return e.expert.epsilon(z, e.condition, tl, sched)

    def unconditional(self, i, z, t):
        sched, tl = self.local_time(i, t)
        return self.entries[i].expert.epsilon(z, NULL, tl, sched)


def _batch(z, dim):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.ndim != 2 or z2.shape[1] != dim:
        raise ValueError(f"state has shape {z.shape}, bundle dimension is {dim}")
    return z2, single


def _check(bundle, a, t):
    if len(a) != bundle.N:
        raise SpecViolation(f"composition has {len(a)} entries but bundle has {bundle.N} experts")
    return bundle.master.check_t(t)


def unconditional_blend(bundle: ExpertBundle, a, z_t, t):
    """``sum_j a_j eps_j(z, NULL, t)``; experts with ``a_j == 0`` are not queried."""
    a = np.asarray(a, dtype=np.float64)
    t = _check(bundle, a, t)
    z2, single = _batch(z_t, bundle.dim)
    preds = np.zeros((bundle.N,) + z2.shape)
    for j in range(bundle.N):
        if a[j] != 0.0:
            preds[j] = bundle.unconditional(j, z2, t)
    out = kernels.weighted_sum(preds, a)
    return out[0] if single else out


def compose_from_predictions(cond_eps, uncond_eps, a, w):
    """Weighted composition from precomputed predictions, each ``(N, ...)``.

    This is the arithmetic core of :func:`compose_epsilon`.
    """
    cond_eps = np.asarray(cond_eps, dtype=np.float64)
    uncond_eps = np.asarray(uncond_eps, dtype=np.float64)
    shape = cond_eps.shape[1:]
    n = cond_eps.shape[0]
    c2 = cond_eps.reshape(n, 1, -1)
    u2 = uncond_eps.reshape(n, 1, -1)
    a = np.asarray(a, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    blend_coef = math.fsum(w) - 1.0
    blend = kernels.weighted_sum(u2, a) if blend_coef != 0.0 else np.zeros(c2.shape[1:])
    return kernels.compose_combine(c2, w, blend, blend_coef).reshape(shape)


def compose_epsilon(bundle: ExpertBundle, spec: CompositionSpec, z_t, t):
    """Composite epsilon for the bundle under ``spec`` at master step ``t``.

    Unconditional queries are skipped when the blend's coefficient
    ``sum(w) - 1`` is zero or the expert's reliability factor is zero.
    """
    t = _check(bundle, spec.a, t)
    z2, single = _batch(z_t, bundle.dim)
    w = np.asarray(spec.w)
    a = np.asarray(spec.a)
    cond = np.stack([bundle.conditional(i, z2, t) for i in range(bundle.N)])
    blend_coef = math.fsum(spec.w) - 1.0
    if blend_coef != 0.0:
        blend = unconditional_blend(bundle, a, z2, t)
    else:
        blend = np.zeros_like(z2)
    out = kernels.compose_combine(cond, w, blend, blend_coef)
    return out[0] if single else out


def gpoe_from_predictions(cond_eps, uncond_eps, a, beta):
    """Generalized product-of-experts form, evaluated term by term:
    ``sum_i a_i u_i + sum_i beta_i (c_i - sum_j a_j u_j)``.
    """
    cond_eps = np.asarray(cond_eps, dtype=np.float64)
    uncond_eps = np.asarray(uncond_eps, dtype=np.float64)
    blend = np.zeros(cond_eps.shape[1:])
    for j in range(len(a)):
        blend = blend + a[j] * uncond_eps[j]
    out = blend.copy()
    for i in range(len(beta)):
        out = out + beta[i] * (cond_eps[i] - blend)
    return out


def compose_epsilon_gpoe(bundle: ExpertBundle, a, beta_exponents, z_t, t):
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    beta = np.atleast_1d(np.asarray(beta_exponents, dtype=np.float64))
    t = _check(bundle, a, t)
    if len(beta) != bundle.N:
        raise SpecViolation(f"need {bundle.N} exponents, got {len(beta)}")
    if np.any(a < 0) or abs(math.fsum(a) - 1.0) > SUM_TOL:
        raise SpecViolation(f"reliability factors must be non-negative and sum to 1, got {a.tolist()}")
    if np.any(beta <= 0):
        raise SpecViolation(f"exponents must be positive, got {beta.tolist()}")
    z2, single = _batch(z_t, bundle.dim)
    cond = np.stack([bundle.conditional(i, z2, t) for i in range(bundle.N)])
    uncond = np.stack([bundle.unconditional(j, z2, t) for j in range(bundle.N)])
    out = gpoe_from_predictions(cond, uncond, a, beta)
    return out[0] if single else out


def classifier_free_epsilon(expert, z_t, cond, t, w, schedule):
    """Guided epsilon ``(1 + w) eps(z, c) - w eps(z, NULL)`` for a single expert."""
    if w < 0:
        raise SpecViolation(f"guidance scale must be >= 0, got {w}")
    cond = parse_condition(cond)
    ec = np.asarray(expert.epsilon(z_t, cond, t, schedule))
    if w == 0:
        return ec
    eu = np.asarray(expert.epsilon(z_t, NULL, t, schedule))
    return (1.0 + w) * ec - w * eu
