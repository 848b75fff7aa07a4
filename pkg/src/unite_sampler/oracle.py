"""Brute-force ground truth on 1-D and 2-D grids.

Densities are tabulated at cell centres and stored as normalized cell
masses. Nothing here touches the sampler, so these routines can check it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridSpec",
    "GridDensity",
    "OracleError",
    "NoOverlapError",
    "diffused_marginal_density",
    "blend_unconditional",
    "product_density",
    "tv_distance",
    "histogram",
    "moments",
    "entropy",
]

MIN_BINS = 16
FLOOR = 1e-300
LOG_FLOOR = math.log(FLOOR)


class OracleError(ValueError):
    pass


class NoOverlapError(OracleError):
    """The product of the conditionals vanishes on every cell."""


@dataclass(frozen=True)
class GridSpec:
    bounds: tuple  # ((lo, hi), ...) per axis
    bins: tuple

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        bins = tuple(int(b) for b in self.bins)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "bins", bins)
        if len(bounds) != len(bins) or not 1 <= len(bins) <= 2:
            raise OracleError("grids have one or two axes, with one bin count per axis")
        if any(b < MIN_BINS for b in bins):
            raise OracleError(f"grid too coarse: need at least {MIN_BINS} bins per axis, got {list(bins)}")
        if any(not hi > lo for lo, hi in bounds):
            raise OracleError(f"axis bounds must be increasing, got {list(bounds)}")

    @property
    def ndim(self):
        return len(self.bins)

    def edges(self, axis):
        lo, hi = self.bounds[axis]
        return np.linspace(lo, hi, self.bins[axis] + 1)

    def centers(self, axis):
        e = self.edges(axis)
        return 0.5 * (e[:-1] + e[1:])

    def points(self):
        """Cell centres as ``(n_cells, ndim)`` in row-major cell order (last axis fastest)."""
        mesh = np.meshgrid(*[self.centers(k) for k in range(self.ndim)], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @classmethod
    def around(cls, mean, std, half_width=4.0, bins=64):
        mean = np.atleast_1d(mean)
        std = np.atleast_1d(std)
        return cls(tuple((m - half_width * s, m + half_width * s) for m, s in zip(mean, std)), (bins,) * mean.size)


@dataclass(frozen=True, eq=False)
class GridDensity:
    grid: GridSpec
    mass: np.ndarray  # shape == grid.bins
    out_of_range: int = 0
    zeroed_cells: int = 0

    def __post_init__(self):
        if self.mass.shape != self.grid.bins:
            raise OracleError(f"mass shape {self.mass.shape} does not match grid {self.grid.bins}")
        self.mass.setflags(write=False)

    @classmethod
    def from_log(cls, grid, logp, **info):
        logp = np.asarray(logp, dtype=np.float64).reshape(grid.bins)
        finite = np.isfinite(logp)
        if not finite.any():
            raise NoOverlapError("density vanishes on every grid cell")
        mass = np.zeros(grid.bins)
        mass[finite] = np.exp(logp[finite] - logp[finite].max())
        return cls(grid, mass / mass.sum(), **info)

    def mean(self):
        pts = self.grid.points()
        return self.mass.ravel() @ pts

    def covariance(self):
        pts = self.grid.points()
        c = pts - self.mean()
        return (c * self.mass.ravel()[:, None]).T @ c

    def tiny_cells(self, threshold=1e-15):
        return int(np.count_nonzero(self.mass < threshold))

    def to_csv(self, path):
        pts = self.grid.points()
        header = ["x", "y"][: self.grid.ndim] + ["mass"]
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for p, m in zip(pts, self.mass.ravel()):
                fh.write(",".join(repr(float(v)) for v in p) + f",{float(m)!r}\n")

    def to_pgm(self, path):
        """8-bit binary PGM, max-normalized. 1-D grids become a single-row image;
        2-D grids put the first axis along rows."""
        img = np.atleast_2d(self.mass)
        top = img.max()
        scaled = np.zeros(img.shape, dtype=np.uint8) if top <= 0 else np.round(255.0 * img / top).astype(np.uint8)
        rows, cols = scaled.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
            fh.write(scaled.tobytes(order="C"))


def _mixture_logpdf(points, weights, means, stds, alpha_bar):
    sab = math.sqrt(alpha_bar)
    var = alpha_bar * stds ** 2 + (1.0 - alpha_bar)
    diff = points[:, None, :] - sab * means[None]
    comp = (
        np.log(weights)[None]
        - 0.5 * np.sum(diff ** 2 / var[None], axis=2)
        - 0.5 * np.sum(np.log(2 * np.pi * var), axis=1)[None]
    )
    top = comp.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(comp - top).sum(axis=1, keepdims=True)))[:, 0]


def _as_mixture(dist):
    """Accept ``(mu, sigma)`` or ``(weights, means, stds)``."""
    if len(dist) == 2:
        mu, sigma = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in dist)
        return np.ones(1), mu[None], sigma[None]
    weights, means, stds = (np.asarray(v, dtype=np.float64) for v in dist)
    weights = np.atleast_1d(weights)
    means = means.reshape(weights.size, -1)
    stds = stds.reshape(weights.size, -1)
    return weights, means, stds


def diffused_marginal_log_density(dist, alpha_bar, points):
    weights, means, stds = _as_mixture(dist)
    return _mixture_logpdf(np.asarray(points, dtype=np.float64), weights, means, stds, alpha_bar)


def diffused_marginal_density(dist, schedule, t, grid: GridSpec) -> GridDensity:
    """Exact diffused marginal of a Gaussian ``(mu, sigma)`` or mixture ``(weights, means, stds)``.

    ``t = 0`` gives the data density itself.
    """
    weights, means, stds = _as_mixture(dist)
    if means.shape[1] != grid.ndim:
        raise OracleError(f"distribution has dimension {means.shape[1]}, grid has {grid.ndim}")
    ab = schedule.alpha_bar(t) if schedule is not None else 1.0
    return GridDensity.from_log(grid, _mixture_logpdf(grid.points(), weights, means, stds, ab))


def _check_same_grid(densities):
    g = densities[0].grid
    for d in densities[1:]:
        if d.grid != g:
            raise OracleError("densities live on different grids")
    return g


def _log_mass(d):
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(d.mass), LOG_FLOOR)


def blend_unconditional(unconditionals, a) -> GridDensity:
    """Reliability-weighted geometric blend ``prod_j p_j ** a_j``, renormalized."""
    if len(unconditionals) != len(a):
        raise OracleError("need one reliability factor per unconditional density")
    grid = _check_same_grid(list(unconditionals))
    logp = np.zeros(grid.bins)
    for d, aj in zip(unconditionals, a):
        if aj != 0.0:
            logp = logp + aj * _log_mass(d)
    return GridDensity.from_log(grid, logp)


def product_density(conditionals, unconditional_blend: GridDensity, w) -> GridDensity:
    """Cellwise ``prod_i p_i ** w_i / p_null ** (sum(w) - 1)``, renormalized.

    Cells where ``p_null`` is exactly zero but some conditional is not are set
    to zero and counted in ``zeroed_cells``. Raises :class:`NoOverlapError` when
    every cell has some positively weighted conditional below the density floor.
    """
    conditionals = list(conditionals)
    if len(conditionals) != len(w) or not conditionals:
        raise OracleError("need one weight per conditional density")
    grid = _check_same_grid(conditionals + [unconditional_blend])
    logp = np.zeros(grid.bins)
    vanishing = np.zeros(grid.bins, dtype=bool)
    for d, wi in zip(conditionals, w):
        logp = logp + wi * _log_mass(d)
        if wi > 0:
            vanishing |= d.mass < FLOOR
    if vanishing.all():
        raise NoOverlapError("conditional densities share no grid cell: the product is zero everywhere")
    coef = math.fsum(w) - 1.0
    zeroed = 0
    if coef != 0.0:
        logp = logp - coef * _log_mass(unconditional_blend)
        bad = (unconditional_blend.mass == 0) & np.any([d.mass > 0 for d in conditionals], axis=0)
        zeroed = int(np.count_nonzero(bad))
        logp = np.where(bad, -np.inf, logp)
    return GridDensity.from_log(grid, logp, zeroed_cells=zeroed)


def tv_distance(p: GridDensity, q: GridDensity) -> float:
    _check_same_grid([p, q])
    return 0.5 * float(np.abs(p.mass - q.mass).sum())


def _samples_array(samples):
    x = getattr(samples, "states", samples)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise OracleError("empty sample batch")
    return x


def histogram(samples, grid: GridSpec) -> GridDensity:
    """Normalized histogram of in-range samples; ``out_of_range`` counts the rest."""
    x = _samples_array(samples)
    if x.shape[1] != grid.ndim:
        raise OracleError(f"samples have dimension {x.shape[1]}, grid has {grid.ndim}")
    counts, _ = np.histogramdd(x, bins=[grid.edges(k) for k in range(grid.ndim)])
    inside = int(counts.sum())
    if inside == 0:
        raise OracleError("no samples fall inside the grid")
    return GridDensity(grid, counts / inside, out_of_range=x.shape[0] - inside)


def moments(samples):
    """Sample mean and unbiased covariance (``(d, d)``; zeros for a single sample)."""
    x = _samples_array(samples)
    mean = x.mean(axis=0)
    if x.shape[0] < 2:
        return mean, np.zeros((x.shape[1], x.shape[1]))
    c = x - mean
    return mean, (c.T @ c) / (x.shape[0] - 1)


def entropy(p: GridDensity) -> float:
    m = p.mass[p.mass > 0]
    return float(-(m * np.log(m)).sum())
