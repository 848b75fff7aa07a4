"""Run orchestration shared by the command-line entry points."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .compose import CompositionSpec, ExpertBundle, SpecViolation, unconditional_blend
from .experts import NULL
from .oracle import (
    GridDensity,
    GridSpec,
    OracleError,
    blend_unconditional,
    diffused_marginal_density,
    histogram,
    moments,
    product_density,
    tv_distance,
)
from .sampler import SEED_MASK, SampleBatch, SamplerConfig, initial_states, sample

log = logging.getLogger(__name__)

__all__ = [
    "bundle_oracle",
    "write_samples",
    "write_sample_outputs",
    "sweep_specs",
    "run_sweep",
    "SweepCell",
]


def bundle_oracle(bundle: ExpertBundle, spec: CompositionSpec, grid: GridSpec) -> GridDensity | None:
    """Product density at ``t = 0`` for analytic bundles; ``None`` if any expert has no closed form."""
    if grid.ndim != bundle.dim:
        return None
    conds, nulls = [], []
    for e in bundle.entries:
        if not hasattr(e.expert, "mixture"):
            return None
        conds.append(diffused_marginal_density(e.expert.mixture(e.condition), None, 0, grid))
        nulls.append(diffused_marginal_density(e.expert.mixture(NULL), None, 0, grid))
    return product_density(conds, blend_unconditional(nulls, spec.a), spec.w)


def _fmt(v):
    return repr(float(v))


def write_samples(path, states):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(states.shape[1])])
        for row in states:
            w.writerow([_fmt(v) for v in row])


def write_trajectory(path, batch: SampleBatch):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x{j}" for j in range(batch.dim)])
        for t, row in zip(batch.trajectory_t, batch.trajectory):
            w.writerow([int(t)] + [_fmt(v) for v in row])


def moments_record(batch: SampleBatch, oracle: GridDensity | None = None):
    mean, cov = moments(batch)
    rec = {
        "chains": len(batch),
        "seed": int(batch.seed),
        "kernel_backend": kernels.backend_name(),
        "mean": [float(v) for v in mean],
        "std": [float(math.sqrt(v)) for v in np.diag(cov)],
        "covariance": [[float(v) for v in row] for row in cov],
    }
    if oracle is not None:
        rec["oracle_mean"] = [float(v) for v in oracle.mean()]
        rec["oracle_std"] = [float(math.sqrt(v)) for v in np.diag(oracle.covariance())]
    return rec


def _histogram_or_none(batch, grid):
    """``(histogram, out_of_range)``; the histogram is ``None`` when no sample lands on the grid."""
    try:
        hist = histogram(batch, grid)
    except OracleError:
        log.warning("no sample fell inside the histogram grid %s", grid.bounds)
        return None, len(batch)
    return hist, hist.out_of_range


def write_sample_outputs(out: Path, batch: SampleBatch, grid: GridSpec, oracle=None):
    """Histogram files are omitted when every sample lies off the grid."""
    out.mkdir(parents=True, exist_ok=True)
    write_samples(out / "samples.csv", batch.states)
    hist, rec_out = _histogram_or_none(batch, grid)
    rec = moments_record(batch, oracle)
    rec["out_of_range"] = rec_out
    if oracle is not None and hist is not None:
        rec["tv_to_oracle"] = tv_distance(hist, oracle)
    with open(out / "moments.json", "w") as fh:
        json.dump(rec, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if hist is not None:
        hist.to_csv(out / "histogram.csv")
        hist.to_pgm(out / "histogram.pgm")
    if batch.trajectory is not None:
        write_trajectory(out / "trajectory.csv", batch)
    return rec


@dataclass
class SweepCell:
    index: int
    value: float
    spec: CompositionSpec | None
    skip_reason: str = ""


def _sweep_a(base: CompositionSpec, i, v):
    if not 0.0 <= v <= 1.0:
        raise SpecViolation(f"reliability factor {v} outside [0, 1]")
    a = list(base.a)
    others = [j for j in range(len(a)) if j != i]
    if not others:
        if v != 1.0:
            raise SpecViolation("a single expert's reliability factor must be 1")
        return CompositionSpec(a=(1.0,), w=base.w, allow_weak_weights=base.allow_weak_weights)
    rest = math.fsum(a[j] for j in others)
    for j in others:
        a[j] = (1.0 - v) * (a[j] / rest if rest > 0 else 1.0 / len(others))
    a[i] = v
    return CompositionSpec(a=tuple(a), w=base.w, allow_weak_weights=base.allow_weak_weights)


def sweep_specs(base: CompositionSpec, param, index, values):
    """One :class:`SweepCell` per value; invalid values become skipped cells.

    Sweeping ``a_i`` rescales the other reliability factors proportionally so
    they still sum to one (evenly when they are all zero).
    """
    if param not in ("a", "w"):
        raise ValueError(f"sweep parameter must be 'a' or 'w', got {param!r}")
    if not 0 <= index < base.N:
        raise ValueError(f"sweep index {index} out of range for {base.N} experts")
    cells = []
    for k, v in enumerate(values):
        try:
            if param == "a":
                spec = _sweep_a(base, index, float(v))
            else:
                w = list(base.w)
                w[index] = float(v)
                spec = CompositionSpec(a=base.a, w=tuple(w), allow_weak_weights=base.allow_weak_weights)
            cells.append(SweepCell(k, float(v), spec))
        except SpecViolation as exc:
            cells.append(SweepCell(k, float(v), None, str(exc)))
    return cells


def endpoint_blend_error(bundle: ExpertBundle, spec: CompositionSpec, seed: int, probes=64):
    """For one-hot ``a``, max deviation of the blend from that expert's own unconditional epsilon."""
    a = np.asarray(spec.a)
    if np.count_nonzero(a) != 1 or a.max() != 1.0:
        return None
    k = int(np.argmax(a))
    z = initial_states(seed, probes, bundle.dim)
    worst = 0.0
    for t in sorted({1, bundle.master.T // 2 or 1, bundle.master.T}):
        diff = unconditional_blend(bundle, a, z, t) - bundle.unconditional(k, z, t)
        worst = max(worst, float(np.max(np.abs(diff))))
    return worst


def cell_seed(seed, k, shared_noise):
    return seed if shared_noise else (seed + k) & SEED_MASK


def run_sweep(bundle, base, schedule, sampler_cfg: SamplerConfig, grid, chains, param, index, values,
              shared_noise, out: Path, workers=1):
    """Sample every sweep cell, writing per-cell samples/heatmaps and ``sweep_summary.csv``."""
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    dim = bundle.dim
    for cell in sweep_specs(base, param, index, values):
        row = {"cell": cell.index, "param": param, "index": index, "value": _fmt(cell.value)}
        if cell.spec is None:
            row.update(status="skipped", reason=cell.skip_reason)
            rows.append(row)
            continue
        seed = cell_seed(sampler_cfg.seed, cell.index, shared_noise)
        cfg = SamplerConfig(sampler_cfg.kind, sampler_cfg.num_steps, seed, sampler_cfg.sigma_convention, False)
        batch = sample(bundle, cell.spec, schedule, cfg, chains, workers=workers)
        write_samples(out / f"samples_cell{cell.index:02d}.csv", batch.states)
        hist, off_grid = _histogram_or_none(batch, grid)
        if hist is not None:
            hist.to_pgm(out / f"heatmap_cell{cell.index:02d}.pgm")
        mean, cov = moments(batch)
        oracle = bundle_oracle(bundle, cell.spec, grid)
        row.update(status="ok", reason="", seed=seed, a=";".join(_fmt(v) for v in cell.spec.a),
                   w=";".join(_fmt(v) for v in cell.spec.w), out_of_range=off_grid)
        for j in range(dim):
            row[f"mean_x{j}"] = _fmt(mean[j])
            row[f"std_x{j}"] = _fmt(math.sqrt(cov[j, j]))
        if oracle is not None:
            om = oracle.mean()
            for j in range(dim):
                row[f"oracle_mean_x{j}"] = _fmt(om[j])
            if hist is not None:
                row["tv_to_oracle"] = _fmt(tv_distance(hist, oracle))
        err = endpoint_blend_error(bundle, cell.spec, sampler_cfg.seed)
        if err is not None:
            row["endpoint_blend_error"] = _fmt(err)
        rows.append(row)
    fields = ["cell", "param", "index", "value", "status", "reason", "seed", "a", "w", "out_of_range"]
    fields += [f"mean_x{j}" for j in range(dim)] + [f"std_x{j}" for j in range(dim)]
    fields += [f"oracle_mean_x{j}" for j in range(dim)] + ["tv_to_oracle", "endpoint_blend_error"]
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", restval="")
        w.writeheader()
        w.writerows(rows)
    return rows
