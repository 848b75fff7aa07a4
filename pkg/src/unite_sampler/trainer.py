"""Denoising score matching for :class:`MlpExpert` on 2-D toy data.

Labels are integer arrays; ``-1`` marks the null condition. Training is
plain SGD, single-threaded, and fully determined by ``TrainConfig.seed``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .experts import MlpExpert
from .schedule import NoiseSchedule

__all__ = [
    "NULL_LABEL",
    "Dataset2D",
    "make_dataset",
    "TrainConfig",
    "TrainingDiverged",
    "Gradients",
    "dsm_loss",
    "train_expert",
]

log = logging.getLogger(__name__)

NULL_LABEL = -1


@dataclass(frozen=True, eq=False)
class Dataset2D:
    points: np.ndarray
    labels: np.ndarray
    generator: str
    params: dict = field(default_factory=dict)

    def __len__(self):
        return self.points.shape[0]

    @property
    def n_labels(self):
        return int(self.labels.max()) + 1


def _gaussian_blobs(rng, n, centers=((-2.0, 0.0), (2.0, 0.0)), std=0.3):
    centers = np.asarray(centers, dtype=np.float64)
    labels = np.arange(n) % len(centers)
    points = centers[labels] + std * rng.standard_normal((n, centers.shape[1]))
    return points, labels


def _two_moons(rng, n, noise=0.1):
    labels = np.arange(n) % 2
    theta = rng.uniform(0.0, math.pi, n)
    upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    points = np.where(labels[:, None] == 0, upper, lower)
    return points + noise * rng.standard_normal((n, 2)), labels


def _checkerboard(rng, n, extent=2.0, squares=4):
    """Uniform on the dark squares of a ``squares x squares`` board over ``[-extent, extent]^2``.

    Each point is labelled with the parity of its board row.
    """
    size = 2.0 * extent / squares
    dark = [(r, c) for r in range(squares) for c in range(squares) if (r + c) % 2 == 0]
    pick = rng.integers(0, len(dark), n)
    cells = np.asarray(dark)[pick]
    offsets = rng.uniform(0.0, size, (n, 2))
    points = -extent + cells[:, ::-1] * size + offsets
    return points, cells[:, 0] % 2


_GENERATORS = {
    "gaussian_blobs": _gaussian_blobs,
    "two_moons": _two_moons,
    "checkerboard": _checkerboard,
}


def make_dataset(generator: str, n: int, seed: int, **params) -> Dataset2D:
    try:
        gen = _GENERATORS[generator]
    except KeyError:
        raise ValueError(f"unknown dataset generator {generator!r}; choose from {sorted(_GENERATORS)}") from None
    if n < 1:
        raise ValueError("dataset needs at least one point")
    points, labels = gen(np.random.default_rng(seed), int(n), **params)
    return Dataset2D(points=points, labels=labels.astype(np.int64), generator=generator, params=dict(params))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.05
    seed: int = 0
    p_uncond: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ValueError(f"p_uncond must lie in [0, 1), got {self.p_uncond}")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Gradients:
    weights: list
    biases: list
    label_embeddings: np.ndarray

    def flat(self):
        return np.concatenate([g.ravel() for g in (*self.weights, *self.biases, self.label_embeddings)])


def _embedding_rows(expert, labels):
    rows = np.zeros((labels.size, expert.cond_dim))
    known = labels >= 0
    if np.any(labels[known] >= expert.n_labels):
        raise ValueError(f"label outside embedding table of size {expert.n_labels}")
    rows[known] = expert.label_embeddings[labels[known]]
    return rows


def dsm_loss(expert: MlpExpert, batch, schedule: NoiseSchedule, t_draws, noise_draws, drop_mask=None):
    """Mean squared error between injected and predicted noise, with exact gradients.

    ``batch`` is ``(z0, labels)``. Examples where ``drop_mask`` is true are
    presented with the null condition. Returns ``(loss, Gradients)``.
    """
    z0, labels = batch
    z0 = np.asarray(z0, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).copy()
    noise = np.asarray(noise_draws, dtype=np.float64)
    t = np.asarray(t_draws, dtype=np.int64)
    if z0.ndim != 2 or z0.shape[0] == 0:
        raise ValueError("batch must be a non-empty (B, d) array")
    if z0.shape != noise.shape or z0.shape[1] != expert.dim or t.shape != (z0.shape[0],) or labels.shape != t.shape:
        raise ValueError("batch, labels, timesteps and noise disagree in shape")
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError("timesteps must lie in 1..T")
    if drop_mask is not None:
        labels[np.asarray(drop_mask, dtype=bool)] = NULL_LABEL

    ab = schedule.alpha_bars[t][:, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise
    x = expert.inputs(z_t, _embedding_rows(expert, labels), t, schedule.T)
    pred, acts = expert.forward_features(x)

    resid = pred - noise
    loss = float(np.mean(resid * resid))

    delta = 2.0 * resid / resid.size
    n_layers = len(expert.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        delta = delta @ expert.weights[k].T
        if k > 0:
            delta = delta * (1.0 - acts[k] * acts[k])
    cond_grad = delta[:, expert.dim + expert.temb_dim:]
    ge = np.zeros_like(expert.label_embeddings)
    known = labels >= 0
    np.add.at(ge, labels[known], cond_grad[known])
    return loss, Gradients(gw, gb, ge)


def train_expert(dataset: Dataset2D, hidden, schedule: NoiseSchedule, config: TrainConfig, n_labels=None):
    """Train a fresh :class:`MlpExpert` with SGD; returns ``(expert, epoch_mean_losses)``.

    ``hidden`` lists the hidden-layer widths (``[64, 64]`` gives a 2-64-64-2
    network on 2-D data).
    """
    n_labels = dataset.n_labels if n_labels is None else int(n_labels)
    init_seq, data_seq = np.random.SeedSequence(config.seed).spawn(2)
    expert = MlpExpert.initialize(dataset.points.shape[1], list(hidden), n_labels, np.random.default_rng(init_seq))
    rng = np.random.default_rng(data_seq)

    weights = [w.copy() for w in expert.weights]
    biases = [b.copy() for b in expert.biases]
    emb = expert.label_embeddings.copy()
    curve = []
    n = len(dataset)
    lr = config.learning_rate
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            b = idx.size
            t = rng.integers(1, schedule.T + 1, b)
            noise = rng.standard_normal((b, dataset.points.shape[1]))
            drop = rng.random(b) < config.p_uncond
            current = expert.replace(weights, biases, emb)
            # overflow is reported as TrainingDiverged below, not as a numpy warning
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = dsm_loss(current, (dataset.points[idx], dataset.labels[idx]), schedule, t, noise, drop)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch} at batch offset {start}; lower the learning rate")
            for k in range(len(weights)):
                weights[k] -= lr * grads.weights[k]
                biases[k] -= lr * grads.biases[k]
            emb -= lr * grads.label_embeddings
            losses.append(loss)
        curve.append(float(np.mean(losses)))
        log.debug("epoch %d mean loss %.6f", epoch, curve[-1])
    return expert.replace(weights, biases, emb), curve
