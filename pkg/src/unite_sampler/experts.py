"""Epsilon predictors ("experts").

An expert answers ``epsilon(z_t, condition, t, schedule)`` for a batch of
states. Analytic experts return the exact epsilon of their diffused
marginal, so they double as ground truth; :class:`MlpExpert` is a small
trainable network.

Epsilon follows the sampler's sign convention: it is
``-sqrt(1 - alpha_bar) * grad log p_t(z)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .schedule import NoiseSchedule

__all__ = [
    "NULL",
    "Label",
    "Embedding",
    "parse_condition",
    "UnknownCondition",
    "GaussianExpert",
    "GmmExpert",
    "MlpExpert",
    "expert_epsilon",
    "gaussian_marginal_epsilon",
    "gmm_marginal_epsilon",
    "mlp_forward",
    "timestep_embedding",
]


class _Null:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NULL"

    def __reduce__(self):
        return (_Null, ())


NULL = _Null()


@dataclass(frozen=True)
class Label:
    id: int

    def __post_init__(self):
        if int(self.id) != self.id or self.id < 0:
            raise ValueError(f"label ids are non-negative integers, got {self.id!r}")


@dataclass(frozen=True)
class Embedding:
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))


def parse_condition(obj):
    """Decode the JSON condition forms ``"null"``, ``{"label": k}``, ``{"embedding": [...]}``."""
    if obj is None or obj == "null":
        return NULL
    if isinstance(obj, (Label, Embedding, _Null)):
        return obj
    if isinstance(obj, dict) and len(obj) == 1:
        if "label" in obj:
            return Label(int(obj["label"]))
        if "embedding" in obj:
            return Embedding(tuple(obj["embedding"]))
    raise ValueError(f"cannot parse condition {obj!r}")


def condition_to_json(cond):
    if cond is NULL:
        return "null"
    if isinstance(cond, Label):
        return {"label": cond.id}
    return {"embedding": list(cond.values)}


class UnknownCondition(KeyError):
    pass


def _batch(z, dim):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.ndim != 2 or z2.shape[1] != dim:
        raise ValueError(f"state has shape {z.shape}, expected (..., {dim})")
    return z2, single


def _unbatch(out, single):
    return out[0] if single else out


def _alpha_bar(schedule, t, allow_zero=False):
    return schedule.alpha_bar(schedule.check_t(t, allow_zero=allow_zero))


def gaussian_marginal_epsilon(mu, sigma, schedule: NoiseSchedule, t: int, z_t):
    """Exact epsilon of ``N(mu, diag(sigma^2))`` pushed through the forward process to step ``t``."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    z2, single = _batch(z_t, mu.size)
    out = kernels.gaussian_epsilon(z2, mu, sigma, _alpha_bar(schedule, t))
    return _unbatch(out, single)


def gmm_marginal_epsilon(components, schedule: NoiseSchedule, t: int, z_t):
    """Exact epsilon of a diffused diagonal Gaussian mixture.

    ``components`` is ``(weights, means, stds)`` with shapes ``(K,)``, ``(K, d)``, ``(K, d)``.
    """
    weights, means, stds = _mixture_arrays(*components)
    z2, single = _batch(z_t, means.shape[1])
    out = kernels.gmm_epsilon(z2, weights, means, stds, _alpha_bar(schedule, t))
    return _unbatch(out, single)


def _mixture_arrays(weights, means, stds):
    weights = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    if means.ndim == 1:
        means = means[:, None]
    if stds.ndim == 1:
        stds = stds[:, None]
    if means.shape != stds.shape or means.shape[0] != weights.size:
        raise ValueError("mixture weights, means and stds disagree in shape")
    if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError("mixture weights must be positive and sum to 1")
    if np.any(stds <= 0):
        raise ValueError("mixture stds must be strictly positive")
    return weights, means, stds


class GaussianExpert:
    """Diagonal Gaussian per condition. ``table`` maps condition -> (mu, sigma)."""

    kind = "gaussian"

    def __init__(self, table):
        parsed = {}
        for cond, (mu, sigma) in table.items():
            mu = np.atleast_1d(np.asarray(mu, dtype=np.float64)).copy()
            sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64)).copy()
            if mu.shape != sigma.shape or mu.ndim != 1:
                raise ValueError(f"mu/sigma shape mismatch for {cond!r}")
            if np.any(sigma <= 0):
                raise ValueError(f"sigma must be strictly positive for {cond!r}")
            mu.setflags(write=False)
            sigma.setflags(write=False)
            parsed[parse_condition(cond)] = (mu, sigma)
        if NULL not in parsed:
            raise ValueError("a Gaussian expert needs a NULL (unconditional) entry")
        dims = {mu.size for mu, _ in parsed.values()}
        if len(dims) != 1:
            raise ValueError(f"entries disagree in dimension: {sorted(dims)}")
        self.table = parsed
        self.dim = dims.pop()

    def params(self, cond):
        try:
            return self.table[cond]
        except KeyError:
            raise UnknownCondition(f"condition {cond!r} not in expert table") from None

    def mixture(self, cond):
        mu, sigma = self.params(cond)
        return np.ones(1), mu[None, :], sigma[None, :]

    def epsilon(self, z_t, cond, t, schedule):
        mu, sigma = self.params(cond)
        return gaussian_marginal_epsilon(mu, sigma, schedule, t, z_t)

    def __repr__(self):
        return f"GaussianExpert(dim={self.dim}, conditions={list(self.table)})"


class GmmExpert:
    """Diagonal Gaussian mixture per condition. ``table`` maps condition -> (weights, means, stds)."""

    kind = "gmm"

    def __init__(self, table):
        parsed = {}
        for cond, comps in table.items():
            arrays = _mixture_arrays(*comps)
            for a in arrays:
                a.setflags(write=False)
            parsed[parse_condition(cond)] = arrays
        if NULL not in parsed:
            raise ValueError("a mixture expert needs a NULL (unconditional) entry")
        dims = {means.shape[1] for _, means, _ in parsed.values()}
        if len(dims) != 1:
            raise ValueError(f"entries disagree in dimension: {sorted(dims)}")
        self.table = parsed
        self.dim = dims.pop()

    def params(self, cond):
        try:
            return self.table[cond]
        except KeyError:
            raise UnknownCondition(f"condition {cond!r} not in expert table") from None

    mixture = params

    def epsilon(self, z_t, cond, t, schedule):
        return gmm_marginal_epsilon(self.params(cond), schedule, t, z_t)

    def __repr__(self):
        return f"GmmExpert(dim={self.dim}, conditions={list(self.table)})"


TEMB_DIM = 16


def timestep_embedding(t, T, dim=TEMB_DIM):
    """Sinusoidal features of ``t / T``; returns ``(len(t), dim)``.

    Frequencies are ``T * 10000**(-k / (dim/2))`` so the fastest feature
    completes one radian per timestep, as in the usual integer-step embedding.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = T * np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = (t / T)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class MlpExpert:
    """Fully connected epsilon network.

    Input is ``state ++ timestep_embedding(t/T) ++ condition_embedding``;
    hidden layers use tanh, the output layer is affine. ``weights[k]`` has
    shape ``(layer_dims[k], layer_dims[k+1])``. Row ``i`` of
    ``label_embeddings`` embeds ``Label(i)``; the null condition embeds to zeros.
    """

    kind = "mlp"

    def __init__(self, layer_dims, weights, biases, label_embeddings, temb_dim=TEMB_DIM):
        self.layer_dims = [int(d) for d in layer_dims]
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.label_embeddings = np.array(label_embeddings, dtype=np.float64)
        if self.label_embeddings.ndim != 2:
            raise ValueError("label_embeddings must be a 2-D table")
        self.temb_dim = int(temb_dim)
        self.dim = self.layer_dims[-1]
        self.cond_dim = self.label_embeddings.shape[1]
        if len(self.layer_dims) < 2 or len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and bias per consecutive layer pair")
        if self.layer_dims[0] != self.dim + self.temb_dim + self.cond_dim:
            raise ValueError(
                f"input layer width {self.layer_dims[0]} != state {self.dim} + timestep {self.temb_dim}"
                f" + condition {self.cond_dim}"
            )
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[k], self.layer_dims[k + 1]) or b.shape != (self.layer_dims[k + 1],):
                raise ValueError(f"layer {k} has weight {w.shape} / bias {b.shape}, incompatible with dims")
        for arr in (*self.weights, *self.biases, self.label_embeddings):
            arr.setflags(write=False)

    @classmethod
    def initialize(cls, dim, hidden, n_labels, rng, temb_dim=TEMB_DIM):
        """Uniform(+-1/sqrt(fan_in)) weights and biases; one-hot label rows."""
        dims = [dim + temb_dim + n_labels, *hidden, dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(dims, weights, biases, np.eye(n_labels), temb_dim=temb_dim)

    @property
    def n_labels(self):
        return self.label_embeddings.shape[0]

    def condition_rows(self, conds):
        """Embedding matrix for a sequence of conditions (one row each)."""
        rows = np.zeros((len(conds), self.cond_dim))
        for i, c in enumerate(conds):
            if c is NULL:
                continue
            if isinstance(c, Label):
                if c.id >= self.n_labels:
                    raise UnknownCondition(f"label {c.id} not in embedding table of size {self.n_labels}")
                rows[i] = self.label_embeddings[c.id]
            elif isinstance(c, Embedding):
                if len(c.values) != self.cond_dim:
                    raise ValueError(f"embedding has {len(c.values)} values, expected {self.cond_dim}")
                rows[i] = c.values
            else:
                raise UnknownCondition(f"unsupported condition {c!r}")
        return rows

    def inputs(self, z, cond_rows, t, T):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
        return np.concatenate([z, timestep_embedding(t, T, self.temb_dim), cond_rows], axis=1)

    def forward_features(self, x):
        """Run the layers on a prepared input matrix; returns (output, activations)."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def epsilon(self, z_t, cond, t, schedule):
        return mlp_forward(self, z_t, cond, t, schedule)

    def parameters(self):
        return [*self.weights, *self.biases]

    def replace(self, weights=None, biases=None, label_embeddings=None):
        return MlpExpert(
            self.layer_dims,
            self.weights if weights is None else weights,
            self.biases if biases is None else biases,
            self.label_embeddings if label_embeddings is None else label_embeddings,
            temb_dim=self.temb_dim,
        )

    def __repr__(self):
        return f"MlpExpert(layers={self.layer_dims}, labels={self.n_labels})"


def mlp_forward(expert: MlpExpert, z_t, cond, t, schedule: NoiseSchedule):
    t = schedule.check_t(t)
    z2, single = _batch(z_t, expert.dim)
    rows = np.broadcast_to(expert.condition_rows([cond]), (z2.shape[0], expert.cond_dim))
    out, _ = expert.forward_features(expert.inputs(z2, rows, t, schedule.T))
    return _unbatch(out, single)


def expert_epsilon(expert, z_t, cond, t, schedule):
    """Dispatch to ``expert.epsilon``; accepts ``(d,)`` or ``(M, d)`` states."""
    return expert.epsilon(z_t, parse_condition(cond), t, schedule)
