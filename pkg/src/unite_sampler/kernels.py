"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy fallback in ``_pykernels`` serves the same functions. Callers go through
the wrappers here, which coerce inputs to contiguous float64 ``(M, d)`` arrays.
"""

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = _BACKENDS.get("cython", _pykernels)


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return _active.NAME


def use_backend(name):
    """Switch the process-wide backend; returns the previous backend name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} is not available (have {available_backends()})")
    previous = _active.NAME
    _active = _BACKENDS[name]
    return previous


def get_backend(name):
    return _BACKENDS[name]


def _c2(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def gaussian_epsilon(z, mu, sigma, alpha_bar):
    return _active.gaussian_epsilon(_c2(z), _c2(mu), _c2(sigma), float(alpha_bar))


def gmm_epsilon(z, weights, means, stds, alpha_bar):
    return _active.gmm_epsilon(_c2(z), _c2(weights), _c2(means), _c2(stds), float(alpha_bar))


def ddpm_step(z, eps, beta, alpha_bar, noise_scale, noise):
    z = _c2(z)
    noise = z if noise is None else _c2(noise)
    return _active.ddpm_step(z, _c2(eps), float(beta), float(alpha_bar), float(noise_scale), noise)


def ddim_step(z, eps, alpha_bar, alpha_bar_prev):
    return _active.ddim_step(_c2(z), _c2(eps), float(alpha_bar), float(alpha_bar_prev))


def weighted_sum(terms, coefs):
    return _active.weighted_sum(_c2(terms), _c2(coefs))


def compose_combine(cond_eps, w, blend, blend_coef):
    return _active.compose_combine(_c2(cond_eps), _c2(w), _c2(blend), float(blend_coef))
