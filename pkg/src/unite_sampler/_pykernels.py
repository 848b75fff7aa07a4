"""Pure numpy implementations of the hot kernels.

Signatures mirror ``_ckernels``; all arrays are float64 and states are
``(M, d)``.
"""

import numpy as np

NAME = "python"


def gaussian_epsilon(z, mu, sigma, alpha_bar):
    sab = np.sqrt(alpha_bar)
    var = alpha_bar * sigma * sigma + (1.0 - alpha_bar)
    return np.sqrt(1.0 - alpha_bar) * (z - sab * mu) / var


def gmm_epsilon(z, weights, means, stds, alpha_bar):
    """Epsilon of a diffused diagonal mixture via responsibility-weighted component terms.

    ``weights`` is ``(K,)``, ``means`` and ``stds`` are ``(K, d)``.
    """
    sab = np.sqrt(alpha_bar)
    var = alpha_bar * stds * stds + (1.0 - alpha_bar)  # (K, d)
    diff = z[:, None, :] - sab * means[None, :, :]  # (M, K, d)
    logp = (
        np.log(weights)[None, :]
        - 0.5 * np.sum(diff * diff / var[None], axis=2)
        - 0.5 * np.sum(np.log(2.0 * np.pi * var), axis=1)[None, :]
    )
    logp -= logp.max(axis=1, keepdims=True)
    resp = np.exp(logp)
    resp /= resp.sum(axis=1, keepdims=True)
    # per-component epsilon is sqrt(1 - ab) * diff / var
    comp = diff / var[None]
    return np.sqrt(1.0 - alpha_bar) * np.einsum("mk,mkd->md", resp, comp)


def ddpm_step(z, eps, beta, alpha_bar, noise_scale, noise):
    out = (z - (beta / np.sqrt(1.0 - alpha_bar)) * eps) / np.sqrt(1.0 - beta)
    if noise_scale != 0.0:
        out = out + noise_scale * noise
    return out


def ddim_step(z, eps, alpha_bar, alpha_bar_prev):
    x0 = (z - np.sqrt(1.0 - alpha_bar) * eps) / np.sqrt(alpha_bar)
    return np.sqrt(alpha_bar_prev) * x0 + np.sqrt(1.0 - alpha_bar_prev) * eps


def weighted_sum(terms, coefs):
    """``sum_i coefs[i] * terms[i]`` accumulated in index order, skipping zero coefficients."""
    out = np.zeros(terms.shape[1:])
    for i in range(terms.shape[0]):
        c = coefs[i]
        if c != 0.0:
            out = out + c * terms[i]
    return out


def compose_combine(cond_eps, w, blend, blend_coef):
    """``sum_i w_i * cond_eps[i] - blend_coef * blend``."""
    out = weighted_sum(cond_eps, w)
    if blend_coef != 0.0:
        out = out - blend_coef * blend
    return out
