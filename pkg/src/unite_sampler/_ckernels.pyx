# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same contracts as ``_pykernels``."""

import numpy as np

from libc.math cimport exp, log, sqrt, M_PI

NAME = "cython"


def gaussian_epsilon(const double[:, ::1] z, const double[::1] mu, const double[::1] sigma, double alpha_bar):
    cdef Py_ssize_t m, j, M = z.shape[0], d = z.shape[1]
    cdef double sab = sqrt(alpha_bar), s1 = sqrt(1.0 - alpha_bar)
    out_arr = np.empty((M, d))
    cdef double[:, ::1] out = out_arr
    cdef double[::1] var = np.empty(d)
    for j in range(d):
        var[j] = alpha_bar * sigma[j] * sigma[j] + (1.0 - alpha_bar)
    with nogil:
        for m in range(M):
            for j in range(d):
                out[m, j] = s1 * (z[m, j] - sab * mu[j]) / var[j]
    return out_arr


def gmm_epsilon(const double[:, ::1] z, const double[::1] weights, const double[:, ::1] means,
                const double[:, ::1] stds, double alpha_bar):
    cdef Py_ssize_t m, k, j
    cdef Py_ssize_t M = z.shape[0], d = z.shape[1], K = weights.shape[0]
    cdef double sab = sqrt(alpha_bar), s1 = sqrt(1.0 - alpha_bar)
    cdef double diff, acc, top, total
    out_arr = np.zeros((M, d))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] var = np.empty((K, d))
    cdef double[:, ::1] smean = np.empty((K, d))
    cdef double[::1] lognorm = np.empty(K)
    cdef double[::1] logp = np.empty(K)
    for k in range(K):
        acc = 0.0
        for j in range(d):
            var[k, j] = alpha_bar * stds[k, j] * stds[k, j] + (1.0 - alpha_bar)
            smean[k, j] = sab * means[k, j]
            acc += log(2.0 * M_PI * var[k, j])
        lognorm[k] = log(weights[k]) - 0.5 * acc
    with nogil:
        for m in range(M):
            top = -1e308
            for k in range(K):
                acc = 0.0
                for j in range(d):
                    diff = z[m, j] - smean[k, j]
                    acc += diff * diff / var[k, j]
                logp[k] = lognorm[k] - 0.5 * acc
                if logp[k] > top:
                    top = logp[k]
            total = 0.0
            for k in range(K):
                logp[k] = exp(logp[k] - top)
                total += logp[k]
            for k in range(K):
                for j in range(d):
                    out[m, j] += (logp[k] / total) * ((z[m, j] - smean[k, j]) / var[k, j])
            for j in range(d):
                out[m, j] *= s1
    return out_arr


def ddpm_step(const double[:, ::1] z, const double[:, ::1] eps, double beta, double alpha_bar,
              double noise_scale, const double[:, ::1] noise):
    cdef Py_ssize_t k, n = z.shape[0] * z.shape[1]
    cdef double c = beta / sqrt(1.0 - alpha_bar)
    cdef double r = sqrt(1.0 - beta)
    out_arr = np.empty((z.shape[0], z.shape[1]))
    if n == 0:
        return out_arr
    cdef double[:, ::1] out2 = out_arr
    # flat views let the compiler vectorize when d is small
    cdef double *o = &out2[0, 0]
    cdef const double *zp = &z[0, 0]
    cdef const double *ep = &eps[0, 0]
    cdef const double *np_ = &noise[0, 0]
    with nogil:
        for k in range(n):
            o[k] = (zp[k] - c * ep[k]) / r
        if noise_scale != 0.0:
            for k in range(n):
                o[k] = o[k] + noise_scale * np_[k]
    return out_arr


def ddim_step(const double[:, ::1] z, const double[:, ::1] eps, double alpha_bar, double alpha_bar_prev):
    cdef Py_ssize_t k, n = z.shape[0] * z.shape[1]
    cdef double s1 = sqrt(1.0 - alpha_bar), sa = sqrt(alpha_bar)
    cdef double sp = sqrt(alpha_bar_prev), sp1 = sqrt(1.0 - alpha_bar_prev)
    out_arr = np.empty((z.shape[0], z.shape[1]))
    if n == 0:
        return out_arr
    cdef double[:, ::1] out2 = out_arr
    cdef double *o = &out2[0, 0]
    cdef const double *zp = &z[0, 0]
    cdef const double *ep = &eps[0, 0]
    with nogil:
        for k in range(n):
            o[k] = sp * ((zp[k] - s1 * ep[k]) / sa) + sp1 * ep[k]
    return out_arr


cdef void _accumulate(double *o, const double *src, double c, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(n):
        o[k] = o[k] + c * src[k]


def weighted_sum(const double[:, :, ::1] terms, const double[::1] coefs):
    cdef Py_ssize_t i, N = terms.shape[0], n = terms.shape[1] * terms.shape[2]
    cdef double c
    out_arr = np.zeros((terms.shape[1], terms.shape[2]))
    if n == 0:
        return out_arr
    cdef double[:, ::1] out2 = out_arr
    cdef double *o = &out2[0, 0]
    with nogil:
        for i in range(N):
            c = coefs[i]
            if c != 0.0:
                _accumulate(o, &terms[i, 0, 0], c, n)
    return out_arr


def compose_combine(const double[:, :, ::1] cond_eps, const double[::1] w,
                    const double[:, ::1] blend, double blend_coef):
    out_arr = weighted_sum(cond_eps, w)
    cdef Py_ssize_t n = blend.shape[0] * blend.shape[1]
    if blend_coef == 0.0 or n == 0:
        return out_arr
    cdef double[:, ::1] out2 = out_arr
    with nogil:
        _accumulate(&out2[0, 0], &blend[0, 0], -blend_coef, n)
    return out_arr
