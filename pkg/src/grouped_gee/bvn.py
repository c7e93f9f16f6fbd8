"""Bivariate normal CDF and the latent correlation of thresholded normals.

``Phi2(h, k; r) = Phi(h) Phi(k) + int_0^r phi2(h, k; s) ds``.  With the
substitution ``s = sin(theta)`` the integrand becomes
``exp(-(h^2 - 2 h k sin(theta) + k^2) / (2 cos^2(theta))) / (2 pi)``,
which stays bounded as ``|r| -> 1``.  The integral is evaluated with
composite Gauss-Legendre rules whose panel count is doubled until two
successive estimates agree to ``tol``.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri

_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(10)
_TWO_PI = 2.0 * np.pi


def _panel_integral(h, k, upper, panels):
    # composite 10-point Gauss-Legendre on [0, upper] with `panels` equal panels
    edges = np.linspace(0.0, 1.0, panels + 1)
    half = 0.5 / panels
    mids = (edges[:-1] + edges[1:]) / 2.0
    u = (mids[:, None] + half * _NODES[None, :]).ravel()  # nodes on [0, 1]
    w = np.tile(_WEIGHTS, panels) * half
    theta = upper[..., None] * u
    s = np.sin(theta)
    c2 = np.cos(theta) ** 2
    hk = (h * k)[..., None]
    q = ((h * h)[..., None] - 2.0 * hk * s + (k * k)[..., None]) / (2.0 * c2)
    return upper * (np.exp(-q) @ w) / _TWO_PI


def bvn_cdf(h, k, r, tol: float = 1e-12, max_panels: int = 256):
    """``P(Z1 <= h, Z2 <= k)`` for standard normals with correlation ``r``.

    Broadcasts over ``h``, ``k`` and ``r``; ``|r| <= 1``.
    """
    h, k, r = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (h, k, r)))
    scalar, shape = h.ndim == 0, h.shape
    h, k, r = (np.atleast_1d(v).ravel() for v in (h, k, r))
    if np.any(np.abs(r) > 1):
        raise ValueError("correlation must lie in [-1, 1]")
    upper = np.arcsin(r)
    out = _panel_integral(h, k, upper, 1)
    todo = np.arange(len(h))
    panels = 1
    while todo.size and panels < max_panels:
        panels *= 2
        finer = _panel_integral(h[todo], k[todo], upper[todo], panels)
        done = np.abs(finer - out[todo]) <= tol
        out[todo] = finer
        todo = todo[~done]
    out = out + ndtr(h) * ndtr(k)
    out = np.clip(out, 0.0, None)
    return float(out[0]) if scalar else out.reshape(shape)


def bvn_pdf(h, k, r):
    """Bivariate standard normal density; the derivative of ``bvn_cdf`` in ``r``."""
    one = 1.0 - r * r
    return np.exp(-(h * h - 2.0 * r * h * k + k * k) / (2.0 * one)) / (_TWO_PI * np.sqrt(one))


def frechet_bounds(p_s, p_t):
    """Admissible range of the correlation of two Bernoulli variables."""
    p_s, p_t = np.asarray(p_s, dtype=float), np.asarray(p_t, dtype=float)
    sd = np.sqrt(p_s * (1 - p_s) * p_t * (1 - p_t))
    lo = (np.maximum(0.0, p_s + p_t - 1.0) - p_s * p_t) / sd
    hi = (np.minimum(p_s, p_t) - p_s * p_t) / sd
    return lo, hi


def latent_corr_for_binary(p_s, p_t, rho_target, tol: float = 1e-12, max_iter: int = 100):
    """Latent normal correlation whose thresholding gives binary correlation ``rho_target``.

    Solves ``Phi2(z_s, z_t; r) = rho sqrt(p_s q_s p_t q_t) + p_s p_t`` with
    ``z = Phi^{-1}(p)`` by safeguarded Newton iteration.  Targets outside the
    Frechet bounds are clamped to the nearest bound (``r = +-1``).

    Returns
    -------
    r : ndarray or float
    clamped : ndarray of bool or bool
        True where the requested correlation was infeasible.
    """
    p_s, p_t, rho = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (p_s, p_t, rho_target)))
    scalar = p_s.ndim == 0
    shape = p_s.shape
    p_s, p_t, rho = (np.atleast_1d(v).ravel().copy() for v in (p_s, p_t, rho))
    if np.any((p_s <= 0) | (p_s >= 1) | (p_t <= 0) | (p_t >= 1)):
        raise ValueError("marginal probabilities must lie in (0, 1)")
    lo_rho, hi_rho = frechet_bounds(p_s, p_t)
    eps = 1e-12
    clamped = (rho > hi_rho + eps) | (rho < lo_rho - eps)
    rho = np.clip(rho, lo_rho, hi_rho)
    target = rho * np.sqrt(p_s * (1 - p_s) * p_t * (1 - p_t)) + p_s * p_t
    h, k = ndtri(p_s), ndtri(p_t)

    r = np.zeros_like(rho)
    at_hi = rho >= hi_rho - eps
    at_lo = rho <= lo_rho + eps
    r[at_hi] = 1.0
    r[at_lo & ~at_hi] = -1.0
    todo = np.flatnonzero(~at_hi & ~at_lo & (rho != 0))
    lo = np.full(todo.size, -1.0)
    hi = np.full(todo.size, 1.0)
    x = np.sin(np.pi * rho[todo] / 2.0)
    active = np.arange(todo.size)
    for _ in range(max_iter):
        if not active.size:
            break
        idx = todo[active]
        F = bvn_cdf(h[idx], k[idx], x[active]) - target[idx]
        done = np.abs(F) < tol
        neg = F < 0
        lo[active] = np.where(neg, x[active], lo[active])
        hi[active] = np.where(neg, hi[active], x[active])
        with np.errstate(all="ignore"):
            newton = x[active] - F / bvn_pdf(h[idx], k[idx], x[active])
        inside = np.isfinite(newton) & (newton > lo[active]) & (newton < hi[active])
        step = np.where(inside, newton, (lo[active] + hi[active]) / 2.0)
        x[active] = np.where(done, x[active], step)
        done |= hi[active] - lo[active] < 1e-15
        active = active[~done]
    r[todo] = x
    if scalar:
        return float(r[0]), bool(clamped[0])
    return r.reshape(shape), clamped.reshape(shape)
