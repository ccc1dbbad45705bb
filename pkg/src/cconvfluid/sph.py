"""Cubic-spline SPH kernel and density summation shared by the reference solver and the metrics."""

from __future__ import annotations

import numba as nb
import numpy as np

from .neighbors import build_neighbors


def cubic_spline(r, hs):
    """Monaghan cubic spline in 3D, ``q = r / hs``, compact support ``2 hs``."""
    q = np.asarray(r, np.float64) / hs
    sigma = 1.0 / (np.pi * hs**3)
    w = np.where(q < 1.0, 1.0 - 1.5 * q * q + 0.75 * q**3, np.where(q < 2.0, 0.25 * (2.0 - q) ** 3, 0.0))
    return sigma * w


@nb.njit(cache=True, nogil=True)
def _w(r, hs):
    q = r / hs
    sigma = 1.0 / (np.pi * hs * hs * hs)
    if q < 1.0:
        return sigma * (1.0 - 1.5 * q * q + 0.75 * q * q * q)
    if q < 2.0:
        t = 2.0 - q
        return sigma * 0.25 * t * t * t
    return 0.0


@nb.njit(cache=True, nogil=True)
def _dw_dr(r, hs):
    q = r / hs
    sigma = 1.0 / (np.pi * hs * hs * hs * hs)
    if q < 1.0:
        return sigma * (-3.0 * q + 2.25 * q * q)
    if q < 2.0:
        t = 2.0 - q
        return -sigma * 0.75 * t * t
    return 0.0


def density(positions, mass, hs, weights=None):
    """``rho_i = sum_j m_j W(|x_i - x_j|, hs)`` over fluid particles, self included.

    ``mass`` is a scalar or per-particle array.
    """
    x = np.asarray(positions, np.float64).reshape(-1, 3)
    if len(x) == 0:
        return np.zeros(0)
    nl = build_neighbors(x, x, 2.0 * hs)
    m = np.broadcast_to(np.asarray(mass, np.float64), (len(x),))
    w = cubic_spline(nl.distances.astype(np.float64), hs) * m[nl.indices]
    return np.bincount(nl.query_index, weights=w, minlength=len(x))
