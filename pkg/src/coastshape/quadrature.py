"""Quadrature rules on the reference interval [0,1] and reference triangle.

The triangle rule is a collapsed (Duffy) tensor-product Gauss rule: exact for
the requested total degree, all weights positive, no hard-coded point tables.
"""

from __future__ import annotations

import numpy as np


def gauss_interval(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points/weights on [0,1], exact for polynomials of `degree`."""
    n = max(1, (degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def duffy_triangle(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature on the reference triangle (0,0),(1,0),(0,1).

    Collapses the unit square via (u, v) -> (u, v*(1-u)) with Jacobian (1-u);
    the u-rule needs one extra polynomial degree to absorb the Jacobian.
    Returns points (nq, 2) and weights (nq,) summing to 1/2.
    """
    xu, wu = gauss_interval(degree + 1)
    xv, wv = gauss_interval(degree)
    pts = []
    wts = []
    for u, cu in zip(xu, wu):
        for v, cv in zip(xv, wv):
            pts.append((u, v * (1.0 - u)))
            wts.append(cu * cv * (1.0 - u))
    return np.asarray(pts), np.asarray(wts)


def cell_rule(dim: int, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Volume rule on the reference cell (interval or triangle)."""
    if dim == 1:
        x, w = gauss_interval(degree)
        return x[:, None], w
    if dim == 2:
        return duffy_triangle(degree)
    raise ValueError(f"unsupported dimension {dim}")


def facet_rule(dim: int, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Rule on the reference facet: a point (1D) or the unit interval (2D)."""
    if dim == 1:
        return np.zeros((1, 1)), np.ones(1)
    if dim == 2:
        x, w = gauss_interval(degree)
        return x[:, None], w
    raise ValueError(f"unsupported dimension {dim}")
