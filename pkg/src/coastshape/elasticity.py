"""Riesz representative of the shape derivative via linear elasticity with
harmonically interpolated stiffness."""

from __future__ import annotations

import numpy as np

from .mesh import Mesh
from .p1 import assemble_elasticity, assemble_stiffness, dirichlet_solve


def solve_lame_mu(mesh: Mesh, mu_min: float, mu_max: float) -> np.ndarray:
    """Harmonic P1 field with mu = mu_max on Gamma_3, mu_min on the outer
    boundary (discrete maximum principle keeps it in [mu_min, mu_max])."""
    if not 0.0 < mu_min <= mu_max:
        raise ValueError("need 0 < mu_min <= mu_max")
    k = assemble_stiffness(mesh)
    inner = mesh.vertices_on_tag((3,))
    outer = mesh.vertices_on_tag((1, 2))
    fixed = np.concatenate([inner, outer])
    vals = np.concatenate([np.full(inner.size, float(mu_max)),
                           np.full(outer.size, float(mu_min))])
    if inner.size == 0:
        raise ValueError("mesh has no Gamma_3 interface")
    return dirichlet_solve(k, np.zeros(mesh.n_vertices), fixed, vals)


def solve_elasticity(mesh: Mesh, mu_vertex: np.ndarray, rhs: np.ndarray,
                     lam: float = 0.0, rtol: float = 1e-10):
    """Solve int sigma(W):eps(V) = DJ[V] for all V vanishing on Gamma_1/2.

    Returns (W (nv,2), energy = DJ[W] = W^T K W).
    """
    K = assemble_elasticity(mesh, mu_vertex, lam)
    outer = mesh.vertices_on_tag((1, 2))
    fixed = np.concatenate([2 * outer, 2 * outer + 1])
    w = dirichlet_solve(K, rhs.reshape(-1), fixed, np.zeros(fixed.size),
                        rtol=rtol)
    energy = float(w @ (K @ w))
    return w.reshape(-1, 2), energy
