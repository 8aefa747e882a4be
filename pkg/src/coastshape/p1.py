"""Continuous piecewise-linear (P1) vertex-based calculus on a Mesh.

Used by the signed-distance solve, the Lame-parameter Poisson problem, the
linear-elasticity deformation solve and the shape-gradient assembly.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh


def hat_gradients(mesh: Mesh):
    """Per-cell constant gradients of the vertex hat functions.

    Returns (grads (nc, dim+1, dim), volumes (nc,)).
    """
    v = mesh.vertices
    c = mesh.cells
    if mesh.dim == 1:
        L = (v[c[:, 1], 0] - v[c[:, 0], 0])
        g = np.stack([-1.0 / L, 1.0 / L], axis=1)[:, :, None]
        return g, L
    p0, p1, p2 = v[c[:, 0]], v[c[:, 1]], v[c[:, 2]]
    area2 = ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
             - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))
    def perp(a, b):
        e = b - a
        return np.stack([-e[:, 1], e[:, 0]], axis=1)
    g = np.stack([perp(p1, p2), perp(p2, p0), perp(p0, p1)], axis=1)
    g /= area2[:, None, None]
    return g, 0.5 * area2


def assemble_stiffness(mesh: Mesh, cell_coef=None) -> sp.csr_matrix:
    """Scalar P1 stiffness sum_c coef_c * vol_c * grad(hat_i).grad(hat_j)."""
    g, vol = hat_gradients(mesh)
    coef = np.ones(mesh.n_cells) if cell_coef is None else np.asarray(cell_coef)
    nloc = mesh.dim + 1
    ke = np.einsum("cid,cjd,c->cij", g, g, coef * vol)
    rows = np.repeat(mesh.cells, nloc, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, nloc)).ravel()
    nv = mesh.n_vertices
    return sp.csr_matrix((ke.ravel(), (rows, cols)), shape=(nv, nv))


def assemble_load(mesh: Mesh, cell_values=None) -> np.ndarray:
    """Load vector of f against the hats, f piecewise constant per cell."""
    _, vol = hat_gradients(mesh)
    f = np.ones(mesh.n_cells) if cell_values is None else np.asarray(cell_values)
    nloc = mesh.dim + 1
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.cells.ravel(),
              np.repeat(f * vol / nloc, nloc))
    return out


def p1_cell_gradient(mesh: Mesh, w: np.ndarray) -> np.ndarray:
    """Per-cell gradient of a P1 vertex field, (nc, dim)."""
    g, _ = hat_gradients(mesh)
    return np.einsum("cid,ci->cd", g, w[mesh.cells])


def assemble_elasticity(mesh: Mesh, mu_vertex: np.ndarray,
                        lam: float = 0.0) -> sp.csr_matrix:
    """Vector P1 stiffness of sigma(W):eps(V), sigma = lam tr(eps) I + 2 mu eps.

    mu is P1; its cell average weights each element exactly (eps is constant
    per cell). Dof layout: vertex-major, (v, d) -> 2*v + d.
    """
    if mesh.dim != 2:
        raise ValueError("elasticity deformation is 2D")
    g, vol = hat_gradients(mesh)
    mu_c = mu_vertex[mesh.cells].mean(axis=1)
    nloc = 3
    # eps(hat_i e_a) : eps(hat_j e_b) =
    #   0.5*(g_i.g_j delta_ab + g_i[b] g_j[a])
    gg = np.einsum("cid,cjd->cij", g, g)
    ke = np.empty((mesh.n_cells, nloc, 2, nloc, 2))
    for a in range(2):
        for b in range(2):
            ke[:, :, a, :, b] = (0.5 * (a == b) * gg
                                 + 0.5 * np.einsum("ci,cj->cij", g[:, :, b], g[:, :, a]))
    ke *= (2.0 * mu_c * vol)[:, None, None, None, None]
    if lam != 0.0:
        div = np.einsum("cia,cjb->ciajb", g, g)
        ke += lam * vol[:, None, None, None, None] * div
    dofs = (2 * mesh.cells[:, :, None] + np.arange(2)[None, None, :])
    rows = np.repeat(dofs.reshape(mesh.n_cells, -1), 2 * nloc, axis=1).ravel()
    cols = np.tile(dofs.reshape(mesh.n_cells, -1), (1, 2 * nloc)).ravel()
    n = 2 * mesh.n_vertices
    return sp.csr_matrix((ke.reshape(mesh.n_cells, -1).ravel(),
                          (rows, cols)), shape=(n, n))


def dirichlet_solve(A: sp.csr_matrix, b: np.ndarray, fixed: np.ndarray,
                    fixed_values: np.ndarray, rtol: float = 1e-10,
                    use_cg: bool = True) -> np.ndarray:
    """Solve A x = b with x[fixed] = fixed_values (SPD A)."""
    n = A.shape[0]
    x = np.zeros(n)
    x[fixed] = fixed_values
    free = np.setdiff1d(np.arange(n), fixed)
    rhs = b[free] - A[free][:, fixed] @ fixed_values
    Aff = A[free][:, free].tocsr()
    if use_cg:
        from scipy.sparse.linalg import cg, LinearOperator
        d = Aff.diagonal()
        d[d == 0.0] = 1.0
        M = LinearOperator(Aff.shape, matvec=lambda v: v / d)
        sol, info = cg(Aff, rhs, rtol=rtol, atol=0.0, M=M, maxiter=20000)
        if info != 0:
            raise RuntimeError(f"CG did not converge (info={info})")
    else:
        from scipy.sparse.linalg import spsolve
        sol = spsolve(Aff.tocsc(), rhs)
    x[free] = sol
    return x


def locate_points(mesh: Mesh, pts: np.ndarray, clamp: bool = True):
    """Containing cell and barycentric coordinates for each point.

    Brute-force with bounding-box prefilter (meshes here are small). Points
    outside the mesh are clamped to the cell with the least-negative
    barycentric coordinate; returns (cells, bary (np, dim+1), inside mask).
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, mesh.dim)
    npt = pts.shape[0]
    cells = np.full(npt, -1, dtype=np.int64)
    nloc = mesh.dim + 1
    bary = np.zeros((npt, nloc))
    inside = np.zeros(npt, dtype=bool)
    v = mesh.vertices
    c = mesh.cells
    if mesh.dim == 1:
        a = v[c[:, 0], 0]
        b = v[c[:, 1], 0]
        for i, x in enumerate(pts[:, 0]):
            t = (x - a) / (b - a)
            score = np.minimum(t, 1.0 - t)
            j = int(np.argmax(score))
            cells[i] = j
            tt = min(max(t[j], 0.0), 1.0) if clamp else t[j]
            bary[i] = (1.0 - tt, tt)
            inside[i] = score[j] >= -1e-12
        return cells, bary, inside
    p0, p1, p2 = v[c[:, 0]], v[c[:, 1]], v[c[:, 2]]
    area2 = ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
             - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))
    for i, x in enumerate(pts):
        b0 = ((p1[:, 0] - x[0]) * (p2[:, 1] - x[1])
              - (p1[:, 1] - x[1]) * (p2[:, 0] - x[0])) / area2
        b1 = ((p2[:, 0] - x[0]) * (p0[:, 1] - x[1])
              - (p2[:, 1] - x[1]) * (p0[:, 0] - x[0])) / area2
        b2 = 1.0 - b0 - b1
        score = np.minimum(np.minimum(b0, b1), b2)
        j = int(np.argmax(score))
        cells[i] = j
        bb = np.array([b0[j], b1[j], b2[j]])
        if clamp:
            bb = np.clip(bb, 0.0, None)
            bb /= bb.sum()
        bary[i] = bb
        inside[i] = score[j] >= -1e-12
    return cells, bary, inside


def interpolate_p1(mesh: Mesh, w: np.ndarray, cells, bary) -> np.ndarray:
    return np.einsum("pi,pi->p", w[mesh.cells[cells]], bary)
