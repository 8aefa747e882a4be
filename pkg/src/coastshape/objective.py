"""Objective evaluation J = J1+J2+J3+J4, the signed-distance machinery and
the assembly of the total shape derivative on the vertex deformation space.

The shape derivative of the tracking objective is a volume functional of the
forward and adjoint trajectories; every integrand term contracts with grad(V)
or div(V), so the assembly accumulates a time-integrated 2x2 kernel per
quadrature point and pairs it with the (piecewise-constant) gradients of the
vertex hat fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjoint import AdjointTrajectory, TrackingTarget
from .dg import DGSpace
from .forward import ForwardProblem, Trajectory
from .mesh import (Mesh, MeshError, REGION_OBSTACLE, gamma3_loop,
                   gamma3_outward_normals)
from .p1 import (assemble_load, assemble_stiffness, dirichlet_solve,
                 hat_gradients, interpolate_p1, locate_points, p1_cell_gradient)


@dataclass
class ObjectiveWeights:
    weights: tuple = (1.0, 1.0, 1.0)     # diag(N)
    nu2: float = 1e-4
    nu3: float = 1e-4
    nu4: float = 1e-2
    d_min: float = 0.125

    def __post_init__(self):
        if any(w < 0 for w in (*self.weights, self.nu2, self.nu3, self.nu4,
                               self.d_min)):
            raise ValueError("objective weights must be nonnegative")


# ---------------------------------------------------------------------------
# tracking objective


def eval_J1(fwd: ForwardProblem, traj: Trajectory, target: TrackingTarget) -> float:
    """Time-and-shore quadrature of 0.5 (Uhat-Ubar)^T N (Uhat-Ubar)."""
    s = fwd.space
    idx = np.nonzero((fwd.mesh.facet_tag == 1)
                     & (fwd.mesh.facet_cells[:, 1] < 0))[0]
    if idx.size == 0:
        return 0.0
    w = s.fwphys[idx]
    php = fwd.phi_f[0][idx]
    zp = fwd.z_f[0][idx]
    nw = np.asarray(target.weights)
    dt = float(traj.times[1] - traj.times[0])
    total = 0.0
    for n in range(1, traj.n_steps + 1):
        coef = traj.state(n)
        up = np.matmul(s.Tplus[idx], coef[s.fplus_cell[idx]])
        uph = up / php[..., None]
        mis = np.empty_like(uph)
        mis[..., 0] = uph[..., 0] + zp - target.eta_bar
        mis[..., 1] = uph[..., 1] - target.q_bar[0]
        mis[..., 2] = uph[..., 2] - target.q_bar[1]
        total += dt * 0.5 * np.sum(w * np.einsum("fqn,n,fqn->fq", mis, nw, mis))
    return float(total)


def eval_J2(mesh: Mesh, nu2: float) -> float:
    """Volume penalty nu2 * area(D)."""
    return float(nu2 * mesh.cell_volume[mesh.region == REGION_OBSTACLE].sum())


def eval_J3(mesh: Mesh, nu3: float) -> float:
    """Perimeter regularization nu3 * length(Gamma_3)."""
    return float(nu3 * mesh.facet_measure[mesh.interface_facets()].sum())


# ---------------------------------------------------------------------------
# signed distance


@dataclass
class SignedDistanceField:
    """P1 signed distance to Gamma_3: positive in the water, negative in D."""

    mesh: Mesh
    w: np.ndarray               # (nv,) signed values
    unsigned: np.ndarray        # (nv,) the raw Eikonal solution

    def cell_gradient(self) -> np.ndarray:
        return p1_cell_gradient(self.mesh, self.w)


def solve_eikonal(mesh: Mesh, zero_vertices=None, newton_max: int = 60,
                  newton_tol: float = 1e-10) -> SignedDistanceField:
    """Stabilized viscous Eikonal solve |grad w| = 1, w = 0 on Gamma_3.

    Weak form: (|grad w|, v) - (1, v) + mu_SDF (grad w, grad v) = 0 with
    mu_SDF = max element diameter; damped Newton from a screened-Poisson
    initial guess. The sign is assigned afterwards from the region tags.
    """
    import scipy.sparse as sp
    from scipy.sparse.linalg import spsolve

    if zero_vertices is None:
        g3 = mesh.interface_facets()
        if g3.size:
            zero_vertices = np.unique(mesh.facet_vertices[g3].ravel())
        else:
            zero_vertices = np.unique(
                mesh.facet_vertices[mesh.boundary_facets()].ravel())
    fixed = np.asarray(zero_vertices, dtype=np.int64)
    if fixed.size == 0:
        raise MeshError("Eikonal solve needs a nonempty zero set")
    mu = float(mesh.cell_diameter.max())
    grads, vol = hat_gradients(mesh)
    K = assemble_stiffness(mesh)
    b = assemble_load(mesh)
    wk = dirichlet_solve(mu * K, b, fixed, np.zeros(fixed.size))

    free = np.setdiff1d(np.arange(mesh.n_vertices), fixed)
    eps2 = 1e-16
    nloc = mesh.dim + 1
    rows = np.repeat(mesh.cells, nloc, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, nloc)).ravel()

    def residual(wv):
        gw = p1_cell_gradient(mesh, wv)
        norm = np.sqrt(np.sum(gw * gw, axis=1) + eps2)
        r = -b.copy()
        np.add.at(r, mesh.cells.ravel(), np.repeat((norm * vol / nloc), nloc))
        r += mu * (K @ wv)
        return r

    def jacobian(wv):
        # |grad w| is constant per cell, so its linearization against each
        # hat is exact with the vol/nloc weight
        gw = p1_cell_gradient(mesh, wv)
        norm = np.sqrt(np.sum(gw * gw, axis=1) + eps2)
        dn = np.einsum("cjd,cd->cj", grads, gw / norm[:, None])
        ke = np.broadcast_to((vol / nloc)[:, None, None] * dn[:, None, :],
                             (mesh.n_cells, nloc, nloc))
        J = sp.csr_matrix((ke.ravel(), (rows, cols)),
                          shape=(mesh.n_vertices, mesh.n_vertices))
        return (J + mu * K).tocsr()

    r = residual(wk)
    rn = np.linalg.norm(r[free], np.inf)
    for _ in range(newton_max):
        if rn <= newton_tol:
            break
        J = jacobian(wk).tocsc()
        mask = np.ones(mesh.n_vertices, bool)
        mask[fixed] = False
        Jff = J[mask][:, mask]
        dw = np.zeros(mesh.n_vertices)
        dw[free] = spsolve(Jff, -r[free])
        lam = 1.0
        improved = False
        for _ in range(12):
            wt = wk + lam * dw
            rt = residual(wt)
            rtn = np.linalg.norm(rt[free], np.inf)
            if rtn < (1.0 - 1e-4 * lam) * rn:
                wk, r, rn = wt, rt, rtn
                improved = True
                break
            lam *= 0.5
        if not improved:
            break
    if rn > newton_tol:
        raise RuntimeError(f"Eikonal Newton did not converge (|r|={rn:.3e})")

    sign = np.ones(mesh.n_vertices)
    if mesh.interface_facets().size:
        obst = np.unique(mesh.cells[mesh.region == REGION_OBSTACLE].ravel())
        sign[obst] = -1.0
        sign[fixed] = 1.0
    signed = sign * np.abs(wk)
    signed[fixed] = 0.0
    return SignedDistanceField(mesh, signed, np.abs(wk))


def eval_J4(mesh: Mesh, sdf: SignedDistanceField, nu4: float, d_min: float,
            n_xi: int = 8) -> float:
    """Thickness penalty: offset probes x - xi*n into the obstacle."""
    if nu4 == 0.0 or d_min <= 0.0:
        return 0.0
    data = _thickness_quadrature(mesh, sdf, d_min, n_xi)
    if data is None:
        return 0.0
    return float(nu4 * np.sum(data["w_total"] * data["dpos"] ** 2))


def curvature_gamma3(mesh: Mesh):
    """Discrete curvature on the Gamma_3 loop: turning angle over the mean
    adjacent edge length; positive where the obstacle is convex.

    Returns (loop vertex indices, curvature per loop vertex).
    """
    loop = gamma3_loop(mesh)
    pts = mesh.vertices[loop]
    nxt = np.roll(pts, -1, axis=0)
    prv = np.roll(pts, 1, axis=0)
    e_in = pts - prv
    e_out = nxt - pts
    ang_in = np.arctan2(e_in[:, 1], e_in[:, 0])
    ang_out = np.arctan2(e_out[:, 1], e_out[:, 0])
    turn = ang_out - ang_in
    turn = (turn + np.pi) % (2.0 * np.pi) - np.pi
    li = np.linalg.norm(e_in, axis=1)
    lo = np.linalg.norm(e_out, axis=1)
    kappa = turn / (0.5 * (li + lo))
    # loop is CCW around D: interior left, so positive turn = convex obstacle
    return loop, kappa


# ---------------------------------------------------------------------------
# shape derivative of the tracking objective (volume form)


def _time_kernel(fwd: ForwardProblem, u, u_prev, p_adj, mu_v, dt):
    """2x2 kernel K (plus div V part on the diagonal) at the volume quad
    points for one time node; contracts as sum_ij K_ij dV_i/dx_j.

    The advective block is evaluated in its pre-integration-by-parts flux
    form F(U):(grad V^T grad P) - div(V) F(U):grad P, which is the exact
    frozen-coefficient mesh derivative of the discrete advection term; the
    paper's post-IBP grouping differs by facet remainders that cancel only
    for the exact solution (the finite-difference oracle arbitrates the
    grouping).
    """
    s = fwd.space
    g = fwd.mat.g
    phi = fwd.phi_q
    gphi = fwd.gphi_q
    gz = fwd.gz_q

    U = s.eval_cells(u)
    GU = s.grad_cells(u)
    P = s.eval_cells(p_adj)
    GP = s.grad_cells(p_adj)
    Ut = (U - s.eval_cells(u_prev)) / dt

    h = U[..., 0]
    q = U[..., 1:]
    H = h / phi
    gh = GU[..., 0, :]
    gq = GU[..., 1:, :]                      # (c,q,2,2) rows comps, cols derivs
    p = P[..., 0]
    r = P[..., 1:]
    gp = GP[..., 0, :]
    gr = GP[..., 1:, :]
    geta = (gh * phi[..., None] - h[..., None] * gphi) / (phi ** 2)[..., None] + gz

    mu_vq = mu_v[:, None] * np.ones_like(h)
    muf = fwd.visc.mu_f

    K = np.zeros(h.shape + (2, 2))
    # advection + pressure, flux form: K_kd += sum_n dP_n/dx_k F_nd
    F = advective_flux_kernel(U, phi, g)
    K += np.einsum("cqnk,cqnd->cqkd", GP, F)
    # -mu_v grad(H+z)^T (grad V + grad V^T) grad p
    sym = (np.einsum("cqi,cqk->cqik", geta, gp)
           + np.einsum("cqk,cqi->cqik", geta, gp))
    K -= mu_vq[..., None, None] * sym
    # momentum diffusion of the solved (reformulated) system phi mu_f grad(uh)
    K -= (muf * phi)[..., None, None] * (np.einsum("cqid,cqie->cqde", gr, gq)
                                         + np.einsum("cqid,cqie->cqde", gq, gr))
    # -g phi H grad V^T grad z . r  ->  K_ki -= g h (grad z)_k r_i
    K -= g * h[..., None, None] * np.einsum("cqk,cqi->cqki", gz, r)
    # +0.5 g H^2 grad V^T grad phi . r
    K += 0.5 * g * (H ** 2)[..., None, None] * np.einsum("cqk,cqi->cqki", gphi, r)

    # div(V) block
    s_blk = (Ut[..., 0] * p
             + np.einsum("cqi,cqi->cq", Ut[..., 1:], r)
             - np.einsum("cqnd,cqnd->cq", F, GP)
             + g * h * np.einsum("cqk,cqk->cq", gz, r)
             + mu_vq * np.einsum("cqk,cqk->cq", geta, gp)
             + muf * phi * np.einsum("cqid,cqid->cq", gq, gr)
             - 0.5 * g * H ** 2 * np.einsum("cqk,cqk->cq", gphi, r))
    K[..., 0, 0] += s_blk
    K[..., 1, 1] += s_blk
    return K


def advective_flux_kernel(U, phi, g):
    """Advective flux tensor of the reformulated system at quad points."""
    from .forward import advective_flux
    return advective_flux(U, phi, g, dry_tol=1e-13)


def _facet_kernel(fwd: ForwardProblem, u, p_adj, mu_v):
    """Exact mesh-sensitivity of the facet terms at frozen coefficients.

    The interface/facet contributions cancel in the continuous derivation via
    the exact interface conditions; discretely they are leading-order, so the
    geometric derivatives (facet measure, normal rotation, penalty scale and
    the affine transport of gradient traces) are assembled explicitly.

    Returns (vertex coefficients (nv, 2) pairing with V,
             cell kernel (nc, 2, 2) pairing with the per-cell grad V).
    """
    from .forward import advective_flux, hydrostatic_reconstruct, max_wave_speed

    s = fwd.space
    mesh = s.mesh
    g = fwd.mat.g
    fwd.set_mu_v(mu_v)
    idx = s.interior_facets
    edge_coef = np.zeros((mesh.n_vertices, 2))
    cellK = np.zeros((mesh.n_cells, 2, 2))

    up_a, um_a = s.traces(u)
    gup_a, gum_a = s.trace_grads(u)
    pp_a, pm_a = s.traces(p_adj)
    gpp_a, gpm_a = s.trace_grads(p_adj)

    n = mesh.facet_normal[idx][:, None, :]
    L = mesh.facet_measure[idx]
    a_idx = mesh.facet_vertices[idx, 0]
    b_idx = mesh.facet_vertices[idx, 1]
    tang = (mesh.vertices[b_idx] - mesh.vertices[a_idx]) / L[:, None]
    wref = s.fw_ref[None, :]
    w = (wref * L[:, None])[:, :, None]

    up = up_a[idx]
    um = um_a[idx]
    pp = pp_a[idx]
    pm = pm_a[idx]
    php = fwd.phi_f[0][idx]
    phm = fwd.phi_f[1][idx]
    zp = fwd.z_f[0][idx]
    zm = fwd.z_f[1][idx]

    if fwd.well_balanced:
        hps, hms, phimin = hydrostatic_reconstruct(up[..., 0], um[..., 0],
                                                   zp, zm, php, phm)
        usp = up.copy()
        usp[..., 0] = hps
        usm = um.copy()
        usm[..., 0] = hms
        php_f = phm_f = phimin
        corr_p = 0.5 * g * (up[..., 0] ** 2 / php - hps ** 2 / phimin)
        corr_m = 0.5 * g * (um[..., 0] ** 2 / phm - hms ** 2 / phimin)
    else:
        usp, usm = up, um
        php_f, phm_f = php, phm
        corr_p = corr_m = np.zeros_like(up[..., 0])
    fp = advective_flux(usp, php_f, g, dry_tol=1e-13)
    fm = advective_flux(usm, phm_f, g, dry_tol=1e-13)
    sp_alpha = max_wave_speed(usp, php_f, n, g)
    sm_alpha = max_wave_speed(usm, phm_f, n, g)
    alpha = np.maximum(sp_alpha, sm_alpha)
    central = 0.5 * ((fp + fm) * n[:, :, None, :]).sum(-1)
    lf = central + 0.5 * alpha[..., None] * (usp - usm)

    uhp, guhp = fwd.uhat_and_grad(0, idx, up, gup_a[idx])
    uhm, guhm = fwd.uhat_and_grad(1, idx, um, gum_a[idx])
    gdp = fwd.g_diag_facet(0, idx)
    gdm = fwd.g_diag_facet(1, idx)
    jump = uhp - uhm
    gavg = 0.5 * (gdp + gdm)
    gam = fwd.gamma_f[idx][:, None, None]
    flux_avg = 0.5 * ((gdp[..., None] * guhp * n[:, :, None, :]).sum(-1)
                      + (gdm[..., None] * guhm * n[:, :, None, :]).sum(-1))
    sip = gam * gavg * jump - flux_avg
    gpp = gpp_a[idx]
    gpm = gpm_a[idx]
    dlam = pp - pm
    wL = wref * L[:, None]                           # (f, q) physical weights

    # --- (1) measure rate: the whole facet integral is proportional to L,
    # dL/deps = t . (V(b) - V(a))
    plus_full = lf + sip
    plus_full[..., 1:] += corr_p[..., None] * n
    minus_full = lf + sip
    minus_full = minus_full.copy()
    minus_full[..., 1:] += corr_m[..., None] * n
    sym_p = np.einsum("fqn,fqnd,fqd->fq", -0.5 * gdp * jump, gpp,
                      np.broadcast_to(n, gpp.shape[:2] + (2,)))
    sym_m = np.einsum("fqn,fqnd,fqd->fq", -0.5 * gdm * jump, gpm,
                      np.broadcast_to(n, gpm.shape[:2] + (2,)))
    phi_base = (np.einsum("fqn,fqn->fq", plus_full, pp)
                - np.einsum("fqn,fqn->fq", minus_full, pm)
                + sym_p + sym_m)
    coef_meas = np.einsum("q,fq->f", s.fw_ref, phi_base)
    edge_acc = coef_meas[:, None] * tang

    # --- (2) normal rotation: dn/deps = -((dV . n)/L) t
    # collect every dPhi/dn as a dim-vector per quad point
    dn_vec = np.einsum("fqnd,fqn->fqd", 0.5 * (fp + fm), dlam)
    hset_p = np.maximum(usp[..., 0], 1e-13)
    hset_m = np.maximum(usm[..., 0], 1e-13)
    un_p = (usp[..., 1:] * n).sum(-1) / hset_p
    un_m = (usm[..., 1:] * n).sum(-1) / hset_m
    da_p = np.sign(un_p)[..., None] * usp[..., 1:] / hset_p[..., None]
    da_m = np.sign(un_m)[..., None] * usm[..., 1:] / hset_m[..., None]
    da = np.where((sp_alpha >= sm_alpha)[..., None], da_p, da_m)
    dn_vec += 0.5 * da * np.einsum("fqn,fqn->fq", usp - usm, dlam)[..., None]
    dn_vec += corr_p[..., None] * pp[..., 1:] - corr_m[..., None] * pm[..., 1:]
    dn_vec -= 0.5 * (np.einsum("fqn,fqnd->fqd", dlam * gdp, guhp)
                     + np.einsum("fqn,fqnd->fqd", dlam * gdm, guhm))
    dn_vec += (np.einsum("fqn,fqnd->fqd", -0.5 * gdp * jump, gpp)
               + np.einsum("fqn,fqnd->fqd", -0.5 * gdm * jump, gpm))
    # dPhi = L sum_q w_q (D.dn), dn = -((dV.n)/L) t: the L factors cancel
    proj = np.einsum("q,fqd,fd->f", s.fw_ref, dn_vec, tang)
    edge_acc += (-proj)[:, None] * mesh.facet_normal[idx]

    np.add.at(edge_coef, b_idx, edge_acc)
    np.add.at(edge_coef, a_idx, -edge_acc)

    # --- (3) penalty scale: gamma ~ 1/h_f with h_f the diameter of the
    # thinner neighbor; its rate follows that cell's longest edge
    pen = np.einsum("fq,fqn,fqn->f", wL, gam * gavg * jump, dlam)
    cells_min = np.where(
        mesh.cell_diameter[mesh.facet_cells[idx, 0]]
        <= mesh.cell_diameter[mesh.facet_cells[idx, 1]],
        mesh.facet_cells[idx, 0], mesh.facet_cells[idx, 1])
    for f_local in range(len(idx)):
        va, vb, _ = _longest_edge(mesh, int(cells_min[f_local]))
        _acc_edge(edge_coef, va, vb, mesh,
                  -pen[f_local] / mesh.cell_diameter[cells_min[f_local]])

    # --- (4) affine transport of gradient traces: d(grad) = -gradV^T grad;
    # contributes per-cell 2x2 kernels K[k,d] paired with dV_k/dx_d
    nb_full = np.broadcast_to(n, gpp.shape[:2] + (2,))
    for gd_s, guh_s, gp_s, cells_s in ((gdp, guhp, gpp, mesh.facet_cells[idx, 0]),
                                       (gdm, guhm, gpm, mesh.facet_cells[idx, 1])):
        Kf = np.einsum("fq,fqn,fqnk,fqd->fkd", wL, 0.5 * gd_s * dlam,
                       guh_s, nb_full)
        Kf += np.einsum("fq,fqn,fqnk,fqd->fkd", wL, 0.5 * gd_s * jump,
                        gp_s, nb_full)
        np.add.at(cellK, cells_s, Kf)
    return edge_coef, cellK


def _longest_edge(mesh, c):
    v = mesh.vertices
    cv = mesh.cells[c]
    best = None
    for i in range(3):
        a, b = int(cv[i]), int(cv[(i + 1) % 3])
        ln = np.linalg.norm(v[b] - v[a])
        if best is None or ln > best[2]:
            best = (a, b, ln)
    return best


def _acc_edge(edge_coef, va, vb, mesh, scalar):
    t = mesh.vertices[vb] - mesh.vertices[va]
    t /= np.linalg.norm(t)
    edge_coef[vb] += scalar * t
    edge_coef[va] -= scalar * t


def assemble_DJ1(fwd: ForwardProblem, traj: Trajectory, adj: AdjointTrajectory):
    """Shape-derivative functional of J1 on vertex fields, (nv, 2).

    DJ1[V] = sum_v rhs[v,:] . V[v,:] for piecewise-linear V; volume kernel
    plus the discrete facet-geometry corrections.
    """
    s = fwd.space
    mesh = s.mesh
    dt = float(traj.times[1] - traj.times[0])
    Kt = np.zeros((mesh.n_cells, s.nq, 2, 2))
    edge = np.zeros((mesh.n_vertices, 2))
    cellK = np.zeros((mesh.n_cells, 2, 2))
    for n in range(1, traj.n_steps + 1):
        mu = traj.mu_for_step(n)
        Kt += dt * _time_kernel(fwd, traj.state(n), traj.state(n - 1),
                                adj.states[n], mu, dt)
        ec, ck = _facet_kernel(fwd, traj.state(n), adj.states[n], mu)
        edge += dt * ec
        cellK += dt * ck
    rhs = _pair_kernel_with_hats(s, Kt) + edge
    grads, _ = hat_gradients(mesh)
    contrib = np.einsum("cde,cie->cid", cellK, grads)
    np.add.at(rhs, mesh.cells.ravel(), contrib.reshape(-1, 2))
    return rhs


def _pair_kernel_with_hats(space: DGSpace, Kq):
    """rhs[v,d] = sum_cells int K[d,:] . grad(hat_v)."""
    mesh = space.mesh
    grads, _ = hat_gradients(mesh)           # (nc, 3, dim)
    Kcell = np.einsum("cq,cqde->cde", space.wdetJ, Kq)
    contrib = np.einsum("cde,cie->cid", Kcell, grads)
    rhs = np.zeros((mesh.n_vertices, 2))
    np.add.at(rhs, mesh.cells.ravel(),
              contrib.reshape(-1, 2))
    return rhs


def assemble_DJ2(mesh: Mesh, nu2: float) -> np.ndarray:
    """nu2 int_D div V: exact for piecewise-linear V."""
    grads, vol = hat_gradients(mesh)
    rhs = np.zeros((mesh.n_vertices, 2))
    sel = mesh.region == REGION_OBSTACLE
    contrib = nu2 * vol[sel, None, None] * grads[sel]
    np.add.at(rhs, mesh.cells[sel].ravel(), contrib.reshape(-1, 2))
    return rhs


def assemble_DJ3(mesh: Mesh, nu3: float) -> np.ndarray:
    """nu3 int_{Gamma3} kappa V.n with the discrete vertex curvature."""
    rhs = np.zeros((mesh.n_vertices, 2))
    if nu3 == 0.0:
        return rhs
    loop, kappa = curvature_gamma3(mesh)
    pts = mesh.vertices[loop]
    nxt = np.roll(pts, -1, axis=0)
    prv = np.roll(pts, 1, axis=0)
    # outward (from D) vertex normal: right of CCW traversal
    tang = nxt - prv
    nrm = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
    nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    ds = 0.5 * (np.linalg.norm(nxt - pts, axis=1)
                + np.linalg.norm(pts - prv, axis=1))
    rhs[loop] = (nu3 * kappa * ds)[:, None] * nrm
    return rhs


def _thickness_quadrature(mesh: Mesh, sdf: SignedDistanceField, d_min, n_xi):
    """Shared quadrature data for J4 and DJ4 over Gamma_3 x [0, d_min]."""
    g3, nrm = gamma3_outward_normals(mesh)
    if g3.size == 0:
        return None
    xi, wxi = np.polynomial.legendre.leggauss(n_xi)
    xi = 0.5 * d_min * (xi + 1.0)
    wxi = 0.5 * d_min * wxi
    sq, wsq = np.polynomial.legendre.leggauss(2)
    sq = 0.5 * (sq + 1.0)
    wsq = 0.5 * wsq
    a = mesh.vertices[mesh.facet_vertices[g3, 0]]
    b = mesh.vertices[mesh.facet_vertices[g3, 1]]
    ls = mesh.facet_measure[g3]
    # boundary quad points x (nf, ns, 2), their offsets (nf, ns, nxi, 2)
    x = a[:, None, :] + sq[None, :, None] * (b - a)[:, None, :]
    xm = x[:, :, None, :] - xi[None, None, :, None] * nrm[:, None, None, :]
    flat = xm.reshape(-1, 2)
    cells, bary, inside = locate_points(mesh, flat)
    if not np.all(inside):
        import logging
        logging.getLogger(__name__).warning(
            "thickness offsets left the mesh at %d points (clamped)",
            int(np.sum(~inside)))
    d_m = interpolate_p1(mesh, sdf.w, cells, bary).reshape(xm.shape[:3])
    gd = sdf.cell_gradient()[cells].reshape(xm.shape[:3] + (2,))
    w_total = (ls[:, None] * wsq[None, :])[:, :, None] * wxi[None, None, :]
    return {"g3": g3, "nrm": nrm, "x": x, "xm": xm, "sq": sq, "wsq": wsq,
            "xi": xi, "wxi": wxi, "ls": ls, "w_total": w_total,
            "dpos": np.maximum(d_m, 0.0), "grad_dm": gd,
            "cells": cells, "a_idx": mesh.facet_vertices[g3, 0],
            "b_idx": mesh.facet_vertices[g3, 1]}


def assemble_DJ4(mesh: Mesh, sdf: SignedDistanceField, nu4: float,
                 d_min: float, n_xi: int = 8) -> np.ndarray:
    """Thickness-penalty shape derivative with the projected-point term."""
    rhs = np.zeros((mesh.n_vertices, 2))
    if nu4 == 0.0 or d_min <= 0.0:
        return rhs
    data = _thickness_quadrature(mesh, sdf, d_min, n_xi)
    if data is None:
        return rhs
    dpos = data["dpos"]
    if not np.any(dpos > 0.0):
        return rhs
    g3 = data["g3"]
    loop, kappa_v = curvature_gamma3(mesh)
    kap = dict(zip(loop.tolist(), kappa_v))
    ka = np.array([kap[int(v)] for v in data["a_idx"]])
    kb = np.array([kap[int(v)] for v in data["b_idx"]])
    sq = data["sq"]
    kappa_x = ka[:, None] * (1.0 - sq)[None, :] + kb[:, None] * sq[None, :]
    nrm = data["nrm"]
    # grad d at the boundary points equals the outward normal
    gdot = np.einsum("fsxd,fd->fsx", data["grad_dm"], nrm)
    wgt = data["w_total"] * (kappa_x[:, :, None] * dpos ** 2
                             + 2.0 * dpos * gdot)
    # V(x).n(x) factor: distribute onto the facet endpoints
    for j, sval in enumerate(sq):
        coef = nu4 * wgt[:, j, :].sum(axis=1)
        rhs_add = coef[:, None] * nrm
        np.add.at(rhs, data["a_idx"], (1.0 - sval) * rhs_add)
        np.add.at(rhs, data["b_idx"], sval * rhs_add)
    # -V(p(x_m)).n(p(x_m)) 2 d^+(x_m): project offsets onto Gamma_3
    xm = data["xm"].reshape(-1, 2)
    dflat = dpos.reshape(-1)
    wflat = (data["w_total"]).reshape(-1)
    act = dflat > 0.0
    if np.any(act):
        seg_f, seg_s, ok = _project_to_gamma3(mesh, xm[act])
        coef = -2.0 * nu4 * wflat[act] * dflat[act] * ok
        pn = nrm[np.searchsorted(g3, seg_f)]
        av = mesh.facet_vertices[seg_f, 0]
        bv = mesh.facet_vertices[seg_f, 1]
        np.add.at(rhs, av, ((1.0 - seg_s) * coef)[:, None] * pn)
        np.add.at(rhs, bv, (seg_s * coef)[:, None] * pn)
    return rhs


def _project_to_gamma3(mesh: Mesh, pts):
    """Closest Gamma_3 facet and segment parameter per point (brute force).

    Points whose two nearest distinct segments are equidistant within 1e-10
    (the ridge) get weight 0.
    """
    g3 = mesh.interface_facets()
    a = mesh.vertices[mesh.facet_vertices[g3, 0]]
    b = mesh.vertices[mesh.facet_vertices[g3, 1]]
    ab = b - a
    ll = np.sum(ab * ab, axis=1)
    seg_f = np.zeros(len(pts), dtype=np.int64)
    seg_s = np.zeros(len(pts))
    okw = np.ones(len(pts))
    for i, x in enumerate(pts):
        t = np.clip(np.einsum("fd,fd->f", x - a, ab) / ll, 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.linalg.norm(proj - x, axis=1)
        order = np.argsort(d)
        j = order[0]
        seg_f[i] = g3[j]
        seg_s[i] = t[j]
        for k in order[1:]:
            if d[k] - d[j] > 1e-10:
                break
            if np.linalg.norm(proj[k] - proj[j]) > 1e-8:
                okw[i] = 0.0   # ridge point, measure zero
                break
    return seg_f, seg_s, okw


@dataclass
class ShapeGradientAssembly:
    """Total shape derivative as a vertex functional, split volumetric/surface."""

    volumetric: np.ndarray      # (nv, 2), support-zeroing already applied
    surface: np.ndarray         # (nv, 2)

    @property
    def rhs(self) -> np.ndarray:
        return self.volumetric + self.surface

    def pair(self, v_field: np.ndarray) -> float:
        return float(np.sum(self.rhs * v_field))


def gamma3_support_vertices(mesh: Mesh) -> np.ndarray:
    """Vertices whose hat-field support intersects Gamma_3 with positive area:
    the vertices of cells owning a Gamma_3 facet."""
    g3 = mesh.interface_facets()
    cells = np.unique(mesh.facet_cells[g3].ravel())
    return np.unique(mesh.cells[cells].ravel())


def total_shape_derivative(fwd: ForwardProblem, traj: Trajectory,
                           adj: AdjointTrajectory, sdf: SignedDistanceField,
                           wts: ObjectiveWeights) -> ShapeGradientAssembly:
    mesh = fwd.mesh
    vol = assemble_DJ1(fwd, traj, adj) + assemble_DJ2(mesh, wts.nu2)
    keep = np.zeros(mesh.n_vertices, dtype=bool)
    keep[gamma3_support_vertices(mesh)] = True
    vol[~keep] = 0.0
    surf = assemble_DJ3(mesh, wts.nu3) + assemble_DJ4(mesh, sdf, wts.nu4,
                                                      wts.d_min)
    outer = mesh.vertices_on_tag((1, 2))
    vol[outer] = 0.0
    surf[outer] = 0.0
    return ShapeGradientAssembly(volumetric=vol, surface=surf)
