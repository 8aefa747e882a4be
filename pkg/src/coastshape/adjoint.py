"""Backward-in-time SIP-DG solve of the continuous adjoint system.

The adjoint PDE  -phi dP/dt + phi(A P_x + B P_y) + phi C P - div(G grad P) = S
is marched in reversed time tau = T - t. The discretization applies the
forward scheme's stencils in transpose (the advection matrices satisfy
A = -J1^T, B = -J2^T for the reformulated flux Jacobians, so the transposed
stencil is a consistent discretization of the same continuous system): the
advective volume term is the non-conservative A P_x + B P_y, the facet terms
carry the Lax-Friedrichs/hydrostatic-reconstruction linearization chain, and
the SIP diffusion appears with the 1/phi chain of Uhat = (z + h/phi, q).
This keeps the discrete gradient consistent with finite differences of the
discrete objective. The tracking misfit enters as a facet source on Gamma_1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dg import DGSpace, LaggedJacobian, theta_step
from .forward import (ForwardProblem, SolverError, TimeParams, Trajectory,
                      ghost_state, hydrostatic_reconstruct, max_wave_speed)


@dataclass
class TrackingTarget:
    """Target state on the shore and the diagonal tracking weights."""

    eta_bar: float = 1.0                      # target H + z
    q_bar: tuple = (0.0, 0.0)
    weights: tuple = (1.0, 1.0, 1.0)          # diag(N)


def adjoint_matrices(u_phys, g):
    """Advection matrices A, B of the adjoint vector form, (..., 3, 3)."""
    u_phys = np.asarray(u_phys, dtype=float)
    H = u_phys[..., 0]
    if np.any(H <= 0.0):
        raise SolverError("adjoint matrices need a wet forward state")
    q1 = u_phys[..., 1]
    q2 = u_phys[..., 2]
    sh = H.shape + (3, 3)
    A = np.zeros(sh)
    B = np.zeros(sh)
    A[..., 0, 1] = q1 * q1 / H ** 2 - g * H
    A[..., 0, 2] = q1 * q2 / H ** 2
    A[..., 1, 0] = -1.0
    A[..., 1, 1] = -2.0 * q1 / H
    A[..., 1, 2] = -q2 / H
    A[..., 2, 2] = -q1 / H
    B[..., 0, 1] = q1 * q2 / H ** 2
    B[..., 0, 2] = q2 * q2 / H ** 2 - g * H
    B[..., 1, 1] = -q2 / H
    B[..., 2, 0] = -1.0
    B[..., 2, 1] = -q1 / H
    B[..., 2, 2] = -2.0 * q2 / H
    return A, B


def adjoint_flux_jacobian(u_phys, n, g):
    """Jacobian of the adjoint flux -(AP, BP).n; spectrum equals the forward one."""
    A, B = adjoint_matrices(u_phys, g)
    n = np.asarray(n)
    return -(n[..., 0, None, None] * A + n[..., 1, None, None] * B)


def forward_flux_jacobian(u_phys, n, g):
    """Jacobian of the physical advective flux F(U).n w.r.t. U = (H, Q)."""
    u_phys = np.asarray(u_phys, dtype=float)
    H = u_phys[..., 0]
    Q = u_phys[..., 1:]
    n = np.asarray(n)
    qn = np.einsum("...i,...i->...", Q, n)
    J = np.zeros(H.shape + (3, 3))
    J[..., 0, 1] = n[..., 0]
    J[..., 0, 2] = n[..., 1]
    for i in range(2):
        J[..., 1 + i, 0] = -qn * Q[..., i] / H ** 2 + g * H * n[..., i]
        for j in range(2):
            J[..., 1 + i, 1 + j] = (n[..., j] * Q[..., i] + qn * (i == j)) / H
    return J


def adjoint_source_C(u_phys, grad_z, grad_phi, phi, g):
    """Reaction matrix C from sediment and porosity variation, (..., 3, 3)."""
    u_phys = np.asarray(u_phys, dtype=float)
    H = u_phys[..., 0]
    C = np.zeros(H.shape + (3, 3))
    gz = np.asarray(grad_z)
    gp = np.asarray(grad_phi)
    C[..., 0, 1] = g * gz[..., 0] - g * (H / phi) * gp[..., 0]
    C[..., 0, 2] = g * gz[..., 1] - g * (H / phi) * gp[..., 1]
    return C


def effective_C(u_phys, grad_u_phys, grad_z, grad_phi, phi, g):
    """Product-rule reaction C - A_x - B_y with broken state gradients."""
    C = adjoint_source_C(u_phys, grad_z, grad_phi, phi, g)
    H = u_phys[..., 0]
    q1 = u_phys[..., 1]
    q2 = u_phys[..., 2]
    Hx = grad_u_phys[..., 0, 0]
    Hy = grad_u_phys[..., 0, 1]
    q1x = grad_u_phys[..., 1, 0]
    q1y = grad_u_phys[..., 1, 1]
    q2x = grad_u_phys[..., 2, 0]
    q2y = grad_u_phys[..., 2, 1]
    d1x = (q1x * H - q1 * Hx) / H ** 2
    d2x = (q2x * H - q2 * Hx) / H ** 2
    d1y = (q1y * H - q1 * Hy) / H ** 2
    d2y = (q2y * H - q2 * Hy) / H ** 2
    axby = np.zeros_like(C)
    axby[..., 0, 1] = (2.0 * q1 * q1x / H ** 2 - 2.0 * q1 ** 2 * Hx / H ** 3
                       - g * Hx) \
        + (q1y * q2 + q1 * q2y) / H ** 2 - 2.0 * q1 * q2 * Hy / H ** 3
    axby[..., 0, 2] = ((q1x * q2 + q1 * q2x) / H ** 2
                       - 2.0 * q1 * q2 * Hx / H ** 3) \
        + 2.0 * q2 * q2y / H ** 2 - 2.0 * q2 ** 2 * Hy / H ** 3 - g * Hy
    axby[..., 1, 1] = -2.0 * d1x - d2y
    axby[..., 1, 2] = -d2x
    axby[..., 2, 1] = -d1y
    axby[..., 2, 2] = -d1x - 2.0 * d2y
    return C - axby


def adjoint_rhs(u_phys, z, target: TrackingTarget):
    """Shore source -N (Uhat - Ubar) of the adjoint equations, (..., 3)."""
    u_phys = np.asarray(u_phys, dtype=float)
    n11, n22, n33 = target.weights
    out = np.empty_like(u_phys)
    out[..., 0] = -n11 * (u_phys[..., 0] + np.asarray(z) - target.eta_bar)
    out[..., 1] = -n22 * (u_phys[..., 1] - target.q_bar[0])
    out[..., 2] = -n33 * (u_phys[..., 2] - target.q_bar[1])
    return out


def adjoint_boundary_state(p_plus, tag_kind: str, n):
    """Ghost adjoint state: reflected r on walls, copy elsewhere."""
    p_plus = np.asarray(p_plus, dtype=float)
    out = p_plus.copy()
    if tag_kind == "wall":
        r = p_plus[..., 1:]
        n = np.asarray(n)
        rn = np.einsum("...i,...i->...", r, n)
        out[..., 1:] = r - 2.0 * rn[..., None] * n
    return out


def _cdot(mat, vec):
    return np.matmul(mat, vec[..., None])[..., 0]


def _an_matrix(u_star, phi_star, n, g, dry_tol=1e-10):
    """n.(A, B) at the (possibly reconstructed) state, dry-guarded."""
    u = np.asarray(u_star, dtype=float).copy()
    h = u[..., 0]
    dry = h <= dry_tol
    u[..., 0] = np.where(dry, dry_tol, h)
    uph = u / np.asarray(phi_star)[..., None]
    A, B = adjoint_matrices(uph, g)
    n = np.asarray(n)
    return n[..., 0, None, None] * A + n[..., 1, None, None] * B


class AdjointProblem:
    """Assembles the reversed-time adjoint residual for a frozen forward state.

    The operator is the transpose of the forward scheme's linearized advection
    and diffusion stencils (Lax-Friedrichs dissipation and shock viscosity are
    frozen data), which realizes the continuous adjoint system with
    discrete-gradient consistency.
    """

    def __init__(self, fwd: ForwardProblem, target: TrackingTarget):
        if fwd.mesh.dim != 2:
            raise SolverError("the adjoint solver is two-dimensional")
        self.fwd = fwd
        self.space = fwd.space
        self.mesh = fwd.mesh
        self.target = target
        self.g = fwd.mat.g
        mesh = self.mesh
        self.shore_idx = np.nonzero((mesh.facet_tag == 1)
                                    & (mesh.facet_cells[:, 1] < 0))[0]

    def set_forward_state(self, u_coef, mu_v):
        fwd = self.fwd
        s = self.space
        g = self.g
        fwd.set_mu_v(np.asarray(mu_v, dtype=float))
        u_coef = u_coef.reshape(s.shape)

        # volume: advection matrices at physical states, reaction C,
        # diffusion diagonal with the Uhat chain (mu_v/phi, phi mu_f, phi mu_f)
        u = s.eval_cells(u_coef)
        fwd.check_wet(u[..., 0])
        phi = fwd.phi_q
        uph = u / phi[..., None]
        A, B = adjoint_matrices(uph, g)
        self.AB = np.stack([A, B], axis=2)
        self.C = adjoint_source_C(uph, fwd.gz_q, fwd.gphi_q, phi, g)
        gd = fwd.g_diag_cells()
        gd = gd.copy()
        gd[..., 0] /= phi
        self.gdiag_vol = gd

        # interior facets: transposed WB Lax-Friedrichs chain
        idx = s.interior_facets
        n = self.mesh.facet_normal[idx][:, None, :]
        up_a, um_a = s.traces(u_coef)
        up = up_a[idx]
        um = um_a[idx]
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
            wet_p = (up[..., 0] / php + zp - np.maximum(zp, zm)) > 0.0
            wet_m = (um[..., 0] / phm + zm - np.maximum(zp, zm)) > 0.0
            self.dh_p = np.where(wet_p, phimin / php, 0.0)
            self.dh_m = np.where(wet_m, phimin / phm, 0.0)
            self.corr_dh_p = (g / php) * (up[..., 0] - hps)
            self.corr_dh_m = (g / phm) * (um[..., 0] - hms)
            phis = phimin
        else:
            usp, usm = up, um
            self.dh_p = np.ones_like(up[..., 0])
            self.dh_m = np.ones_like(um[..., 0])
            self.corr_dh_p = np.zeros_like(up[..., 0])
            self.corr_dh_m = np.zeros_like(um[..., 0])
            phis = None
        if phis is None:
            An_p = _an_matrix(usp, php, n, g)
            An_m = _an_matrix(usm, phm, n, g)
            alpha = np.maximum(max_wave_speed(usp, php, n, g),
                               max_wave_speed(usm, phm, n, g))
        else:
            An_p = _an_matrix(usp, phis, n, g)
            An_m = _an_matrix(usm, phis, n, g)
            alpha = np.maximum(max_wave_speed(usp, phis, n, g),
                               max_wave_speed(usm, phis, n, g))
        self.An_p = An_p
        self.An_m = An_m
        self.alpha = alpha

        # boundary: transposed ghost-state chain
        self.bdata = {}
        for kind, bidx in fwd.bdry_groups.items():
            if bidx.size == 0:
                continue
            nb = self.mesh.facet_normal[bidx][:, None, :]
            upb = up_a[bidx]
            phb = fwd.phi_f[0][bidx]
            zb = fwd.z_f[0][bidx]
            ug = ghost_state(upb, kind, nb, phb, fwd.bc, zb)
            An_in = _an_matrix(upb, phb, nb, g)
            An_g = _an_matrix(ug, phb, nb, g)
            self.bdata[kind] = (bidx, nb, An_in, An_g)

        # shore tracking source (solver-variable chain carries 1/phi)
        sidx = self.shore_idx
        w = s.fwphys[sidx][:, :, None]
        src = adjoint_rhs(up_a[sidx] / fwd.phi_f[0][sidx][..., None],
                          fwd.z_f[0][sidx], self.target)
        self.shore_source = -w * src / fwd.phi_f[0][sidx][..., None]

    def residual(self, p_coef) -> np.ndarray:
        s = self.space
        fwd = self.fwd
        mesh = self.mesh
        p_coef = p_coef.reshape(s.shape)
        out = np.zeros(s.shape)
        w3 = s.wdetJ[:, :, None]

        # volume: non-conservative advection + reaction + diffusion
        p = s.eval_cells(p_coef)
        gp_ = s.grad_cells(p_coef)
        adv = np.einsum("cqdij,cqjd->cqi", self.AB, gp_)
        react = _cdot(self.C, p)
        out += np.matmul(s.vol_basis.T, (adv + react) * w3)
        s.scatter_volume_grad(out, self.gdiag_vol[..., None] * gp_
                              * s.wdetJ[:, :, None, None])

        pp_a, pm_a = s.traces(p_coef)
        gpp_a, gpm_a = s.trace_grads(p_coef)

        # interior facets: transposed LF + reconstruction chain
        idx = s.interior_facets
        n = mesh.facet_normal[idx][:, None, :]
        w = s.fwphys[idx][:, :, None]
        pp = pp_a[idx]
        pm = pm_a[idx]
        dlam = pp - pm
        tp = -0.5 * _cdot(self.An_p, dlam) + 0.5 * self.alpha[..., None] * dlam
        tm = -0.5 * _cdot(self.An_m, dlam) - 0.5 * self.alpha[..., None] * dlam
        # reconstruction chain: D^T scales the h-row
        tp[..., 0] *= self.dh_p
        tm[..., 0] *= self.dh_m
        # corrector derivative feeds (n . r) into the h-row
        tp[..., 0] += self.corr_dh_p * np.einsum("fqd,fqd->fq", pp[..., 1:],
                                                 np.broadcast_to(n, pp[..., 1:].shape))
        tm[..., 0] -= self.corr_dh_m * np.einsum("fqd,fqd->fq", pm[..., 1:],
                                                 np.broadcast_to(n, pm[..., 1:].shape))

        # SIP diffusion on P (symmetric form; comp 0 carries the 1/phi chain)
        gdp = fwd.g_diag_facet(0, idx)
        gdm = fwd.g_diag_facet(1, idx)
        gpp = gpp_a[idx]
        gpm = gpm_a[idx]
        php = fwd.phi_f[0][idx]
        phm = fwd.phi_f[1][idx]
        gam = fwd.gamma_f[idx][:, None, None]
        gavg = 0.5 * (gdp + gdm)
        flux_avg = 0.5 * ((gdp[..., None] * gpp * n[:, :, None, :]).sum(-1)
                          + (gdm[..., None] * gpm * n[:, :, None, :]).sum(-1))
        sip = gam * gavg * dlam - flux_avg
        chain_p = np.ones_like(sip)
        chain_p[..., 0] = 1.0 / php
        chain_m = np.ones_like(sip)
        chain_m[..., 0] = 1.0 / phm
        plus_term = np.zeros_like(pp_a)
        minus_term = np.zeros_like(pp_a)
        plus_term[idx] = w * (tp + sip * chain_p)
        minus_term[idx] = w * (tm - sip * chain_m)
        sym_p = np.zeros(pp_a.shape + (mesh.dim,))
        sym_m = np.zeros_like(sym_p)
        sym_p[idx] = (-0.5 * w * gdp * dlam * chain_p)[..., None] * n[:, :, None, :]
        sym_m[idx] = (-0.5 * w * gdm * dlam * chain_m)[..., None] * n[:, :, None, :]

        # boundary: transposed central ghost fluxes + shore source + Nitsche
        for kind, (bidx, nb, An_in, An_g) in self.bdata.items():
            wb = s.fwphys[bidx][:, :, None]
            pb = pp_a[bidx]
            t = -0.5 * _cdot(An_in, pb)
            if kind == "wall":
                # (d U_G/d U)^T = reflector applied to the ghost-matrix part
                tg = -0.5 * _cdot(An_g, pb)
                rn = np.einsum("fqd,fqd->fq", tg[..., 1:],
                               np.broadcast_to(nb, tg[..., 1:].shape))
                tg[..., 1:] -= 2.0 * rn[..., None] * nb
                t += tg
            else:
                tg = -0.5 * _cdot(An_g, pb)
                tg[..., 0] = 0.0          # prescribed depth: dU_G/dh = 0
                t += tg
                # Nitsche transpose for the continuity diffusion (coef mu_v/phi)
                phb = fwd.phi_f[0][bidx]
                cells = mesh.facet_cells[bidx, 0]
                g00 = fwd.mu_v[cells][:, None] / phb
                gamb = fwd.gamma_f[bidx][:, None]
                gp0n = (gpp_a[bidx][..., 0, :] * nb).sum(-1)
                t[..., 0] += gamb * g00 * pb[..., 0] - g00 * gp0n
                symb = np.zeros(pb.shape + (mesh.dim,))
                symb[..., 0, :] = (-g00 * pb[..., 0])[..., None] * nb
                sym_p[bidx] += wb[..., None] * symb
            plus_term[bidx] = wb * t
        plus_term[self.shore_idx] += self.shore_source
        s.scatter_facet(out, plus_term, minus_term)
        s.scatter_facet_grad(out, sym_p, sym_m)
        return out


@dataclass
class AdjointTrajectory:
    """lambda_n by forward node; states[0] duplicates states[1] (t=0 pairing)."""

    times: np.ndarray
    states: list


def run_adjoint(fwd: ForwardProblem, traj: Trajectory, target: TrackingTarget,
                tp: TimeParams) -> AdjointTrajectory:
    """Integrate the adjoint backward over the stored forward trajectory."""
    adj = AdjointProblem(fwd, target)
    s = fwd.space
    n_steps = traj.n_steps
    mass = s.mass_diagonal()
    lagged = LaggedJacobian(fwd.mesh, s.nb * s.ncomp)
    p = np.zeros(s.shape)
    states = [None] * (n_steps + 1)
    for n in range(n_steps, 0, -1):
        adj.set_forward_state(traj.state(n), traj.mu_for_step(n))

        def flat_residual(x):
            return adj.residual(x.reshape(s.shape)).ravel()

        try:
            pnew = theta_step(flat_residual, p.ravel(), tp.dt, tp.theta, mass,
                              lagged=lagged, newton_rtol=tp.newton_rtol,
                              newton_atol=tp.newton_atol, max_newton=tp.max_newton)
        except Exception as exc:
            raise SolverError(f"adjoint step at node {n} "
                              f"(t={traj.times[n]:.6g}) failed: {exc}") from exc
        p = pnew.reshape(s.shape)
        states[n] = p.copy()
    states[0] = states[1].copy() if n_steps >= 1 else p.copy()
    return AdjointTrajectory(traj.times.copy(), states)
