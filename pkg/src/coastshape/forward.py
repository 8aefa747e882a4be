"""Well-balanced SIP-DG semidiscretization of the porous shallow water
equations with artificial viscosity, and the forward time loop.

Solver variables are Utilde = (h, uh[, vh]) = (phi*H, phi*u*H[, phi*v*H]);
diffusion acts on Uhat = (z + h/phi, uh[, vh]) so still water cancels all
viscous terms exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dg import DGField, DGSpace, LaggedJacobian, theta_step
from .mesh import TAG_OPEN_SEA, TAG_SHORE


class SolverError(Exception):
    pass


class DryStateError(SolverError):
    def __init__(self, where: int, h: float):
        super().__init__(f"non-positive water column h={h:.3e} (cell/facet {where})")
        self.where = where


# ---------------------------------------------------------------------------
# material data and parameters


@dataclass
class MaterialFields:
    """Porosity and sediment as scalar DG fields on the solver's mesh/degree."""

    phi: DGField
    z: DGField
    g: float = 9.81

    def __post_init__(self):
        mean = self.phi.space.cell_mean(self.phi.coef)[:, 0]
        if np.any(mean <= 0.0) or np.any(mean > 1.0 + 1e-12):
            raise ValueError("porosity cell means must lie in (0, 1]")
        self.phi_cell = mean


@dataclass
class ViscosityParams:
    mu_f: float = 1e-2
    s0: float | None = None          # default -4*log10(p_DG+1)
    kappa_s: float = 1.0
    mu_max: float = 1.0
    detect: bool = True


@dataclass
class BoundaryData:
    h1: float = 1.0                  # prescribed open-sea value H1
    # tag -> "wall" | "open_sea"
    kinds: dict = field(default_factory=lambda: {TAG_SHORE: "wall",
                                                 TAG_OPEN_SEA: "open_sea"})
    # "depth": h_G = phi*H1; "surface": h_G = phi*(H1 - z), i.e. H1 is the
    # prescribed free-surface level (consistent with a sloped bed at rest)
    open_sea_mode: str = "depth"

    def __post_init__(self):
        if self.h1 <= 0.0:
            raise ValueError("H1 must be positive")
        if self.open_sea_mode not in ("depth", "surface"):
            raise ValueError("open_sea_mode must be 'depth' or 'surface'")


# ---------------------------------------------------------------------------
# pointwise kernels (vectorized over leading axes)


def physical_state(u, phi):
    """(h, q) -> (H, Q) with H = h/phi, Q = q/phi."""
    phi = np.asarray(phi)
    if np.any(phi <= 0.0):
        raise ValueError("porosity must be positive")
    return np.asarray(u) / phi[..., None]


def advective_flux(u, phi, g, dry_tol=0.0):
    """Flux tensor of the reformulated system, shape (..., ncomp, dim).

    dry_tol > 0 zeroes the velocity terms of (numerically) dry states instead
    of raising; used for hydrostatically reconstructed facet states.
    """
    u = np.asarray(u, dtype=float)
    h = u[..., 0]
    q = u[..., 1:]
    if dry_tol <= 0.0:
        if np.any(h <= 0.0):
            raise DryStateError(int(np.argmin(h)), float(h.min()))
        vel = q / h[..., None]
    else:
        wet = h > dry_tol
        vel = np.where(wet[..., None], q / np.where(wet, h, 1.0)[..., None], 0.0)
    dim = q.shape[-1]
    pres = 0.5 * g * h * h / np.asarray(phi)
    f = np.empty(u.shape + (dim,))
    f[..., 0, :] = q
    for i in range(dim):
        for j in range(dim):
            f[..., 1 + i, j] = q[..., i] * vel[..., j]
        f[..., 1 + i, i] += pres
    return f


def wave_speeds(u, phi, n, g):
    """Eigenvalues (u.n - c, u.n, u.n + c) with c = sqrt(g h / phi)."""
    u = np.asarray(u, dtype=float)
    h = u[..., 0]
    if np.any(h <= 0.0):
        raise DryStateError(int(np.argmin(h)), float(h.min()))
    un = np.einsum("...i,...i->...", u[..., 1:], np.asarray(n)) / h
    c = np.sqrt(g * h / np.asarray(phi))
    return np.stack([un - c, un, un + c], axis=-1)


def max_wave_speed(u, phi, n, g, dry_tol=1e-12):
    u = np.asarray(u, dtype=float)
    h = u[..., 0]
    wet = h > dry_tol
    hs = np.where(wet, h, 1.0)
    un = np.abs(np.einsum("...i,...i->...", u[..., 1:], np.asarray(n))) / hs
    c = np.sqrt(g * np.maximum(h, 0.0) / np.asarray(phi))
    return np.where(wet, un + c, c)


def lax_friedrichs(u_plus, u_minus, n, alpha, phi_plus, phi_minus, g, dry_tol=0.0):
    """(Local) Lax-Friedrichs flux 0.5(F(U+).n + F(U-).n + alpha (U+ - U-))."""
    fp = advective_flux(u_plus, phi_plus, g, dry_tol)
    fm = advective_flux(u_minus, phi_minus, g, dry_tol)
    n = np.asarray(n)
    central = 0.5 * (np.einsum("...nd,...d->...n", fp, n)
                     + np.einsum("...nd,...d->...n", fm, n))
    return central + 0.5 * np.asarray(alpha)[..., None] * (u_plus - u_minus)


def hydrostatic_reconstruct(h_plus, h_minus, z_plus, z_minus, phi_plus, phi_minus):
    """Facet-side depths redefined for discontinuous bed and porosity."""
    zmax = np.maximum(z_plus, z_minus)
    phimin = np.minimum(phi_plus, phi_minus)
    hp = np.maximum(0.0, h_plus / phi_plus + z_plus - zmax) * phimin
    hm = np.maximum(0.0, h_minus / phi_minus + z_minus - zmax) * phimin
    return hp, hm, phimin


def sources(u, phi, grad_phi, grad_z, g):
    """Bed-slope and porosity-variation sources, (..., ncomp)."""
    u = np.asarray(u, dtype=float)
    h = u[..., 0]
    out = np.zeros_like(u)
    hh = (h / np.asarray(phi)) ** 2
    out[..., 1:] = (-g * h)[..., None] * np.asarray(grad_z) \
        + (0.5 * g * hh)[..., None] * np.asarray(grad_phi)
    return out


def shock_viscosity(space: DGSpace, coef, params: ViscosityParams):
    """Per-cell artificial viscosity from the modal smoothness of h."""
    p = space.degree
    nc = space.mesh.n_cells
    if p < 1 or not params.detect:
        return np.zeros(nc)
    hcoef = coef[:, :, 0]
    top = space.mode_degree == p
    e_top = np.sum(hcoef[:, top] ** 2, axis=1)
    e_all = np.sum(hcoef ** 2, axis=1)
    s0 = params.s0 if params.s0 is not None else -4.0 * np.log10(p + 1.0)
    kap = params.kappa_s
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(e_top > 0.0,
                     np.log10(np.maximum(e_top, 1e-300) / np.maximum(e_all, 1e-300)),
                     -np.inf)
    mu0 = params.mu_max * space.mesh.cell_diameter / p
    ramp = np.zeros(nc)
    full = s > s0 + kap
    mid = (~full) & (s > s0 - kap)
    ramp[full] = 1.0
    ramp[mid] = 0.5 * (1.0 + np.sin(0.5 * np.pi * (s[mid] - s0) / kap))
    return mu0 * ramp


def ghost_state(u_plus, kind: str, n, phi_plus, bc: BoundaryData, z_plus=0.0):
    u_plus = np.asarray(u_plus, dtype=float)
    out = u_plus.copy()
    if kind == "wall":
        q = u_plus[..., 1:]
        n = np.asarray(n)
        qn = np.einsum("...i,...i->...", q, n)
        out[..., 1:] = q - 2.0 * qn[..., None] * n
    elif kind == "open_sea":
        depth = bc.h1 if bc.open_sea_mode == "depth" else bc.h1 - np.asarray(z_plus)
        out[..., 0] = np.asarray(phi_plus) * depth
    else:
        raise SolverError(f"unknown boundary kind {kind!r}")
    return out


def boundary_state(u_plus, tag, n, phi_plus, bc: BoundaryData, z_plus=0.0):
    """Ghost state for the advective boundary flux, dispatched on the tag."""
    kind = bc.kinds.get(int(tag))
    if kind is None:
        raise SolverError(f"no boundary condition for tag {tag}")
    return ghost_state(u_plus, kind, n, phi_plus, bc, z_plus)


# ---------------------------------------------------------------------------
# residual assembler


class ForwardProblem:
    """Holds mesh/material precomputations and assembles the spatial residual."""

    def __init__(self, space: DGSpace, materials: MaterialFields,
                 viscosity: ViscosityParams, bc: BoundaryData,
                 c_ip: float = 20.0, well_balanced: bool = True,
                 dry_tol: float = 1e-12):
        if space.ncomp != space.mesh.dim + 1:
            raise ValueError("state space needs dim+1 components")
        self.space = space
        self.mesh = space.mesh
        self.mat = materials
        self.visc = viscosity
        self.bc = bc
        self.c_ip = c_ip
        self.well_balanced = well_balanced
        self.dry_tol = dry_tol

        s = space
        scalar = DGSpace(space.mesh, space.degree, 1)
        self.scalar = scalar
        self.phi_q = scalar.eval_cells(materials.phi.coef)[:, :, 0]
        self.gphi_q = scalar.grad_cells(materials.phi.coef)[:, :, 0, :]
        self.z_q = scalar.eval_cells(materials.z.coef)[:, :, 0]
        self.gz_q = scalar.grad_cells(materials.z.coef)[:, :, 0, :]
        pf = scalar.traces(materials.phi.coef)
        self.phi_f = (pf[0][:, :, 0], pf[1][:, :, 0])
        zf = scalar.traces(materials.z.coef)
        self.z_f = (zf[0][:, :, 0], zf[1][:, :, 0])
        gzf = scalar.trace_grads(materials.z.coef)
        self.gz_f = (gzf[0][:, :, 0, :], gzf[1][:, :, 0, :])
        gpf = scalar.trace_grads(materials.phi.coef)
        self.gphi_f = (gpf[0][:, :, 0, :], gpf[1][:, :, 0, :])

        mesh = self.mesh
        self.int_f = s.interior_facets
        dia = mesh.cell_diameter
        h_f = dia[mesh.facet_cells[:, 0]].copy()
        mi = mesh.facet_cells[:, 1] >= 0
        h_f[mi] = np.minimum(h_f[mi], dia[mesh.facet_cells[mi, 1]])
        self.h_f = h_f
        self.gamma_f = c_ip * max(space.degree, 1) ** 2 / h_f
        self.bdry_groups = {}
        for kind in ("wall", "open_sea"):
            tags = [t for t, k in bc.kinds.items() if k == kind]
            idx = s.boundary_facets[np.isin(mesh.facet_tag[s.boundary_facets], tags)]
            self.bdry_groups[kind] = idx
        n_handled = sum(len(v) for v in self.bdry_groups.values())
        if n_handled != len(s.boundary_facets):
            tags = sorted(set(int(t) for t in mesh.facet_tag[s.boundary_facets])
                          - set(bc.kinds))
            raise SolverError(f"boundary facets with unhandled tags {tags}")
        self.mu_v = np.zeros(mesh.n_cells)

    def set_mu_v(self, mu_v):
        self.mu_v = np.asarray(mu_v, dtype=float)

    def g_diag_cells(self):
        """Diffusion diagonal G(f(phi, mu)) at volume quad points, (nc,nq,ncomp)."""
        nc, nq = self.phi_q.shape
        g = np.empty((nc, nq, self.space.ncomp))
        g[:, :, 0] = self.mu_v[:, None]
        g[:, :, 1:] = (self.phi_q * self.visc.mu_f)[:, :, None]
        return g

    def g_diag_facet(self, side, idx):
        mesh = self.mesh
        cells = mesh.facet_cells[idx, side].copy()
        cells[cells < 0] = mesh.facet_cells[idx, 0][cells < 0]
        phi = self.phi_f[side][idx]
        g = np.empty(phi.shape + (self.space.ncomp,))
        g[:, :, 0] = self.mu_v[cells][:, None]
        g[:, :, 1:] = (phi * self.visc.mu_f)[:, :, None]
        return g

    def check_wet(self, h):
        if np.any(h <= self.dry_tol):
            flat = int(np.argmin(h))
            where = flat // h.shape[-1] if h.ndim > 1 else flat
            raise DryStateError(int(where), float(h.min()))

    def uhat_and_grad(self, side, idx, u, gu):
        """Trace of Uhat = (z + h/phi, q) and its broken gradient on one side."""
        phi = self.phi_f[side][idx]
        uhat = u.copy()
        uhat[..., 0] = self.z_f[side][idx] + u[..., 0] / phi
        guhat = gu.copy()
        guhat[..., 0, :] = ((gu[..., 0, :] * phi[..., None]
                             - u[..., 0:1] * self.gphi_f[side][idx])
                            / (phi ** 2)[..., None] + self.gz_f[side][idx])
        return uhat, guhat

    def residual(self, coef) -> np.ndarray:
        s = self.space
        g = self.mat.g
        coef = coef.reshape(s.shape)
        out = np.zeros(s.shape)

        # --- volume terms
        u = s.eval_cells(coef)
        self.check_wet(u[..., 0])
        gu = s.grad_cells(coef)
        f = advective_flux(u, self.phi_q, g)
        w4 = s.wdetJ[:, :, None, None]

        uhg = gu.copy()
        uhg[..., 0, :] = ((gu[..., 0, :] * self.phi_q[..., None]
                           - u[..., 0:1] * self.gphi_q)
                          / (self.phi_q ** 2)[..., None] + self.gz_q)
        gd = self.g_diag_cells()
        s.scatter_volume_grad(out, (gd[..., None] * uhg - f) * w4)

        src = sources(u, self.phi_q, self.gphi_q, self.gz_q, g)
        out -= np.matmul(s.vol_basis.T, src * s.wdetJ[:, :, None])

        up, um = s.traces(coef)
        gup, gum = s.trace_grads(coef)
        if self.int_f.size:
            self._interior_fluxes(out, self.int_f, up, um, gup, gum, g)
        self._boundary_terms(out, up, gup, g)
        return out

    def _interior_fluxes(self, out, idx, up_all, um_all, gup_all, gum_all, g):
        s = self.space
        mesh = self.mesh
        n = mesh.facet_normal[idx][:, None, :]          # (f, 1, dim)
        w = s.fwphys[idx][:, :, None]                   # (f, nfq, 1)
        up = up_all[idx]
        um = um_all[idx]
        php = self.phi_f[0][idx]
        phm = self.phi_f[1][idx]
        zp = self.z_f[0][idx]
        zm = self.z_f[1][idx]
        self.check_wet(up[..., 0])
        self.check_wet(um[..., 0])

        if self.well_balanced:
            hps, hms, phimin = hydrostatic_reconstruct(up[..., 0], um[..., 0],
                                                       zp, zm, php, phm)
            usp = up.copy()
            usp[..., 0] = hps
            usm = um.copy()
            usm[..., 0] = hms
            alpha = np.maximum(max_wave_speed(usp, phimin, n, g),
                               max_wave_speed(usm, phimin, n, g))
            fhat = lax_friedrichs(usp, usm, n, alpha, phimin, phimin, g,
                                  dry_tol=1e-13)
            corr_p = 0.5 * g * (up[..., 0] ** 2 / php - hps ** 2 / phimin)
            corr_m = 0.5 * g * (um[..., 0] ** 2 / phm - hms ** 2 / phimin)
            plus_flux = fhat.copy()
            plus_flux[..., 1:] += corr_p[..., None] * n
            minus_flux = fhat.copy()
            minus_flux[..., 1:] += corr_m[..., None] * n
        else:
            alpha = np.maximum(max_wave_speed(up, php, n, g),
                               max_wave_speed(um, phm, n, g))
            fhat = lax_friedrichs(up, um, n, alpha, php, phm, g, dry_tol=1e-13)
            plus_flux = minus_flux = fhat

        # SIP penalty/consistency on Uhat
        uhp, guhp = self.uhat_and_grad(0, idx, up, gup_all[idx])
        uhm, guhm = self.uhat_and_grad(1, idx, um, gum_all[idx])
        gdp = self.g_diag_facet(0, idx)
        gdm = self.g_diag_facet(1, idx)
        jump = uhp - uhm                                 # (f, nfq, ncomp)
        gavg = 0.5 * (gdp + gdm)
        gam = self.gamma_f[idx][:, None, None]
        flux_avg = 0.5 * ((gdp[..., None] * guhp * n[:, :, None, :]).sum(-1)
                          + (gdm[..., None] * guhm * n[:, :, None, :]).sum(-1))
        sip = gam * gavg * jump - flux_avg

        plus_term = np.zeros_like(up_all)
        minus_term = np.zeros_like(up_all)
        plus_term[idx] = w * (plus_flux + sip)
        minus_term[idx] = -w * (minus_flux + sip)
        s.scatter_facet(out, plus_term, minus_term)

        # symmetry term, tested with the gradient trace of the basis
        sym_p = np.zeros(up_all.shape + (mesh.dim,))
        sym_m = np.zeros_like(sym_p)
        sym_p[idx] = (-0.5 * w * gdp * jump)[..., None] * n[:, :, None, :]
        sym_m[idx] = (-0.5 * w * gdm * jump)[..., None] * n[:, :, None, :]
        s.scatter_facet_grad(out, sym_p, sym_m)

    def _boundary_terms(self, out, up_all, gup_all, g):
        s = self.space
        mesh = self.mesh
        plus_term = np.zeros_like(up_all)
        sym_term = None
        for kind, idx in self.bdry_groups.items():
            if idx.size == 0:
                continue
            n = mesh.facet_normal[idx][:, None, :]
            w = s.fwphys[idx]
            up = up_all[idx]
            self.check_wet(up[..., 0])
            php = self.phi_f[0][idx]
            zp = self.z_f[0][idx]
            ug = ghost_state(up, kind, n, php, self.bc, zp)
            fp = advective_flux(up, php, g)
            fg = advective_flux(ug, php, g)
            fhat = 0.5 * ((fp * n[:, :, None, :]).sum(-1)
                          + (fg * n[:, :, None, :]).sum(-1))
            term = w[:, :, None] * fhat
            if kind == "open_sea":
                # Nitsche imposition of the prescribed Uhat_0 = z + H_G for
                # the continuity diffusion; momentum components are Neumann.
                uh0 = zp + up[..., 0] / php
                uh0g = zp + self.bc.h1 if self.bc.open_sea_mode == "depth" \
                    else np.full_like(zp, self.bc.h1)
                diff = uh0 - uh0g
                cells = mesh.facet_cells[idx, 0]
                g00 = self.mu_v[cells][:, None]
                guh0 = ((gup_all[idx][..., 0, :] * php[..., None]
                         - up[..., 0:1] * self.gphi_f[0][idx])
                        / (php ** 2)[..., None] + self.gz_f[0][idx])
                gam = self.gamma_f[idx][:, None]
                term[..., 0] += w * (gam * g00 * diff
                                     - g00 * (guh0 * n).sum(-1))
                if sym_term is None:
                    sym_term = np.zeros(up_all.shape + (mesh.dim,))
                block = np.zeros(up.shape + (mesh.dim,))
                block[..., 0, :] = (-w * g00 * diff)[..., None] * n
                sym_term[idx] = block
            plus_term[idx] = term
        s.scatter_facet(out, plus_term, None)
        if sym_term is not None:
            s.scatter_facet_grad(out, sym_term, None)


# ---------------------------------------------------------------------------
# time integration


@dataclass
class Trajectory:
    """Time-indexed forward states and the frozen per-step viscosities."""

    times: np.ndarray
    states: list
    mu_v: list
    stride: int = 1

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def state(self, n: int) -> np.ndarray:
        """State at time node n (linear interpolation for strided storage)."""
        if self.stride == 1:
            return self.states[n]
        lo, r = divmod(n, self.stride)
        lo = min(lo, len(self.states) - 1)
        if r == 0 or lo + 1 >= len(self.states):
            return self.states[lo]
        return (1.0 - r / self.stride) * self.states[lo] \
            + (r / self.stride) * self.states[lo + 1]

    def mu_for_step(self, n: int) -> np.ndarray:
        """Viscosity frozen over the step ending at node n (n in 1..n_steps)."""
        if self.stride == 1:
            return self.mu_v[n - 1]
        return self.mu_v[min((n - 1) // self.stride, len(self.mu_v) - 1)]


@dataclass
class TimeParams:
    dt: float
    t_end: float
    theta: float = 1.0
    store_stride: int = 1
    newton_rtol: float = 1e-10
    newton_atol: float = 1e-12
    max_newton: int = 50


def run_forward(problem: ForwardProblem, u0: np.ndarray, tp: TimeParams,
                callback=None) -> Trajectory:
    """March the theta-method from u0 over [0, t_end]; returns the trajectory."""
    s = problem.space
    n_steps = int(round(tp.t_end / tp.dt))
    if n_steps < 1 or abs(n_steps * tp.dt - tp.t_end) > 1e-12 * max(1.0, tp.t_end):
        raise ValueError("dt must divide t_end")
    mass = s.mass_diagonal()
    lagged = LaggedJacobian(problem.mesh, s.nb * s.ncomp)
    u = u0.reshape(s.shape).copy()
    times = [0.0]
    states = [u.copy()]
    mus = []

    def flat_residual(x):
        return problem.residual(x.reshape(s.shape)).ravel()

    for n in range(1, n_steps + 1):
        mu = shock_viscosity(s, u, problem.visc)
        problem.set_mu_v(mu)
        if tp.store_stride == 1 or (n - 1) % tp.store_stride == 0:
            mus.append(mu)
        try:
            unew = theta_step(flat_residual, u.ravel(), tp.dt, tp.theta, mass,
                              lagged=lagged, newton_rtol=tp.newton_rtol,
                              newton_atol=tp.newton_atol, max_newton=tp.max_newton)
        except Exception as exc:
            raise SolverError(f"step {n} (t={n * tp.dt:.6g}) failed: {exc}") from exc
        u = unew.reshape(s.shape)
        times.append(n * tp.dt)
        if tp.store_stride == 1 or n % tp.store_stride == 0 or n == n_steps:
            states.append(u.copy())
        if callback is not None:
            callback(n, n * tp.dt, u)
    return Trajectory(np.asarray(times), states, mus, stride=tp.store_stride)


def rest_state(space: DGSpace, materials: MaterialFields, level: float) -> np.ndarray:
    """Lake-at-rest coefficients: h = phi*(C - z), zero momentum."""
    scalar = DGSpace(space.mesh, space.degree, 1)
    phi = scalar.eval_cells(materials.phi.coef)[:, :, 0]
    z = scalar.eval_cells(materials.z.coef)[:, :, 0]
    h = phi * (level - z)
    if np.any(h <= 0.0):
        raise ValueError("rest level leaves dry cells")
    coef = space.zeros()
    coef[:, :, 0] = np.einsum("q,qk,cq->ck", space.qw_ref, space.vol_basis, h)
    return coef


def total_mass(space: DGSpace, coef) -> float:
    u = space.eval_cells(coef)
    return float(np.einsum("cq,cq->", space.wdetJ, u[..., 0]))


def energy_proxy(space: DGSpace, coef, phi_q, g) -> float:
    u = space.eval_cells(coef)
    h = u[..., 0]
    kin = 0.5 * np.sum(u[..., 1:] ** 2, axis=-1) / np.maximum(h, 1e-14)
    pot = 0.5 * g * h * h / phi_q
    return float(np.einsum("cq,cq->", space.wdetJ, kin + pot))
