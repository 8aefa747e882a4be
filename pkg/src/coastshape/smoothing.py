"""One-dimensional smoothed-porosity convergence study: sharp-interface
(well-balanced) solutions against smoothed-porosity solutions of the plain
scheme, with space-time L2 error norms."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dg import DGField, DGSpace
from .forward import (BoundaryData, ForwardProblem, MaterialFields, TimeParams,
                      ViscosityParams, run_forward)
from .mesh import TAG_SHORE, build_interval


@dataclass
class SmoothedPorosity:
    alpha: float
    x0: float = 0.038
    x1: float = 0.18
    phi2: float = 0.4

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if not self.x0 < self.x1:
            raise ValueError("need x0 < x1")
        if self.alpha >= 0.5 * (self.x1 - self.x0):
            raise ValueError("transition zones must not overlap")
        if not 0.0 < self.phi2 <= 1.0:
            raise ValueError("phi2 must lie in (0, 1]")


def psi_blend(x, x0, x1, alpha):
    """Four-branch C1 cubic step: 1 outside [x0, x1], 0 well inside."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    inside = (x >= x0 + alpha) & (x <= x1 - alpha)
    out[inside] = 0.0

    def ramp(t):
        return -0.25 * t ** 3 + 0.75 * t + 0.5

    left = (x > x0 - alpha) & (x < x0 + alpha)
    out[left] = ramp((x0 - x[left]) / alpha)
    right = (x > x1 - alpha) & (x < x1 + alpha)
    out[right] = 1.0 - ramp((x1 - x[right]) / alpha)
    return out


def eval_phi_alpha(x, params: SmoothedPorosity):
    """phi_alpha = (1 - psi) phi2 + psi."""
    psi = psi_blend(x, params.x0, params.x1, params.alpha)
    return (1.0 - psi) * params.phi2 + psi


def phi_sharp(x, params: SmoothedPorosity):
    x = np.asarray(x, dtype=float)
    return np.where((x > params.x0) & (x < params.x1), params.phi2, 1.0)


@dataclass
class ErrorNorms:
    alpha: float
    e_h: float
    e_uh: float
    e_h_cellavg: float
    e_uh_cellavg: float


@dataclass
class StudyConfig:
    alphas: tuple = (0.06, 0.04, 0.03, 0.02, 0.01, 0.005, 0.001)
    n_cells: int = 1000
    length: float = 1.0
    t_end: float = 0.4
    dt: float = 1e-3
    phi2: float = 0.4
    x0: float = 0.038
    x1: float = 0.18
    mu_f: float = 1e-2
    p_dg: int = 1
    c_ip: float = 20.0
    theta: float = 1.0
    g: float = 9.81
    amplitude: float = 0.3
    center: float = 0.5
    width: float = 100.0


def _run_1d(cfg: StudyConfig, phi_func, well_balanced):
    mesh = build_interval(cfg.n_cells, cfg.length)
    space = DGSpace(mesh, cfg.p_dg, 2)
    scalar = DGSpace(mesh, cfg.p_dg, 1)
    z = DGField(scalar, np.zeros(scalar.shape))
    phi = DGField(scalar, scalar.project(lambda x: phi_func(x[..., 0])[..., None]))
    mat = MaterialFields(phi=phi, z=z, g=cfg.g)
    prob = ForwardProblem(space, mat, ViscosityParams(mu_f=cfg.mu_f),
                          BoundaryData(kinds={TAG_SHORE: "wall"}), c_ip=cfg.c_ip,
                          well_balanced=well_balanced)
    h0 = lambda x: 1.0 + cfg.amplitude * np.exp(-cfg.width * (x - cfg.center) ** 2)
    u0 = space.zeros()
    u0[:, :, 0] = np.einsum("q,qk,cq->ck", space.qw_ref, space.vol_basis,
                            prob.phi_q * h0(space.qpoints[..., 0]))
    tp = TimeParams(dt=cfg.dt, t_end=cfg.t_end, theta=cfg.theta)
    traj = run_forward(prob, u0, tp)
    return prob, traj


def _error_norms(prob_a, traj_a, prob_b, traj_b, cfg, alpha):
    """Space-time L2 of the physical H and uH differences, plus a per-cell
    (cell-average) variant."""
    space = prob_a.space
    dt = cfg.dt
    acc = np.zeros(2)
    acc_avg = np.zeros(2)
    wq = space.qw_ref / space.qw_ref.sum()
    for n in range(1, traj_a.n_steps + 1):
        ua = space.eval_cells(traj_a.state(n)) / prob_a.phi_q[..., None]
        ub = space.eval_cells(traj_b.state(n)) / prob_b.phi_q[..., None]
        d2 = (ua - ub) ** 2
        acc += dt * np.einsum("cq,cqn->n", space.wdetJ, d2)
        da = np.einsum("q,cqn->cn", wq, ua) - np.einsum("q,cqn->cn", wq, ub)
        acc_avg += dt * np.einsum("c,cn->n", space.detJ, da ** 2)
    return ErrorNorms(alpha, float(np.sqrt(acc[0])), float(np.sqrt(acc[1])),
                      float(np.sqrt(acc_avg[0])), float(np.sqrt(acc_avg[1])))


def run_convergence_study(cfg: StudyConfig, max_workers: int = 1):
    """Sharp well-balanced run against smoothed plain-scheme runs per alpha."""
    params0 = SmoothedPorosity(alpha=min(cfg.alphas), x0=cfg.x0, x1=cfg.x1,
                               phi2=cfg.phi2)
    prob_sharp, traj_sharp = _run_1d(
        cfg, lambda x: phi_sharp(x, params0), well_balanced=True)

    def one(alpha):
        par = SmoothedPorosity(alpha=alpha, x0=cfg.x0, x1=cfg.x1, phi2=cfg.phi2)
        prob_a, traj_a = _run_1d(cfg, lambda x: eval_phi_alpha(x, par),
                                 well_balanced=False)
        return _error_norms(prob_sharp, traj_sharp, prob_a, traj_a, cfg, alpha)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            rows = list(ex.map(one, cfg.alphas))
    else:
        rows = [one(a) for a in cfg.alphas]
    return rows
