"""Scenario runners: translate a RunConfig into solver runs and artifacts
(CSV histories, VTK dumps, resolved-config echo, machine-readable summary)."""

from __future__ import annotations

import csv
import json
import os
import time

import numpy as np

from .adjoint import TrackingTarget, run_adjoint
from .config import RunConfig, echo_config
from .dg import DGField, DGSpace
from .expressions import Expression, evaluate_on_points
from .forward import (BoundaryData, ForwardProblem, MaterialFields, TimeParams,
                      ViscosityParams, energy_proxy, rest_state, run_forward,
                      total_mass)
from .gmsh_io import load_msh
from .mesh import (REGION_OBSTACLE, TAG_OPEN_SEA, TAG_SHORE, apply_displacement,
                   build_half_circle, build_interval, validate_mesh)
from .objective import (ObjectiveWeights, eval_J1, eval_J2, eval_J3, eval_J4,
                        gamma3_support_vertices, solve_eikonal)
from .optimize import OptimizationConfig, ShapeProblem, optimize
from .smoothing import StudyConfig, run_convergence_study
from .vtk_io import write_vtk

FMT = "%.17g"


def _writerow(writer, values):
    writer.writerow([FMT % v if isinstance(v, float) else v for v in values])


def build_mesh_from_config(cfg: RunConfig):
    m = cfg.mesh
    if m.source == "half_circle":
        return build_half_circle(m.radius, (m.obstacle_x, m.obstacle_y),
                                 m.obstacle_radius, m.target_h,
                                 gamma3_refine=m.gamma3_refine)
    if m.source == "interval":
        return build_interval(m.n_cells, m.length)
    return load_msh(m.path)


def build_shape_problem(cfg: RunConfig, mesh=None) -> ShapeProblem:
    mesh = mesh if mesh is not None else build_mesh_from_config(cfg)
    p = cfg.physics
    d = cfg.discretization
    scalar = DGSpace(mesh, d.p_dg, 1)
    space = DGSpace(mesh, d.p_dg, mesh.dim + 1)
    zx = Expression(p.z_expr)
    z_coef = scalar.project(lambda x: evaluate_on_points(zx, x)[..., None])
    phi_coef = scalar.project(lambda x: np.ones(x.shape[:-1])[..., None])
    phi_cells = np.where(mesh.region == REGION_OBSTACLE, p.phi2, p.phi1)
    phi_coef[:, 0, 0] *= phi_cells
    phi_q = scalar.eval_cells(phi_coef)[:, :, 0]
    z_q = scalar.eval_cells(z_coef)[:, :, 0]
    eta0 = Expression(p.eta0_expr)
    qx0 = Expression(p.qx0_expr)
    u0 = space.zeros()
    h_phys = evaluate_on_points(eta0, space.qpoints) - z_q
    u0[:, :, 0] = np.einsum("q,qk,cq->ck", space.qw_ref, space.vol_basis,
                            phi_q * h_phys)
    u0[:, :, 1] = np.einsum("q,qk,cq->ck", space.qw_ref, space.vol_basis,
                            phi_q * evaluate_on_points(qx0, space.qpoints))
    if mesh.dim == 2:
        qy0 = Expression(p.qy0_expr)
        u0[:, :, 2] = np.einsum("q,qk,cq->ck", space.qw_ref, space.vol_basis,
                                phi_q * evaluate_on_points(qy0, space.qpoints))
    s0 = None if np.isnan(p.detector_s0) else p.detector_s0
    visc = ViscosityParams(mu_f=p.mu_f, s0=s0, kappa_s=p.detector_kappa,
                           mu_max=p.detector_mu_max, detect=p.detector)
    kinds = {TAG_SHORE: "wall",
             TAG_OPEN_SEA: "wall" if p.open_sea_as_wall else "open_sea"}
    bc = BoundaryData(h1=p.h1, kinds=kinds, open_sea_mode=p.open_sea_mode)
    o = cfg.objective
    target = TrackingTarget(eta_bar=o.eta_bar, q_bar=(o.qx_bar, o.qy_bar),
                            weights=(o.n11, o.n22, o.n33))
    weights = ObjectiveWeights(weights=(o.n11, o.n22, o.n33), nu2=o.nu2,
                               nu3=o.nu3, nu4=o.nu4, d_min=o.d_min)
    tp = TimeParams(dt=d.dt, t_end=d.t_end, theta=d.theta,
                    store_stride=d.store_stride, newton_rtol=d.newton_rtol,
                    newton_atol=d.newton_atol)
    return ShapeProblem(mesh, phi_coef, z_coef, u0, p_dg=d.p_dg, g=p.g,
                        c_ip=d.c_ip, visc=visc, bc=bc, target=target,
                        weights=weights, tp=tp)


def _prepare_out(cfg: RunConfig):
    out = cfg.output.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config.ini"), "w") as fh:
        fh.write(echo_config(cfg))
    return out


def _dump_state_vtk(prob: ForwardProblem, coef, path):
    s = prob.space
    u = s.cell_mean(coef)
    phi = prob.mat.phi_cell
    h = u[:, 0]
    data = {"H": h / phi, "phi": phi,
            "z": prob.scalar.cell_mean(prob.mat.z.coef)[:, 0],
            "mu_v": prob.mu_v}
    vel = u[:, 1:] / np.maximum(h[:, None], 1e-14)
    data["u"] = vel if vel.shape[1] == 2 else np.column_stack([vel, 0 * vel])
    write_vtk(s.mesh, path, cell_data=data)


def run_forward_scenario(cfg: RunConfig):
    out = _prepare_out(cfg)
    problem = build_shape_problem(cfg)
    prob = problem.build_problem(problem.mesh0)
    t0 = time.time()
    rows = []
    stride = max(cfg.output.csv_stride, 1)
    vtk_stride = cfg.output.vtk_stride

    def cb(n, t, u):
        if n % stride == 0:
            s = prob.space
            uu = s.eval_cells(u)
            vel = np.abs(uu[..., 1:] / uu[..., 0:1]).max()
            rows.append((t, total_mass(s, u),
                         energy_proxy(s, u, prob.phi_q, prob.mat.g), float(vel)))
        if vtk_stride and n % vtk_stride == 0:
            _dump_state_vtk(prob, u, os.path.join(out, f"state_{n:06d}.vtk"))

    cb(0, 0.0, problem.u0_coef)
    traj = run_forward(prob, problem.u0_coef, problem.tp, callback=cb)
    wall = time.time() - t0
    with open(os.path.join(out, "series.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mass", "energy", "max_velocity"])
        for r in rows:
            _writerow(w, r)
    _dump_state_vtk(prob, traj.states[-1], os.path.join(out, "state_final.vtk"))
    summary = {"scenario": "forward", "steps": traj.n_steps, "wall_time": wall,
               "final_mass": rows[-1][1] if rows else None}
    _write_summary(out, summary)
    return 0, summary


def run_adjoint_scenario(cfg: RunConfig):
    out = _prepare_out(cfg)
    problem = build_shape_problem(cfg)
    prob = problem.build_problem(problem.mesh0)
    t0 = time.time()
    traj = run_forward(prob, problem.u0_coef, problem.tp)
    adj = run_adjoint(prob, traj, problem.target, problem.tp)
    wall = time.time() - t0
    s = prob.space
    with open(os.path.join(out, "adjoint_norms.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "norm_p", "norm_r"])
        for n in range(1, traj.n_steps + 1):
            p = adj.states[n]
            pq = s.eval_cells(p)
            _writerow(w, (traj.times[n],
                          float(np.sqrt(np.einsum("cq,cq->", s.wdetJ, pq[..., 0] ** 2))),
                          float(np.sqrt(np.einsum("cq,cqn->", s.wdetJ, pq[..., 1:] ** 2)))))
    pq = s.cell_mean(adj.states[1])
    write_vtk(s.mesh, os.path.join(out, "adjoint_final.vtk"),
              cell_data={"p": pq[:, 0], "r": pq[:, 1:]})
    j1 = eval_J1(prob, traj, problem.target)
    summary = {"scenario": "adjoint", "J1": j1, "wall_time": wall}
    _write_summary(out, summary)
    return 0, summary


def run_wellbalance_scenario(cfg: RunConfig):
    out = _prepare_out(cfg)
    wb = cfg.wellbalance
    results = {}
    dims = (1, 2) if wb.dim == 0 else (wb.dim,)
    for dim in dims:
        if dim == 1:
            mesh = build_interval(wb.n_cells, 1.0)
            zf = lambda x: np.where(x[..., 0] > wb.z_step_at, wb.z_step, 0.0)[..., None]
            pf = lambda x: np.where((x[..., 0] > wb.phi_from) & (x[..., 0] < wb.phi_to),
                                    wb.phi_low, 1.0)[..., None]
            kinds = {TAG_SHORE: "wall"}
        else:
            m = cfg.mesh
            mesh = build_half_circle(m.radius, (m.obstacle_x, m.obstacle_y),
                                     m.obstacle_radius, max(m.target_h, 0.3),
                                     gamma3_refine=m.gamma3_refine)
            zx = Expression(cfg.physics.z_expr)
            zf = lambda x: evaluate_on_points(zx, x)[..., None]
            phl = np.where(mesh.region == REGION_OBSTACLE, cfg.physics.phi2,
                           cfg.physics.phi1)
            pf = None
            kinds = {TAG_SHORE: "wall", TAG_OPEN_SEA: "wall"}
        d = cfg.discretization
        scalar = DGSpace(mesh, d.p_dg, 1)
        space = DGSpace(mesh, d.p_dg, mesh.dim + 1)
        z = DGField(scalar, scalar.project(zf))
        phic = scalar.project(lambda x: np.ones(x.shape[:-1])[..., None])
        if dim == 1:
            phic = scalar.project(pf)
        else:
            phic[:, 0, 0] *= phl
        mat = MaterialFields(phi=DGField(scalar, phic), z=z, g=cfg.physics.g)
        visc = ViscosityParams(mu_f=cfg.physics.mu_f)
        prob = ForwardProblem(space, mat, visc, BoundaryData(kinds=kinds),
                              c_ip=d.c_ip)
        u0 = rest_state(space, mat, wb.rest_level)
        tp = TimeParams(dt=wb.dt, t_end=wb.t_end, theta=d.theta)
        worst = [0.0, 0.0]

        def cb(n, t, u):
            uu = space.eval_cells(u)
            worst[0] = max(worst[0], float(np.abs(uu[..., 1:]).max()))
            worst[1] = max(worst[1], float(
                np.abs(uu[..., 0] / prob.phi_q + prob.z_q - wb.rest_level).max()))

        run_forward(prob, u0, tp, callback=cb)
        results[f"{dim}d"] = {"max_uh": worst[0], "max_surface_drift": worst[1]}
        print(f"[wellbalance {dim}D] max|uh| = {worst[0]:.3e}, "
              f"max|h/phi+z-C| = {worst[1]:.3e}")
    ok = all(v["max_uh"] <= wb.tol and v["max_surface_drift"] <= wb.tol
             for v in results.values())
    summary = {"scenario": "wellbalance-check", "tol": wb.tol, "pass": ok,
               **results}
    _write_summary(out, summary)
    return (0 if ok else 1), summary


def run_smoothing_scenario(cfg: RunConfig, max_workers: int = 1):
    out = _prepare_out(cfg)
    sm = cfg.smoothing
    alphas = tuple(float(a) for a in sm.alphas.split(","))
    study = StudyConfig(alphas=alphas, n_cells=sm.n_cells, t_end=sm.t_end,
                        dt=sm.dt, x0=sm.x0, x1=sm.x1, phi2=sm.phi2,
                        mu_f=cfg.physics.mu_f, p_dg=cfg.discretization.p_dg,
                        c_ip=cfg.discretization.c_ip,
                        theta=cfg.discretization.theta, g=cfg.physics.g)
    t0 = time.time()
    rows = run_convergence_study(study, max_workers=max_workers)
    wall = time.time() - t0
    with open(os.path.join(out, "smoothing_table.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "E_H", "E_uH", "E_H_cellavg", "E_uH_cellavg"])
        for r in rows:
            _writerow(w, (r.alpha, r.e_h, r.e_uh, r.e_h_cellavg, r.e_uh_cellavg))
    eh = [r.e_h for r in rows]
    euh = [r.e_uh for r in rows]
    for r in rows:
        print(f"[smoothing] alpha={r.alpha:<8g} E_H={r.e_h:.6f} E_uH={r.e_uh:.6f}")
    summary = {"scenario": "smoothing-study", "alphas": list(alphas),
               "E_H": eh, "E_uH": euh,
               "monotone": bool(all(a > b for a, b in zip(eh, eh[1:]))),
               "wall_time": wall}
    _write_summary(out, summary)
    return 0, summary


def gradient_check_directions(mesh, n_directions, seed):
    """Random admissible fields on the Gamma_3-adjacent vertex band."""
    rng = np.random.default_rng(seed)
    keep = np.setdiff1d(gamma3_support_vertices(mesh),
                        mesh.vertices_on_tag((1, 2)))
    out = []
    for _ in range(n_directions):
        v = np.zeros((mesh.n_vertices, 2))
        v[keep] = rng.uniform(-1.0, 1.0, (keep.size, 2))
        out.append(v)
    return out


def run_gradient_check_scenario(cfg: RunConfig):
    out = _prepare_out(cfg)
    gc = cfg.gradient_check
    local = RunConfig()
    local.mesh = cfg.mesh
    local.mesh.target_h = gc.target_h
    local.mesh.gamma3_refine = gc.gamma3_refine
    local.physics = cfg.physics
    local.physics.mu_f = gc.mu_f
    local.physics.detector = False
    local.physics.eta0_expr = (f"1 + {gc.amplitude}*exp(-8*(x-{cfg.mesh.obstacle_x})^2"
                               f" - 12*(y-{gc.center_y})^2)")
    local.discretization = cfg.discretization
    local.discretization.dt = gc.dt
    local.discretization.t_end = gc.t_end
    local.objective = cfg.objective
    problem = build_shape_problem(local)
    mesh = problem.mesh0
    t0 = time.time()
    ev = problem.evaluate(mesh)
    grad = problem.gradient(mesh, ev)
    eps_list = [float(e) for e in gc.eps_list.split(",")]
    rows = []
    ok = True
    for i, v in enumerate(gradient_check_directions(mesh, gc.n_directions, gc.seed)):
        dj = grad.pair(v)
        errs = []
        for eps in eps_list:
            jp = problem.evaluate(apply_displacement(mesh, v, +eps)).J
            jm = problem.evaluate(apply_displacement(mesh, v, -eps)).J
            fd = (jp - jm) / (2.0 * eps)
            rel = abs(dj - fd) / max(abs(fd), 1e-30)
            errs.append((eps, fd, rel))
            rows.append((i, eps, dj, fd, rel))
        print(f"[gradient-check] V{i}: DJ={dj:+.8e} " +
              " ".join(f"FD({e:g})={fd:+.8e} rel={r:.3e}" for e, fd, r in errs))
        ok &= errs[-1][2] <= gc.tol
    # exact dilation identity for the volume penalty
    from .objective import assemble_DJ2
    vdil = mesh.vertices.copy()
    dj2 = float(np.sum(assemble_DJ2(mesh, cfg.objective.nu2) * vdil))
    area = float(mesh.cell_volume[mesh.region == REGION_OBSTACLE].sum())
    dil_err = abs(dj2 - 2.0 * cfg.objective.nu2 * area)
    print(f"[gradient-check] DJ2 dilation: {dj2:.12e} vs {2*cfg.objective.nu2*area:.12e} "
          f"(diff {dil_err:.2e})")
    ok &= dil_err <= 1e-10
    with open(os.path.join(out, "gradient_check.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["direction", "eps", "DJ", "FD", "rel_err"])
        for r in rows:
            _writerow(w, r)
    summary = {"scenario": "gradient-check", "pass": bool(ok),
               "tol": gc.tol, "dj2_dilation_error": dil_err,
               "wall_time": time.time() - t0}
    _write_summary(out, summary)
    return (0 if ok else 1), summary


def run_optimize_scenario(cfg: RunConfig):
    out = _prepare_out(cfg)
    problem = build_shape_problem(cfg)
    o = cfg.optimizer
    ocfg = OptimizationConfig(rho0=o.rho0, shrink=o.shrink,
                              max_iterations=o.max_iterations, tol=o.tol,
                              max_trials=o.max_trials, mu_min=o.mu_min,
                              mu_max=o.mu_max)
    t0 = time.time()
    fh = open(os.path.join(out, "history.csv"), "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["iteration", "J", "J1", "J2", "J3", "J4", "grad_norm",
                     "step", "trials", "wall_time"])

    vtk_stride = cfg.output.vtk_stride

    def cb(rec):
        _writerow(writer, (rec.iteration, rec.J, rec.J1, rec.J2, rec.J3,
                           rec.J4, rec.grad_norm, rec.step, rec.trials,
                           rec.wall_time))
        fh.flush()
        print(f"[optimize] it={rec.iteration:3d} J={rec.J:.9f} "
              f"|DJ|={rec.grad_norm:.3e} step={rec.step:g} trials={rec.trials}")
        if vtk_stride and rec.iteration % vtk_stride == 0:
            write_vtk(rec.mesh, os.path.join(out, f"mesh_{rec.iteration:04d}.vtk"),
                      cell_data={"region": rec.mesh.region.astype(float)})

    records = optimize(problem, ocfg, callback=cb)
    fh.close()
    wall = time.time() - t0
    from .gmsh_io import write_msh
    write_msh(records[-1].mesh, os.path.join(out, "mesh_final.msh"))
    js = [r.J for r in records]
    summary = {"scenario": "optimize", "iterations": len(records) - 1,
               "J_initial": js[0], "J_final": js[-1],
               "relative_decrease": (js[0] - js[-1]) / js[0],
               "monotone": bool(all(a > b for a, b in zip(js, js[1:]))),
               "wall_time": wall}
    _write_summary(out, summary)
    return 0, summary


def _write_summary(out, summary):
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)


SCENARIOS = {
    "forward": run_forward_scenario,
    "adjoint": run_adjoint_scenario,
    "optimize": run_optimize_scenario,
    "wellbalance-check": run_wellbalance_scenario,
    "smoothing-study": run_smoothing_scenario,
    "gradient-check": run_gradient_check_scenario,
}
