"""Outer gradient-descent shape-optimization loop with backtracking line
search, plus the shared evaluate/gradient pipeline used by the optimizer, the
gradient-check scenario and the acceptance tests.

All material and state data (porosity, sediment, initial condition) are DG
coefficient arrays fixed once on the initial mesh; they ride along with every
deformation (material transport), which is what the volume-form shape
derivative assumes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adjoint import TrackingTarget, run_adjoint
from .dg import DGField, DGSpace
from .elasticity import solve_elasticity, solve_lame_mu
from .forward import (BoundaryData, ForwardProblem, MaterialFields, TimeParams,
                      ViscosityParams, run_forward)
from .mesh import Mesh, apply_displacement, validate_mesh
from .objective import (ObjectiveWeights, ShapeGradientAssembly, eval_J1,
                        eval_J2, eval_J3, eval_J4, solve_eikonal,
                        total_shape_derivative)


@dataclass
class OptimizationConfig:
    rho0: float = 1.5
    shrink: float = 0.5
    max_iterations: int = 25
    tol: float = 1e-6
    max_trials: int = 20
    mu_min: float = 10.0
    mu_max: float = 100.0

    def __post_init__(self):
        if self.rho0 <= 0.0 or not 0.0 < self.shrink < 1.0 or self.tol <= 0.0:
            raise ValueError("invalid optimizer parameters")


@dataclass
class Evaluation:
    J: float
    parts: dict
    traj: object
    prob: ForwardProblem
    sdf: object


@dataclass
class IterationRecord:
    iteration: int
    J: float
    J1: float
    J2: float
    J3: float
    J4: float
    grad_norm: float
    step: float
    trials: int
    mesh: Mesh
    wall_time: float


class ShapeProblem:
    """Couples the frozen material/IC coefficients with a deformable mesh."""

    def __init__(self, mesh: Mesh, phi_coef, z_coef, u0_coef, *,
                 p_dg: int = 1, g: float = 9.81, c_ip: float = 20.0,
                 visc: ViscosityParams | None = None,
                 bc: BoundaryData | None = None,
                 target: TrackingTarget | None = None,
                 weights: ObjectiveWeights | None = None,
                 tp: TimeParams | None = None,
                 well_balanced: bool = True):
        self.mesh0 = mesh
        self.phi_coef = phi_coef
        self.z_coef = z_coef
        self.u0_coef = u0_coef
        self.p_dg = p_dg
        self.g = g
        self.c_ip = c_ip
        self.visc = visc or ViscosityParams()
        self.bc = bc or BoundaryData()
        self.target = target or TrackingTarget()
        self.weights = weights or ObjectiveWeights()
        self.tp = tp or TimeParams(dt=2e-3, t_end=2.0)
        self.well_balanced = well_balanced

    def build_problem(self, mesh: Mesh) -> ForwardProblem:
        space = DGSpace(mesh, self.p_dg, mesh.dim + 1)
        scalar = DGSpace(mesh, self.p_dg, 1)
        mat = MaterialFields(phi=DGField(scalar, self.phi_coef),
                             z=DGField(scalar, self.z_coef), g=self.g)
        return ForwardProblem(space, mat, self.visc, self.bc, c_ip=self.c_ip,
                              well_balanced=self.well_balanced)

    def evaluate(self, mesh: Mesh) -> Evaluation:
        prob = self.build_problem(mesh)
        traj = run_forward(prob, self.u0_coef, self.tp)
        sdf = solve_eikonal(mesh)
        j1 = eval_J1(prob, traj, self.target)
        j2 = eval_J2(mesh, self.weights.nu2)
        j3 = eval_J3(mesh, self.weights.nu3)
        j4 = eval_J4(mesh, sdf, self.weights.nu4, self.weights.d_min)
        parts = {"J1": j1, "J2": j2, "J3": j3, "J4": j4}
        return Evaluation(j1 + j2 + j3 + j4, parts, traj, prob, sdf)

    def gradient(self, mesh: Mesh, ev: Evaluation) -> ShapeGradientAssembly:
        adj = run_adjoint(ev.prob, ev.traj, self.target, self.tp)
        return total_shape_derivative(ev.prob, ev.traj, adj, ev.sdf,
                                      self.weights)


def line_search(problem: ShapeProblem, mesh: Mesh, w_desc: np.ndarray,
                rho0: float, j_current: float, shrink: float = 0.5,
                max_trials: int = 20):
    """Backtracking on rho: reject invalid meshes and non-decreasing J.

    Returns (rho, deformed mesh, Evaluation) of the first accepted trial.
    """
    rho = rho0
    for k in range(max_trials):
        trial = apply_displacement(mesh, w_desc, rho)
        if validate_mesh(trial).valid:
            try:
                ev = problem.evaluate(trial)
            except Exception:
                ev = None
            if ev is not None and ev.J < j_current:
                return rho, trial, ev, k + 1
        rho *= shrink
    raise LineSearchFailure(f"no acceptable step after {max_trials} trials")


class LineSearchFailure(Exception):
    pass


def optimize(problem: ShapeProblem, cfg: OptimizationConfig,
             callback=None) -> list[IterationRecord]:
    """Algorithm: SDF -> state -> adjoint -> gradient -> elasticity ->
    line search -> deform, until the gradient norm drops below tol."""
    mesh = problem.mesh0
    t0 = time.time()
    ev = problem.evaluate(mesh)
    records: list[IterationRecord] = []

    for it in range(cfg.max_iterations + 1):
        grad = problem.gradient(mesh, ev)
        mu = solve_lame_mu(mesh, cfg.mu_min, cfg.mu_max)
        w, energy = solve_elasticity(mesh, mu, grad.rhs)
        grad_norm = float(np.sqrt(max(energy, 0.0)))
        rec = IterationRecord(iteration=it, J=ev.J, grad_norm=grad_norm,
                              step=0.0, trials=0, mesh=mesh,
                              wall_time=time.time() - t0, **ev.parts)
        records.append(rec)
        if callback is not None:
            callback(rec)
        if it >= cfg.max_iterations or grad_norm <= cfg.tol:
            break
        try:
            rho, mesh, ev, trials = line_search(problem, mesh, -w, cfg.rho0,
                                                ev.J, cfg.shrink,
                                                cfg.max_trials)
        except LineSearchFailure:
            break
        rec.step = rho
        rec.trials = trials
    return records
