"""Experiment orchestration: configuration to finished run.

Builds the discrete problem from a configuration and a mesh, drives the
adaptive time loop, and writes VTU frames, the summary CSV, the
line-delimited solver log, and optional checkpoints.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import constitutive as co
from . import msh
from .config import SimulationConfig
from .fem import FemProblem, LoadProgram, MicroBoundaryCondition
from .microstructure import PolyMesh, build_grain_regions, duplicate_grain_boundary_nodes
from .output import (
    OutputFrame,
    SummaryWriter,
    load_checkpoint,
    save_checkpoint,
    write_vtu,
)
from .solver import (
    RefinementExhausted,
    SolverLog,
    StaggeredConfig,
    StepFailure,
    TimeStepper,
    staggered_step,
    tolerance_table,
)

log = logging.getLogger("polyfrac")

STATUS_COMPLETED = "completed"
STATUS_MAX_STEPS = "max_steps"
STATUS_REFINEMENT_EXHAUSTED = "refinement_exhausted"


@dataclass
class RunResult:
    status: str
    steps_accepted: int
    time: float
    frames_written: int
    output_dir: str


def build_problem(cfg: SimulationConfig, mesh: PolyMesh | None = None) -> FemProblem:
    """Assemble the FemProblem described by a configuration."""
    if mesh is None:
        with open(cfg.mesh, "rb") as fh:
            mesh = msh.load_mesh(fh.read())
    params = cfg.material_params()
    dup, constraints = duplicate_grain_boundary_nodes(mesh)
    regions = build_grain_regions(dup, cfg.rodrigues, cfg.convention)

    unit = params.flexibility_unit

    def make_bc(kind: str) -> MicroBoundaryCondition:
        if kind == "micro_flexible":
            return MicroBoundaryCondition.flexible(
                cfg.c_gamma0_rel * unit, cfg.c_gamma_d_rel * unit
            )
        return MicroBoundaryCondition(kind)

    bcs = {
        "inner": make_bc(cfg.bc_inner),
        "outer": make_bc(cfg.bc_outer),
        "void": make_bc(cfg.bc_void),
    }
    load_program = LoadProgram(
        shear_rate=cfg.shear_rate, horizon=cfg.end_time, path=cfg.load_path
    )
    return FemProblem(dup, constraints, regions, params, bcs, load_program)


def staggered_config(cfg: SimulationConfig) -> StaggeredConfig:
    return StaggeredConfig(
        tolerances=tolerance_table(cfg.length_scale), **cfg.solver
    )


def _frame(problem: FemProblem, index: int, time: float, cfg, region_cells) -> OutputFrame:
    out = problem.cell_outputs
    region_s12 = {
        name: problem.region_average("s12", cells)
        for name, cells in region_cells.items()
    }
    return OutputFrame(
        index=index, time=time,
        u=problem.u.copy(), g=problem.g.copy(), d=problem.d.copy(),
        eps_p=out.eps_p.copy(), g_e=out.g_e.copy(), phi=out.phi.copy(),
        s12=out.s12.copy(),
        boundary_displacement=problem.load.displacement(time),
        region_s12=region_s12,
    )


def run(
    cfg: SimulationConfig,
    mesh: PolyMesh | None = None,
    output_dir: str | None = None,
    max_steps: int | None = None,
    resume: str | None = None,
) -> RunResult:
    """Execute the load program with the staggered solver."""
    outdir = output_dir or cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    problem = build_problem(cfg, mesh)
    stag = staggered_config(cfg)
    stepper = TimeStepper(dt_initial=cfg.dt_initial, cfg=stag)

    region_cells = {"all": np.arange(problem.mesh.n_cells)}
    for name, grain_ids in cfg.regions.items():
        sel = np.isin(problem.mesh.grain_of_cell, [g - 1 for g in grain_ids])
        region_cells[name] = np.flatnonzero(sel)

    t = 0.0
    step = 0
    frames = 0
    last_iters = {"ug": None, "d": None}

    mode = "w"
    if resume:
        state = load_checkpoint(resume, problem)
        t = float(state["time"])
        problem.time = t
        step = int(state["step"])
        frames = int(state["frames"])
        stepper.dt = float(state["dt"])
        stepper.consecutive_accepted = int(state["consecutive_accepted"])
        last_iters = {
            "ug": None if state["iters_ug"] is None else int(state["iters_ug"]),
            "d": None if state["iters_d"] is None else int(state["iters_d"]),
        }
        mode = "a"

    csv_path = os.path.join(outdir, "summary.csv")
    if resume:
        summary = SummaryWriter.__new__(SummaryWriter)
        summary.path = csv_path
        summary.region_names = list(region_cells)
    else:
        summary = SummaryWriter(csv_path, region_cells)

    log_path = os.path.join(outdir, "solver_log.jsonl")
    sol_log = SolverLog(None)
    sol_log._fh = open(log_path, mode)

    def emit_frame():
        nonlocal frames
        fr = _frame(problem, frames, t, cfg, region_cells)
        write_vtu(problem.mesh, fr, os.path.join(outdir, f"frame_{frames:05d}.vtu"))
        frames += 1
        return fr

    def checkpoint(path):
        save_checkpoint(path, problem, {
            "time": t, "step": step, "frames": frames, "dt": stepper.dt,
            "consecutive_accepted": stepper.consecutive_accepted,
            "iters_ug": last_iters["ug"], "iters_d": last_iters["d"],
        })

    status = STATUS_COMPLETED
    with sol_log:
        if not resume:
            emit_frame()
        while t < cfg.end_time - 1e-12 * cfg.end_time:
            if max_steps is not None and step >= max_steps:
                status = STATUS_MAX_STEPS
                break
            dt_eff = min(stepper.dt, cfg.end_time - t)
            snap = problem.snapshot()
            try:
                outcome = staggered_step(
                    problem, stag, t + dt_eff, dt_eff, log=sol_log,
                    step_index=step, last_iters=last_iters,
                )
            except (StepFailure, co.LocalDivergence) as exc:
                problem.restore(snap)
                sol_log.emit(
                    type="step_failed", step=step, time=t + dt_eff, dt=dt_eff,
                    error=type(exc).__name__, detail=str(exc),
                )
                try:
                    stepper.after_failure()
                except RefinementExhausted:
                    status = STATUS_REFINEMENT_EXHAUSTED
                    sol_log.emit(
                        type="run_aborted", reason="refinement_exhausted",
                        time=t, dt=dt_eff,
                    )
                    checkpoint(os.path.join(outdir, "abort_state.npz"))
                    break
                sol_log.emit(
                    type="dt_halved", dt=stepper.dt,
                    refinement_level=stepper.refinement_level,
                )
                continue

            t += dt_eff
            step += 1
            problem.commit_step()
            sol_log.emit(
                type="step_accepted", step=step, time=t, dt=dt_eff,
                field_iters=outcome.field_iters,
                dissipation=problem.dissipation,
            )
            summary.append(
                step, t, problem.load.displacement(t),
                {name: problem.region_average("s12", cells)
                 for name, cells in region_cells.items()},
            )
            if step % cfg.output_every == 0:
                emit_frame()
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                checkpoint(os.path.join(outdir, f"checkpoint_{step:05d}.npz"))
            dt_before = stepper.dt
            stepper.after_acceptance(outcome)
            if stepper.dt != dt_before:
                sol_log.emit(
                    type="dt_doubled", dt=stepper.dt,
                    refinement_level=stepper.refinement_level,
                )
    log.info("run finished: status=%s steps=%d time=%.6g", status, step, t)
    return RunResult(
        status=status, steps_accepted=step, time=t,
        frames_written=frames, output_dir=outdir,
    )
