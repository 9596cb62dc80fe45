"""Staggered two-block nonlinear driver.

Each time step alternates a monolithic Newton solve of the coupled
displacement / gradient-hardening block with a Newton solve of the
phase-field block, freezing the complementary variable set (including the
corresponding local variables). A step is accepted only when both global
residuals meet their FINAL field-wise tolerances for the same variable
values; looser back-up tolerances may cut short an individual block solve
early in the field iterations but can never conclude the step.

The driver is written against a small problem protocol (assemble /
residual_norms / apply_update / norms_of / solve_correction / snapshot /
restore / set_time) so it can be exercised with scripted stand-ins.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field


class StepFailure(RuntimeError):
    """Base class of everything that makes a time step fail."""


class BlockDiverged(StepFailure):
    """A block Newton solve diverged or ran out of iterations."""


class FieldLoopDiverged(StepFailure):
    """First residuals of the same equation grew repeatedly."""


class FieldIterExhausted(StepFailure):
    """The field iteration cap was reached without final convergence."""


class RefinementExhausted(RuntimeError):
    """Time-step halving hit its cap; the run aborts."""


@dataclass(frozen=True)
class FieldTolerances:
    residual: float
    update: float


def tolerance_table(length_scale: float = 1.0):
    """Field-wise final and back-up tolerances, scaled by L (in mm)."""
    L = float(length_scale)
    final = {
        "u": FieldTolerances(L**2 * 1e-6, L * 1e-8),
        "g": FieldTolerances(L**2 * 1e-11, 1e-6 / L),
        "d": FieldTolerances(L**3 * 1e-10, 1e-8),
    }
    backup = {
        "u": FieldTolerances(L**2 * 1e-3, L * 1e-8),
        "g": FieldTolerances(L**2 * 1e-8, 1e-6 / L),
        "d": FieldTolerances(L**3 * 1e-10, 1e-8),
    }
    return {"final": final, "backup": backup}


@dataclass
class StaggeredConfig:
    tolerances: dict = field(default_factory=tolerance_table)
    max_field_iter: int = 500
    max_iter: int = 25
    iter_backuptol: int = 8
    n_iter_backuptols: dict = field(
        default_factory=lambda: {"ug": 25, "d": 2}
    )
    max_field_div: int = 2
    max_divergence_count: int = 5
    max_time_refinement_level: int = 20
    n_field_iter_coarsen: int = 20
    n_timesteps_recoarsen: int = 5
    line_search_shrink: float = 0.7

    def __post_init__(self):
        for f, tol in self.tolerances["final"].items():
            bk = self.tolerances["backup"][f]
            if bk.residual < tol.residual or bk.update < tol.update:
                raise ValueError(f"back-up tolerances of field {f} tighter than final")


@dataclass
class BlockResult:
    block: str
    iters: int                       # Newton corrections applied
    regime: str                      # "final" | "backup"
    reasons: dict                    # field -> "residual"|"field-update"|"back-up"
    first_norms: dict
    final_norms: dict
    update_norms: dict
    shrinks: int
    backup_engaged_at: int | None
    first_combined: float

    @property
    def final_ok(self) -> bool:
        return all(r in ("residual", "field-update") for r in self.reasons.values())


@dataclass
class StepOutcome:
    converged: bool
    field_iters: int
    dt: float
    reasons: dict = field(default_factory=dict)


class SolverLog:
    """Line-delimited structured records of every block solve and event."""

    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "w") if path else None

    def emit(self, **record):
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _combined(norms: dict, final_tols: dict) -> float:
    return max(norms[f] / final_tols[f].residual for f in norms)


def newton_block_solve(
    problem,
    block: str,
    cfg: StaggeredConfig,
    engage_backup_from_start: bool = False,
    log: SolverLog | None = None,
    meta: dict | None = None,
) -> BlockResult:
    """Newton loop of one block, with line search and back-up tolerances.

    Convergence per field means residual norm below the regime's residual
    tolerance OR the last Newton correction of that field below its update
    tolerance. Raises BlockDiverged on repeated residual growth or when
    the iteration cap is hit without even back-up convergence.
    """
    fields = problem.fields_of(block)
    tol_f = {f: cfg.tolerances["final"][f] for f in fields}
    tol_b = {f: cfg.tolerances["backup"][f] for f in fields}

    regime = "final"
    backup_engaged_at = None
    n_inc = 0
    shrinks = 0
    prev_combined = None
    upd_norms = {f: float("inf") for f in fields}
    first_norms: dict = {}
    first_combined = 0.0
    it = 0

    def fail(reason: str):
        if log is not None:
            log.emit(
                type="block_solve", block=block, iters=it, regime=regime,
                reasons={}, diverged=reason, shrinks=shrinks,
                backup_engaged_at=backup_engaged_at, **(meta or {}),
            )
        raise BlockDiverged(f"{block}: {reason}")

    residual, mat = problem.assemble(block, matrix=True, persist=True)
    while True:
        norms = problem.norms_of(block, residual)
        combined = _combined(norms, tol_f)
        if it == 0:
            first_norms = dict(norms)
            first_combined = combined
            if engage_backup_from_start and any(
                norms[f] > tol_b[f].residual for f in fields
            ):
                regime = "backup"
                backup_engaged_at = 0
        else:
            if combined > prev_combined:
                n_inc += 1
                if n_inc > cfg.max_divergence_count:
                    fail(f"residual grew {n_inc} consecutive times")
            else:
                n_inc = 0
        prev_combined = combined

        if (
            regime == "final"
            and it == cfg.iter_backuptol
            and any(norms[f] > tol_b[f].residual for f in fields)
        ):
            regime = "backup"
            backup_engaged_at = it
        if regime == "final" and it == cfg.max_iter:
            regime = "backup"
            backup_engaged_at = it

        reasons = {}
        for f in fields:
            if norms[f] <= tol_f[f].residual:
                reasons[f] = "residual"
            elif it > 0 and upd_norms[f] <= tol_f[f].update:
                reasons[f] = "field-update"
            elif regime == "backup" and (
                norms[f] <= tol_b[f].residual
                or (it > 0 and upd_norms[f] <= tol_b[f].update)
            ):
                reasons[f] = "back-up"
        done = len(reasons) == len(fields)

        if done or it >= cfg.max_iter:
            if not done:
                fail(f"no convergence within {cfg.max_iter} iterations")
            result = BlockResult(
                block=block, iters=it, regime=regime, reasons=reasons,
                first_norms=first_norms, final_norms=dict(norms),
                update_norms={f: (0.0 if upd_norms[f] == float("inf") else upd_norms[f])
                              for f in fields},
                shrinks=shrinks, backup_engaged_at=backup_engaged_at,
                first_combined=first_combined,
            )
            if log is not None:
                log.emit(
                    type="block_solve", block=block, iters=it, regime=regime,
                    reasons=reasons, residual_norms=dict(norms),
                    first_norms=first_norms,
                    update_norms=result.update_norms, shrinks=shrinks,
                    backup_engaged_at=backup_engaged_at, **(meta or {}),
                )
            return result

        delta = problem.solve_correction(mat, residual)
        if n_inc > 0:
            delta = delta * (cfg.line_search_shrink ** n_inc)
            shrinks += 1
        upd_norms = problem.norms_of(block, delta)
        problem.apply_update(block, delta)
        it += 1
        residual, mat = problem.assemble(block, matrix=True, persist=True)


def staggered_step(
    problem,
    cfg: StaggeredConfig,
    t_new: float,
    dt: float,
    log: SolverLog | None = None,
    step_index: int = 0,
    last_iters: dict | None = None,
) -> StepOutcome:
    """One time step of the staggered scheme.

    Field iterations alternate ug and d solves; after each block solve the
    complementary residual is checked without updating any variable. The
    step is accepted only when the just-solved block terminated under
    FINAL criteria and the complementary residuals pass their FINAL
    residual tolerances.
    """
    problem.set_time(t_new, dt)
    tol_final = cfg.tolerances["final"]
    prev_first: dict = {}
    div_count = {"ug": 0, "d": 0}
    if last_iters is None:
        last_iters = {"ug": None, "d": None}

    field_iter = 0
    while field_iter < cfg.max_field_iter:
        field_iter += 1
        for block, other in (("ug", "d"), ("d", "ug")):
            prev_exceeded = any(
                last_iters[b] is not None
                and last_iters[b] > cfg.n_iter_backuptols[b]
                for b in ("ug", "d")
            )
            meta = {"step": step_index, "field_iter": field_iter,
                    "time": t_new, "dt": dt}
            result = newton_block_solve(
                problem, block, cfg,
                engage_backup_from_start=prev_exceeded, log=log, meta=meta,
            )
            last_iters[block] = result.iters

            if (
                prev_first.get(block) is not None
                and result.first_combined > prev_first[block]
            ):
                div_count[block] += 1
                if div_count[block] > cfg.max_field_div:
                    raise FieldLoopDiverged(
                        f"{block}: first residual grew {div_count[block]} "
                        f"field iterations in a row"
                    )
            else:
                div_count[block] = 0
            prev_first[block] = result.first_combined

            other_norms = problem.residual_norms(other)
            others_ok = all(
                other_norms[f] <= tol_final[f].residual for f in other_norms
            )
            if result.final_ok and others_ok:
                reasons = dict(result.reasons)
                reasons.update({f: "residual" for f in other_norms})
                return StepOutcome(
                    converged=True, field_iters=field_iter, dt=dt,
                    reasons=reasons,
                )
    raise FieldIterExhausted(f"no convergence in {cfg.max_field_iter} field iterations")


@dataclass
class TimeStepper:
    """Halving-on-failure / doubling-after-calm time step control.

    The refinement level is the number of outstanding halvings,
    log2(dt_initial / dt); halving beyond the cap aborts the run.
    """

    dt_initial: float
    cfg: StaggeredConfig
    dt: float = None
    consecutive_accepted: int = 0

    def __post_init__(self):
        if self.dt is None:
            self.dt = self.dt_initial

    @property
    def refinement_level(self) -> int:
        return max(0, round(math.log2(self.dt_initial / self.dt)))

    def after_failure(self) -> float:
        if self.refinement_level >= self.cfg.max_time_refinement_level:
            raise RefinementExhausted(
                f"time step refined {self.refinement_level} times without success"
            )
        self.dt *= 0.5
        self.consecutive_accepted = 0
        return self.dt

    def after_acceptance(self, outcome: StepOutcome) -> float:
        self.consecutive_accepted += 1
        if (
            self.consecutive_accepted >= self.cfg.n_timesteps_recoarsen
            and outcome.field_iters <= self.cfg.n_field_iter_coarsen
            and self.dt < self.dt_initial
        ):
            self.dt = min(2.0 * self.dt, self.dt_initial)
            self.consecutive_accepted = 0
        return self.dt


def adapt_timestep(
    history, dt: float, cfg: StaggeredConfig, dt_initial: float
) -> float:
    """Next time step from a history of StepOutcome / None (failed) entries."""
    stepper = TimeStepper(dt_initial=dt_initial, cfg=cfg, dt=dt)
    last = history[-1] if history else None
    if last is None or not last.converged:
        return stepper.after_failure()
    streak = 0
    for h in reversed(history):
        if h is not None and h.converged:
            streak += 1
        else:
            break
    stepper.consecutive_accepted = streak - 1
    return stepper.after_acceptance(last)
