"""
pFISTA main loop for the SENSE and SPIRiT models
"""
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config import get_solver_config, get_system_config
from utils.fourier import SamplingMask
from utils.sense import SenseOperator, SensitivitySet
from utils.spirit import SpiritBoundReport, SpiritImageWeights, SpiritOperator, spirit_bound
from utils.stepsize import StepRule, StepsizeReport, backtracking_step, resolve_gamma
from utils.tensor_io import ComplexImage, MultiCoilImage, MultiCoilKSpace, ssos
from utils.tightframe import FrameSpec, TightFrame, get_frame

logger = logging.getLogger(__name__)

_cfg = get_solver_config()

TRACE_HEADER = ["iter", "objective", "rlne", "t", "gamma", "op_apps", "wall_ms"]
CONVERGED_REL_CHANGE = 1e-4


class PfistaConfig(BaseModel):
    """Solver parameters; `lambda` is accepted as an alias of `lam`"""
    model_config = ConfigDict(populate_by_name=True)

    model: Literal["sense", "spirit"] = "sense"
    lam: float = Field(default=_cfg.LAMBDA_SENSE, gt=0.0, alias="lambda")
    lambda1: float = Field(default=_cfg.LAMBDA1, gt=0.0)
    step_rule: StepRule = Field(default_factory=StepRule)
    gamma: Optional[float] = Field(default=None, gt=0.0)
    max_iters: int = Field(default=_cfg.MAX_ITERS, ge=1)
    rel_change_tol: float = Field(default=_cfg.REL_CHANGE_TOL, ge=0.0)
    frame: FrameSpec = Field(default_factory=FrameSpec)
    record_every: int = Field(default=_cfg.RECORD_EVERY, ge=1)
    exempt_scaling_band: bool = False
    objective_target: Optional[float] = None
    divergence_factor: float = Field(default=_cfg.DIVERGENCE_FACTOR, gt=1.0)


@dataclass
class TraceRecord:
    iteration: int
    objective: float
    rlne: Optional[float]
    t: float
    gamma: float
    op_apps: int
    wall_ms: float

    def as_row(self) -> List[str]:
        return [
            str(self.iteration),
            repr(self.objective),
            "" if self.rlne is None else repr(self.rlne),
            repr(self.t),
            repr(self.gamma),
            str(self.op_apps),
            f"{self.wall_ms:.3f}",
        ]


class SolverTrace:
    """
    Per-iteration records, optionally streamed to a CSV file as they arrive

    Columns: iter,objective,rlne,t,gamma,op_apps,wall_ms
    """

    def __init__(self, csv_path: Union[str, Path, None] = None):
        self.records: List[TraceRecord] = []
        self.csv_path = Path(csv_path) if csv_path else None
        self._handle: Optional[IO] = None
        self._writer = None
        if self.csv_path:
            self.csv_path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = open(self.csv_path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._handle)
            self._writer.writerow(TRACE_HEADER)
            self._handle.flush()

    def append(self, record: TraceRecord):
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError(f"trace iterations must increase: {record.iteration} after {self.records[-1].iteration}")
        self.records.append(record)
        if self._writer:
            self._writer.writerow(record.as_row())
            self._handle.flush()

    def close(self):
        if self._handle:
            self._handle.close()
            self._handle = None
            self._writer = None

    def __len__(self):
        return len(self.records)

    @property
    def iterations(self) -> List[int]:
        return [r.iteration for r in self.records]

    @property
    def objectives(self) -> List[float]:
        return [r.objective for r in self.records]

    @property
    def last(self) -> Optional[TraceRecord]:
        return self.records[-1] if self.records else None


@dataclass
class ReconResult:
    image: Union[ComplexImage, MultiCoilImage]
    trace: SolverTrace
    converged: bool
    stop_reason: str
    step_report: StepsizeReport
    gamma: float
    op_applications: int
    zero_filled_rlne: Optional[float] = None
    bound_report: Optional[SpiritBoundReport] = None
    metadata: dict = field(default_factory=dict)


class DivergenceError(RuntimeError):
    """Iterates blew up; carries the partial trace"""

    def __init__(self, message: str, trace: SolverTrace, iteration: int):
        super().__init__(message)
        self.trace = trace
        self.iteration = iteration


def _as_array(obj) -> np.ndarray:
    return obj.data if hasattr(obj, "data") else np.asarray(obj)


def rlne(reference, reconstruction) -> float:
    """
    Relative l2 error ||ref - rec|| / ||ref||

    Single images are compared by magnitude, coil stacks by SSOS.
    """
    ref = _as_array(reference)
    rec = _as_array(reconstruction)
    if ref.shape != rec.shape:
        raise ValueError(f"reference {ref.shape} and reconstruction {rec.shape} differ in shape")
    if ref.ndim == 3:
        ref_mag, rec_mag = ssos(ref), ssos(rec)
    else:
        ref_mag, rec_mag = np.abs(ref), np.abs(rec)
    denom = np.linalg.norm(ref_mag)
    if denom == 0:
        raise ValueError("RLNE reference is zero")
    return float(np.linalg.norm(ref_mag - rec_mag) / denom)


def objective_value(x: np.ndarray, y_stacked: np.ndarray, operator, frame: TightFrame,
                    lam: float, gamma: float) -> float:
    """
    F(alpha) = lam ||alpha||_1 + 0.5 ||y - A Psi* alpha||^2 + (1 / 2 gamma) ||(I - Psi Psi*) alpha||^2 at alpha = Psi x

    For SPIRiT the stacked operator carries the lambda1 consistency term. Operator
    applications made here are not counted.
    """
    alpha = frame.analyze(x)
    image = frame.synthesize(alpha)
    residual = operator.forward(image, count=False) - y_stacked
    leftover = alpha - frame.analyze(image)
    return float(
        lam * np.sum(np.abs(alpha))
        + 0.5 * np.vdot(residual, residual).real
        + np.vdot(leftover, leftover).real / (2.0 * gamma)
    )


def _smooth_value(residual: np.ndarray) -> float:
    return 0.5 * float(np.vdot(residual, residual).real)


def _iterate(operator, y_stacked: np.ndarray, x0: np.ndarray, cfg: PfistaConfig, step: StepsizeReport,
             reference: Optional[np.ndarray], trace: SolverTrace, progress=None) -> dict:
    frame = get_frame(cfg.frame, *operator.image_shape[-2:])
    backtracking = step.rule == "backtracking"
    gamma = step.gamma
    gamma_init = gamma
    operator.reset_counters()
    started = time.perf_counter()
    log_every = get_system_config().PROGRESS_LOG_EVERY

    def prox(z, g):
        return frame.projected_prox(z, g * cfg.lam, cfg.exempt_scaling_band)

    def record(k, x, t):
        objective = objective_value(x, y_stacked, operator, frame, cfg.lam, gamma)
        err = rlne(reference, x) if reference is not None else None
        rec = TraceRecord(k, objective, err, t, gamma, operator.applications,
                          (time.perf_counter() - started) * 1000.0)
        trace.append(rec)
        return rec

    x_prev = x0
    x_hat = x0
    t = 1.0
    initial_norm = float(np.linalg.norm(x0))
    limit = cfg.divergence_factor * initial_norm if initial_norm > 0 else math.inf
    record(0, x0, t)
    stop_reason = "max-iters"
    rel_change = math.inf

    for k in range(1, cfg.max_iters + 1):
        residual = operator.forward(x_hat) - y_stacked
        grad = operator.adjoint(residual)
        if backtracking:
            accepted = backtracking_step(
                gamma, x_hat, _smooth_value(residual), grad,
                candidate=lambda g: prox(x_hat - g * grad, g),
                evaluate=lambda p: _smooth_value(operator.forward(p) - y_stacked),
                eta=cfg.step_rule.eta, gamma_init=gamma_init,
            )
            gamma = accepted.gamma
            x_new = accepted.point
        else:
            x_new = prox(x_hat - gamma * grad, gamma)

        norm_new = float(np.linalg.norm(x_new))
        if not np.isfinite(norm_new) or norm_new > limit:
            raise DivergenceError(
                f"iterate norm {norm_new:.3e} exceeded {cfg.divergence_factor:g} x initial norm at iteration {k} "
                f"(gamma = {gamma:.6g})",
                trace, k,
            )

        t_new = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        x_hat = x_new + ((t - 1.0) / t_new) * (x_new - x_prev)
        prev_norm = float(np.linalg.norm(x_prev))
        diff_norm = float(np.linalg.norm(x_new - x_prev))
        rel_change = diff_norm / prev_norm if prev_norm > 0 else (0.0 if diff_norm == 0 else math.inf)
        x_prev = x_new
        t = t_new

        needs_objective = cfg.objective_target is not None
        last = k == cfg.max_iters
        stop = cfg.rel_change_tol > 0 and rel_change <= cfg.rel_change_tol
        if k % cfg.record_every == 0 or last or stop or needs_objective:
            rec = record(k, x_new, t)
            if not np.isfinite(rec.objective):
                raise DivergenceError(f"objective became non-finite at iteration {k}", trace, k)
            if needs_objective and rec.objective <= cfg.objective_target:
                stop_reason = "objective-target"
                break
        if stop:
            stop_reason = "rel-change"
            break

        if progress is not None and k % log_every == 0:
            progress.update_iterations(k, cfg.max_iters, trace.last.objective if trace.last else None)

    converged = stop_reason != "max-iters" or rel_change <= CONVERGED_REL_CHANGE
    logger.info(f"pFISTA-{cfg.model} stopped after {k} iterations ({stop_reason}), "
                f"objective {trace.last.objective:.6g}, {operator.applications} operator applications")
    return {
        "image": x_prev,
        "stop_reason": stop_reason,
        "converged": converged,
        "gamma": gamma,
        "op_applications": operator.applications,
    }


def _run_pfista(operator, y_stacked: np.ndarray, x0: np.ndarray, cfg: PfistaConfig, step: StepsizeReport,
                reference: Optional[np.ndarray], trace: SolverTrace, progress=None) -> dict:
    # the trace file is closed on every exit path, divergence included
    try:
        return _iterate(operator, y_stacked, x0, cfg, step, reference, trace, progress)
    finally:
        trace.close()


def pfista_sense(y: MultiCoilKSpace, maps: SensitivitySet, mask: SamplingMask, cfg: PfistaConfig,
                 reference: ComplexImage = None, trace_path: Union[str, Path, None] = None,
                 step_report: StepsizeReport = None, progress=None) -> ReconResult:
    """
    pFISTA for the SENSE model

    Args:
        y: Undersampled multi-coil k-space
        maps: Normalized sensitivity maps
        mask: Sampling mask
        cfg: Solver configuration (model must be "sense")
        reference: Optional ground truth for the RLNE column
        trace_path: Optional CSV file the trace streams into
        step_report: Precomputed step size; resolved from cfg when omitted
        progress: Optional ProgressTracker

    Returns:
        ReconResult with a ComplexImage
    """
    if cfg.model != "sense":
        raise ValueError(f"pfista_sense called with model '{cfg.model}'")
    operator = SenseOperator(maps, mask)
    step = step_report or resolve_gamma("sense", cfg.step_rule, operator, gamma=cfg.gamma)
    x0 = operator.zero_filled(y.data)
    ref = reference.data if reference is not None else None
    trace = SolverTrace(trace_path)
    out = _run_pfista(operator, operator.measurement(y.data), x0, cfg, step, ref, trace, progress)
    return ReconResult(
        image=ComplexImage(out["image"]),
        trace=trace,
        converged=out["converged"],
        stop_reason=out["stop_reason"],
        step_report=step,
        gamma=out["gamma"],
        op_applications=out["op_applications"],
        zero_filled_rlne=rlne(ref, x0) if ref is not None else None,
        metadata={"initialization": "zero-filled adjoint"},
    )


def pfista_spirit(y: MultiCoilKSpace, weights: SpiritImageWeights, mask: SamplingMask, cfg: PfistaConfig,
                  reference: MultiCoilImage = None, trace_path: Union[str, Path, None] = None,
                  step_report: StepsizeReport = None, bound_report: SpiritBoundReport = None,
                  progress=None) -> ReconResult:
    """
    pFISTA for the SPIRiT model, frame applied coil by coil

    The bound report is computed from the weights when the recommended rule needs it.
    """
    if cfg.model != "spirit":
        raise ValueError(f"pfista_spirit called with model '{cfg.model}'")
    operator = SpiritOperator(weights, mask, cfg.lambda1)
    if bound_report is None and cfg.gamma is None and cfg.step_rule.kind == "recommended":
        bound_report = spirit_bound(weights, cfg.lambda1)
    step = step_report or resolve_gamma("spirit", cfg.step_rule, operator, bound_report, gamma=cfg.gamma)
    x0 = operator.zero_filled(y.data)
    ref = reference.data if reference is not None else None
    trace = SolverTrace(trace_path)
    out = _run_pfista(operator, operator.measurement(y.data), x0, cfg, step, ref, trace, progress)
    return ReconResult(
        image=MultiCoilImage(out["image"]),
        trace=trace,
        converged=out["converged"],
        stop_reason=out["stop_reason"],
        step_report=step,
        gamma=out["gamma"],
        op_applications=out["op_applications"],
        zero_filled_rlne=rlne(ref, x0) if ref is not None else None,
        bound_report=bound_report,
        metadata={"initialization": "zero-filled adjoint"},
    )
