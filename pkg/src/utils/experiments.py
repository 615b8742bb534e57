"""
Experiment helpers: model setup, solver dispatch, gamma sweeps, step-rule comparison
and dense spectral verification on tiny grids
"""
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from config import get_system_config
from utils.fourier import MaskSpec, SamplingMask, undersample
from utils.sense import SenseOperator, SensitivitySet
from utils.solver import DivergenceError, PfistaConfig, ReconResult, pfista_sense, pfista_spirit
from utils.spirit import (
    SpiritBoundReport,
    SpiritImageWeights,
    SpiritKernelSet,
    SpiritOperator,
    offset_blocks,
)
from utils.stepsize import StepsizeReport, recommended_gamma, resolve_gamma
from utils.tensor_io import ComplexImage, MultiCoilImage, MultiCoilKSpace
from utils.tightframe import FrameSpec

logger = logging.getLogger(__name__)

SWEEP_HEADER = ["gamma_mult", "gamma", "final_objective", "final_rlne", "iters_to_1.01x_final"]
COMPARE_HEADER = ["rule", "gamma", "setup_ops", "per_iter_ops", "iterations", "total_ops", "wall_ms",
                  "reached_target", "ops_ratio_vs_recommended"]
TARGET_FACTOR = 1.01


class ExperimentSpec(BaseModel):
    """Gamma sweep: multipliers of the certified step size and shared run settings"""
    model: Literal["sense", "spirit"] = "sense"
    gammas: List[float] = Field(default_factory=lambda: [0.1, 0.5, 1.0])
    iters: int = Field(default=500, ge=1)
    mask: MaskSpec = Field(default_factory=MaskSpec)
    frame: FrameSpec = Field(default_factory=FrameSpec)
    out_dir: str = "runs/sweep"

    @field_validator("gammas")
    @classmethod
    def _non_empty(cls, gammas: List[float]) -> List[float]:
        if not gammas:
            raise ValueError("gammas must not be empty")
        if any(g <= 0 for g in gammas):
            raise ValueError(f"gamma multipliers must be positive, got {gammas}")
        return gammas


@dataclass
class ModelSetup:
    """Everything a solver run needs besides its PfistaConfig"""
    model: str
    mask: SamplingMask
    kspace: MultiCoilKSpace
    reference: Union[ComplexImage, MultiCoilImage, None] = None
    maps: Optional[SensitivitySet] = None
    kernels: Optional[SpiritKernelSet] = None
    weights: Optional[SpiritImageWeights] = None
    bound_report: Optional[SpiritBoundReport] = None

    def build_operator(self, lambda1: float = 1.0):
        if self.model == "sense":
            return SenseOperator(self.maps, self.mask)
        return SpiritOperator(self.weights, self.mask, lambda1)


def run_solver(setup: ModelSetup, cfg: PfistaConfig, trace_path: Union[str, Path, None] = None,
               step_report: StepsizeReport = None, progress=None) -> ReconResult:
    """Dispatch to pfista_sense or pfista_spirit"""
    if setup.model == "sense":
        return pfista_sense(setup.kspace, setup.maps, setup.mask, cfg, reference=setup.reference,
                            trace_path=trace_path, step_report=step_report, progress=progress)
    return pfista_spirit(setup.kspace, setup.weights, setup.mask, cfg, reference=setup.reference,
                         trace_path=trace_path, step_report=step_report, bound_report=setup.bound_report,
                         progress=progress)


def certified_gamma(setup: ModelSetup, bound: str = "safe") -> float:
    """gamma of the recommended closed-form rule for this model"""
    report = setup.bound_report if setup.model == "spirit" else None
    return recommended_gamma(setup.model, report, bound).gamma


def iterations_to_target(iterations: Sequence[int], objectives: Sequence[float], target: float) -> Optional[int]:
    """First recorded iteration whose objective is at or below target"""
    for k, value in zip(iterations, objectives):
        if value <= target:
            return k
    return None


@dataclass
class SweepRun:
    gamma_mult: float
    gamma: float
    iterations: List[int] = field(default_factory=list)
    objectives: List[float] = field(default_factory=list)
    final_objective: Optional[float] = None
    final_rlne: Optional[float] = None
    diverged: bool = False
    stop_reason: str = ""
    trace_path: Optional[str] = None

    @property
    def certified(self) -> bool:
        return self.gamma_mult <= 1.0


def run_sweep_member(setup: ModelSetup, base_cfg: PfistaConfig, gamma_mult: float, base_gamma: float,
                     out_dir: Union[str, Path]) -> SweepRun:
    """
    One sweep run at gamma = gamma_mult * base_gamma, trace written to its own directory

    Divergent runs are recorded rather than raised.
    """
    gamma = gamma_mult * base_gamma
    run_dir = Path(out_dir) / f"run_gamma_x{gamma_mult:g}"
    trace_path = run_dir / "trace.csv"
    cfg = base_cfg.model_copy(update={"gamma": gamma})
    run = SweepRun(gamma_mult=gamma_mult, gamma=gamma, trace_path=str(trace_path))
    try:
        result = run_solver(setup, cfg, trace_path=trace_path)
        trace = result.trace
        run.stop_reason = result.stop_reason
    except DivergenceError as e:
        logger.warning(f"Sweep run gamma x{gamma_mult:g} diverged: {e}")
        trace = e.trace
        run.diverged = True
        run.stop_reason = "diverged"
    run.iterations = trace.iterations
    run.objectives = trace.objectives
    if trace.last is not None:
        run.final_objective = trace.last.objective
        run.final_rlne = trace.last.rlne
    return run


def summarize_sweep(runs: List[SweepRun]) -> Dict:
    """
    Common objective target and iterations-to-target per run

    The target is 1.01 x the smallest final objective among non-divergent runs.
    Ordering is checked over certified multipliers only: iterations to target
    must be non-increasing in gamma (unreached counts as infinitely many).
    """
    finals = [r.final_objective for r in runs if not r.diverged and r.final_objective is not None]
    target = TARGET_FACTOR * min(finals) if finals else math.inf
    rows = []
    hits = {}
    for r in runs:
        hit = None if r.diverged else iterations_to_target(r.iterations, r.objectives, target)
        hits[r.gamma_mult] = hit
        rows.append({
            "gamma_mult": r.gamma_mult,
            "gamma": r.gamma,
            "final_objective": r.final_objective,
            "final_rlne": r.final_rlne,
            "iters_to_1.01x_final": hit,
            "certified": r.certified,
            "diverged": r.diverged,
            "stop_reason": r.stop_reason,
        })

    certified = sorted((r for r in runs if r.certified and not r.diverged), key=lambda r: r.gamma)
    counts = [math.inf if hits[r.gamma_mult] is None else hits[r.gamma_mult] for r in certified]
    ordered = all(b <= a for a, b in zip(counts, counts[1:]))
    if not ordered:
        logger.warning(f"Sweep ordering violated: iterations to target {counts} for gammas "
                       f"{[r.gamma for r in certified]}")
    return {"target": target, "rows": rows, "ordering_holds": ordered}


def write_csv(path: Union[str, Path], header: List[str], rows: List[Dict]) -> Path:
    """Write dict rows with a header row; None becomes an empty cell"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if row.get(col) is None else row.get(col) for col in header])
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    """Read a summary or trace CSV into dict rows"""
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def compare_step_rules(setup: ModelSetup, base_cfg: PfistaConfig, out_dir: Union[str, Path],
                       rules: Sequence[str] = ("recommended", "power-iteration", "backtracking")) -> Dict:
    """
    Run every step rule to a common objective target

    The recommended rule first runs to max_iters; its final objective x 1.01 is the
    target all rules (the recommended one included) then chase with the same
    iteration cap.

    Returns:
        Dict with the target and one row per rule (COMPARE_HEADER keys)
    """
    out_dir = Path(out_dir)
    recommended = base_cfg.step_rule.model_copy(update={"kind": "recommended"})
    reference_run = run_solver(setup, base_cfg.model_copy(update={"gamma": None, "step_rule": recommended}))
    target = TARGET_FACTOR * reference_run.trace.last.objective
    logger.info(f"Step-rule comparison target objective: {target:.8g}")

    rows = []
    for kind in rules:
        rule = base_cfg.step_rule.model_copy(update={"kind": kind})
        cfg = base_cfg.model_copy(update={"gamma": None, "step_rule": rule, "objective_target": target})
        operator = setup.build_operator(cfg.lambda1)
        started = time.perf_counter()
        step = resolve_gamma(setup.model, rule, operator, setup.bound_report)
        result = run_solver(setup, cfg, trace_path=out_dir / kind / "trace.csv", step_report=step)
        wall_ms = (time.perf_counter() - started) * 1000.0
        iterations = result.trace.last.iteration
        total = step.setup_op_applications + result.op_applications
        rows.append({
            "rule": kind,
            "gamma": result.gamma,
            "setup_ops": step.setup_op_applications,
            "per_iter_ops": result.op_applications / iterations if iterations else 0.0,
            "iterations": iterations,
            "total_ops": total,
            "wall_ms": round(wall_ms, 3),
            "reached_target": result.stop_reason == "objective-target",
        })

    recommended_total = next((r["total_ops"] for r in rows if r["rule"] == "recommended"), None)
    for row in rows:
        row["ops_ratio_vs_recommended"] = (row["total_ops"] / recommended_total) if recommended_total else None
    return {"target": target, "rows": rows}


# ---- dense verification on tiny grids ----

def dense_matrix(apply: Callable[[np.ndarray], np.ndarray], shape) -> np.ndarray:
    """Assemble a linear operator column by column from unit vectors"""
    size = int(np.prod(shape))
    columns = []
    for n in range(size):
        e = np.zeros(size, dtype=np.complex128)
        e[n] = 1.0
        columns.append(np.asarray(apply(e.reshape(shape))).ravel())
    return np.stack(columns, axis=1)


def dense_sense_normal(maps: SensitivitySet, mask: SamplingMask) -> np.ndarray:
    operator = SenseOperator(maps, mask)
    return dense_matrix(operator.normal, operator.image_shape)


def dense_spirit_normal(weights: SpiritImageWeights, mask: SamplingMask, lambda1: float) -> np.ndarray:
    operator = SpiritOperator(weights, mask, lambda1)
    return dense_matrix(operator.normal, operator.image_shape)


def lambda_max(matrix: np.ndarray) -> float:
    """Largest eigenvalue of a Hermitian matrix"""
    hermitian = 0.5 * (matrix + matrix.conj().T)
    return float(np.linalg.eigvalsh(hermitian)[-1])


def dense_offset_block(weights: SpiritImageWeights, offset: int) -> np.ndarray:
    """Block off-diagonal `offset` of Z = (W - I)^H (W - I) as a dense matrix"""
    z = offset_blocks(weights)
    coils = weights.coil_count
    n = int(np.prod(weights.shape))
    dense = np.zeros((coils * n, coils * n), dtype=np.complex128)
    for j in range(coils):
        i = j + offset
        if 0 <= i < coils:
            dense[j * n:(j + 1) * n, i * n:(i + 1) * n] = np.diag(z[j, i].ravel())
    return dense


def verify_bound_dense(weights: SpiritImageWeights, mask: SamplingMask, report: SpiritBoundReport) -> Dict:
    """
    Compare the closed-form report with dense spectral quantities

    Returns:
        Dict with lambda_max, slack (c_safe - lambda_max) and the largest per-offset norm mismatch
    """
    unknowns = weights.coil_count * int(np.prod(weights.shape))
    limit = get_system_config().DENSE_VERIFY_MAX_UNKNOWNS
    if unknowns > limit:
        raise ValueError(f"dense verification needs at most {limit} unknowns, got {unknowns}")
    lam = lambda_max(dense_spirit_normal(weights, mask, report.lambda1))
    mismatch = 0.0
    for offset, norm in enumerate(report.per_offset_norms):
        dense_norm = float(np.linalg.norm(dense_offset_block(weights, offset), 2))
        mismatch = max(mismatch, abs(dense_norm - norm))
    result = {
        "lambda_max": lam,
        "slack": report.c_safe - lam,
        "slack_paper": report.c_paper - lam,
        "per_offset_norm_mismatch": mismatch,
    }
    logger.info(f"Dense check: lambda_max={lam:.8g}, slack={result['slack']:.3e}, norm mismatch={mismatch:.3e}")
    return result


def undersampled_kspace(kspace: MultiCoilKSpace, mask: SamplingMask) -> MultiCoilKSpace:
    return MultiCoilKSpace(undersample(kspace.data, mask))
