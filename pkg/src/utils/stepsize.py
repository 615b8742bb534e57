"""
Step-size strategies: closed-form bounds, power iteration and FISTA backtracking
"""
import logging
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from config import get_stepsize_config
from utils.sense import sense_gamma_bound
from utils.spirit import SpiritBoundReport

logger = logging.getLogger(__name__)

_cfg = get_stepsize_config()


class StepSizeError(RuntimeError):
    """A step size could not be obtained"""


class StepRule(BaseModel):
    """How the solver obtains gamma"""
    kind: Literal["recommended", "power-iteration", "backtracking"] = "recommended"
    gamma_init: float = Field(default=_cfg.BT_GAMMA_INIT, gt=0.0)
    eta: float = Field(default=_cfg.BT_ETA, gt=1.0)
    power_iters: int = Field(default=_cfg.POWER_ITERS, ge=1)
    power_tol: float = Field(default=_cfg.POWER_TOL, gt=0.0)
    bound: Literal["paper", "safe"] = "safe"


class StepsizeReport(BaseModel):
    """Outcome of a step-size rule and what it cost"""
    gamma: float = Field(gt=0.0)
    setup_op_applications: int = Field(default=0, ge=0)
    per_iteration_extra: int = Field(default=0, ge=0)
    rule: str = "recommended"
    lipschitz_estimate: Optional[float] = None
    power_iterations_run: Optional[int] = None


def manual_gamma(gamma: float) -> StepsizeReport:
    """Explicit gamma that bypasses every rule"""
    return StepsizeReport(gamma=gamma, rule="manual")


def recommended_gamma(model: str, bound_report: SpiritBoundReport = None, bound: str = "safe") -> StepsizeReport:
    """
    Closed-form step size

    Args:
        model: "sense" or "spirit"
        bound_report: SPIRiT bound report (required for spirit, rejected for sense)
        bound: "safe" or "paper" selects which SPIRiT constant is inverted

    Returns:
        StepsizeReport with zero setup applications
    """
    if model == "sense":
        if bound_report is not None:
            raise StepSizeError("a SPIRiT bound report was given for a SENSE step size")
        return StepsizeReport(gamma=sense_gamma_bound(), rule="recommended", lipschitz_estimate=1.0)
    if model == "spirit":
        if bound_report is None:
            raise StepSizeError("the recommended SPIRiT step size needs a bound report")
        c = bound_report.bound(bound)
        if c <= 0:
            raise StepSizeError(f"SPIRiT bound c_{bound} = {c} is not positive")
        return StepsizeReport(gamma=1.0 / c, rule=f"recommended-{bound}", lipschitz_estimate=c)
    raise StepSizeError(f"unknown model '{model}'")


def power_iteration_gamma(normal_op: Callable[[np.ndarray], np.ndarray], template_shape: Tuple[int, ...],
                          rule: StepRule, applications_per_call: int = 2,
                          seed: int = None) -> StepsizeReport:
    """
    Estimate lambda_max of a self-adjoint PSD operator and return gamma = 1 / (lambda (1 + tol))

    Args:
        normal_op: x -> A^H A x
        template_shape: Shape of the unknown
        rule: Supplies power_iters and power_tol
        applications_per_call: Forward+adjoint applications per normal_op call
        seed: Start-vector seed (StepSizeConfig.POWER_SEED by default)

    Returns:
        StepsizeReport with setup cost iterations * applications_per_call
    """
    rng = np.random.default_rng(_cfg.POWER_SEED if seed is None else seed)
    x = rng.standard_normal(template_shape) + 1j * rng.standard_normal(template_shape)
    x /= np.linalg.norm(x)

    estimate = 0.0
    previous = None
    iterations = 0
    for _ in range(rule.power_iters):
        v = normal_op(x)
        iterations += 1
        estimate = float(np.linalg.norm(v))
        if estimate <= _cfg.ZERO_OPERATOR_EPS:
            break
        x = v / estimate
        if previous is not None and abs(estimate - previous) <= rule.power_tol * previous:
            break
        previous = estimate

    if estimate <= _cfg.ZERO_OPERATOR_EPS:
        raise StepSizeError(f"power iteration found a zero operator (lambda = {estimate:.3e})")

    gamma = 1.0 / (estimate * (1.0 + rule.power_tol))
    logger.info(f"Power iteration: lambda_max ~ {estimate:.8g} after {iterations} iterations, gamma = {gamma:.6g}")
    return StepsizeReport(
        gamma=gamma,
        setup_op_applications=iterations * applications_per_call,
        rule="power-iteration",
        lipschitz_estimate=estimate,
        power_iterations_run=iterations,
    )


@dataclass
class BacktrackResult:
    gamma: float
    point: np.ndarray
    value: float
    trials: int

    @property
    def shrinks(self) -> int:
        return self.trials - 1


def backtracking_step(current_gamma: float, x_hat: np.ndarray, f_hat: float, grad: np.ndarray,
                      candidate: Callable[[float], np.ndarray], evaluate: Callable[[np.ndarray], float],
                      eta: float, gamma_init: float = None) -> BacktrackResult:
    """
    FISTA backtracking: shrink gamma by eta until the quadratic upper bound holds

    f(p) <= f(x_hat) + Re<grad, p - x_hat> + ||p - x_hat||^2 / (2 gamma), p = candidate(gamma).

    Args:
        current_gamma: Step accepted at the previous iteration (never increased)
        x_hat: Extrapolated point
        f_hat: Smooth objective at x_hat
        grad: Gradient at x_hat
        candidate: gamma -> prox step from x_hat
        evaluate: p -> smooth objective at p
        eta: Shrink factor > 1
        gamma_init: Reference for the underflow guard (defaults to current_gamma)

    Returns:
        BacktrackResult with the accepted gamma, point, value and trial count
    """
    if eta <= 1:
        raise StepSizeError(f"backtracking shrink factor must exceed 1, got {eta}")
    floor = _cfg.BT_UNDERFLOW * (gamma_init if gamma_init is not None else current_gamma)
    gamma = current_gamma
    trials = 0
    while True:
        p = candidate(gamma)
        value = evaluate(p)
        trials += 1
        step = p - x_hat
        bound = f_hat + float(np.real(np.vdot(grad, step))) + float(np.vdot(step, step).real) / (2.0 * gamma)
        if value <= bound + 1e-12 * max(1.0, abs(bound)):
            return BacktrackResult(gamma=gamma, point=p, value=value, trials=trials)
        gamma /= eta
        if gamma < floor:
            raise StepSizeError(f"backtracking step underflow: gamma {gamma:.3e} below {floor:.3e}")


def resolve_gamma(model: str, rule: StepRule, operator=None, bound_report: SpiritBoundReport = None,
                  gamma: float = None) -> StepsizeReport:
    """
    Dispatch to the configured strategy

    Args:
        model: "sense" or "spirit"
        rule: Step rule
        operator: System operator with normal(), image_shape and counters (power iteration)
        bound_report: SPIRiT bound report (recommended rule)
        gamma: Manual override

    Returns:
        StepsizeReport; for backtracking gamma is the starting value
    """
    if gamma is not None:
        return manual_gamma(gamma)
    if rule.kind == "recommended":
        return recommended_gamma(model, bound_report if model == "spirit" else None, rule.bound)
    if rule.kind == "power-iteration":
        if operator is None:
            raise StepSizeError("power iteration needs an operator")
        before = operator.applications
        report = power_iteration_gamma(operator.normal, operator.image_shape, rule)
        counted = operator.applications - before
        operator.reset_counters()
        return report.model_copy(update={"setup_op_applications": counted})
    return StepsizeReport(gamma=rule.gamma_init, per_iteration_extra=1, rule="backtracking")
