import numpy as np
import pytest

from conftest import crandn, random_mask, random_weights
from utils.experiments import dense_spirit_normal, lambda_max
from utils.sense import SenseOperator, synth_sensitivities
from utils.spirit import SpiritKernelSet, SpiritOperator, kernels_to_image_weights, spirit_bound
from utils.stepsize import (
    StepRule,
    StepSizeError,
    backtracking_step,
    manual_gamma,
    power_iteration_gamma,
    recommended_gamma,
    resolve_gamma,
)


def test_recommended_sense():
    report = recommended_gamma("sense")
    assert report.gamma == 1.0
    assert report.setup_op_applications == 0
    assert report.per_iteration_extra == 0


def test_recommended_sense_rejects_bound_report():
    weights = kernels_to_image_weights(SpiritKernelSet(np.zeros((1, 1, 3, 3))), 4, 4)
    with pytest.raises(StepSizeError):
        recommended_gamma("sense", spirit_bound(weights, 1.0))


def test_recommended_spirit_single_zero_kernel():
    weights = kernels_to_image_weights(SpiritKernelSet(np.zeros((1, 1, 3, 3))), 4, 4)
    report = recommended_gamma("spirit", spirit_bound(weights, 1.0))
    assert report.gamma == pytest.approx(0.5)
    assert report.setup_op_applications == 0


def test_recommended_spirit_needs_report():
    with pytest.raises(StepSizeError):
        recommended_gamma("spirit")


def test_paper_bound_selects_c_paper(rng):
    report = spirit_bound(random_weights(rng, 3, 4, 4), 1.0)
    assert recommended_gamma("spirit", report, bound="paper").gamma == pytest.approx(1.0 / report.c_paper)
    assert recommended_gamma("spirit", report, bound="safe").gamma == pytest.approx(1.0 / report.c_safe)


@pytest.mark.parametrize("lambda1", [0.5, 1.0, 2.0])
def test_recommended_spirit_certified_densely(rng, lambda1):
    weights = random_weights(rng, 3, 6, 6)
    mask = random_mask(6, 6, rate=0.5, acs_lines=2)
    gamma = recommended_gamma("spirit", spirit_bound(weights, lambda1)).gamma
    assert gamma * lambda_max(dense_spirit_normal(weights, mask, lambda1)) <= 1.0 + 1e-12


def test_power_iteration_identity():
    report = power_iteration_gamma(lambda x: x, (4, 4), StepRule(kind="power-iteration"))
    assert abs(report.lipschitz_estimate - 1.0) <= 1e-10
    assert report.gamma == pytest.approx(1.0 / (1.0 + 1e-4))
    assert report.setup_op_applications == 2 * report.power_iterations_run


def test_power_iteration_known_spectrum():
    diagonal = np.array([1.0, 2.0, 4.0])
    rule = StepRule(kind="power-iteration", power_iters=500, power_tol=1e-8)
    report = power_iteration_gamma(lambda x: diagonal * x, (3,), rule)
    assert abs(report.lipschitz_estimate - 4.0) <= 4.0 * 1e-6
    assert report.gamma == pytest.approx(0.25, rel=1e-6)


def test_power_iteration_zero_operator():
    with pytest.raises(StepSizeError):
        power_iteration_gamma(lambda x: np.zeros_like(x), (4,), StepRule(kind="power-iteration"))


def test_power_iteration_is_seeded():
    rule = StepRule(kind="power-iteration", power_iters=7)
    diagonal = np.linspace(0.1, 1.0, 10)
    first = power_iteration_gamma(lambda x: diagonal * x, (10,), rule, seed=5)
    second = power_iteration_gamma(lambda x: diagonal * x, (10,), rule, seed=5)
    assert first.lipschitz_estimate == second.lipschitz_estimate


def _quadratic(curvature):
    def value(p):
        return 0.5 * curvature * float(np.vdot(p, p).real)

    return value


def _gradient_step(x_hat, grad):
    return lambda g: x_hat - g * grad


def test_backtracking_accepts_inverse_curvature():
    curvature = 3.0
    x_hat = np.array([1.0 + 0.5j])
    grad = curvature * x_hat
    f = _quadratic(curvature)
    result = backtracking_step(1.0 / curvature, x_hat, f(x_hat), grad, _gradient_step(x_hat, grad), f, eta=2.0)
    assert result.shrinks == 0
    assert result.gamma == 1.0 / curvature


def test_backtracking_one_shrink_from_double_step():
    curvature = 3.0
    x_hat = np.array([1.0 + 0.5j])
    grad = curvature * x_hat
    f = _quadratic(curvature)
    result = backtracking_step(2.0 / curvature, x_hat, f(x_hat), grad, _gradient_step(x_hat, grad), f, eta=2.0)
    assert result.shrinks == 1
    assert result.gamma == pytest.approx(1.0 / curvature)


def test_backtracking_sequence_is_non_increasing(rng):
    diagonal = np.array([0.5, 2.0, 7.0])
    gamma = 1.0
    x_hat = crandn(rng, 3)
    seen = []
    for _ in range(6):
        grad = diagonal * x_hat

        def value(p):
            return 0.5 * float(np.vdot(p, diagonal * p).real)

        result = backtracking_step(gamma, x_hat, value(x_hat), grad, _gradient_step(x_hat, grad), value, eta=2.0)
        assert result.gamma <= gamma
        gamma = result.gamma
        seen.append(gamma)
        x_hat = result.point
    assert seen == sorted(seen, reverse=True)


def test_backtracking_underflow():
    x_hat = np.array([1.0 + 0j])
    with pytest.raises(StepSizeError):
        backtracking_step(1.0, x_hat, 0.5, x_hat, _gradient_step(x_hat, x_hat), lambda p: np.inf, eta=2.0)


def test_backtracking_rejects_small_eta():
    x_hat = np.array([1.0 + 0j])
    with pytest.raises(StepSizeError):
        backtracking_step(1.0, x_hat, 0.5, x_hat, _gradient_step(x_hat, x_hat), _quadratic(1.0), eta=1.0)


def test_step_rule_validation():
    with pytest.raises(ValueError):
        StepRule(eta=1.0)
    with pytest.raises(ValueError):
        StepRule(power_tol=0.0)


def test_manual_gamma_bypasses_rules():
    assert resolve_gamma("spirit", StepRule(), gamma=0.25) == manual_gamma(0.25)


def test_resolve_power_iteration_counts_applications():
    maps = synth_sensitivities(8, 8, 2)
    operator = SenseOperator(maps, random_mask(8, 8))
    report = resolve_gamma("sense", StepRule(kind="power-iteration", power_iters=10), operator)
    assert report.setup_op_applications == 2 * report.power_iterations_run
    assert report.power_iterations_run <= 10
    assert operator.applications == 0


def test_resolve_power_iteration_spirit(rng):
    weights = random_weights(rng, 2, 6, 6)
    mask = random_mask(6, 6, rate=0.5, acs_lines=2)
    operator = SpiritOperator(weights, mask, 1.0)
    report = resolve_gamma("spirit", StepRule(kind="power-iteration", power_iters=200, power_tol=1e-8), operator)
    assert report.lipschitz_estimate <= lambda_max(dense_spirit_normal(weights, mask, 1.0)) * (1 + 1e-10)
    assert report.lipschitz_estimate >= 0.99 * lambda_max(dense_spirit_normal(weights, mask, 1.0))


def test_resolve_backtracking_reports_per_iteration_cost():
    report = resolve_gamma("sense", StepRule(kind="backtracking", gamma_init=3.0))
    assert report.gamma == 3.0
    assert report.per_iteration_extra == 1
    assert report.setup_op_applications == 0
