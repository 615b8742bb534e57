import numpy as np
import pytest

from conftest import crandn, rel_dot_error
from utils.fourier import (
    MaskError,
    MaskSpec,
    SamplingMask,
    apply_undersample,
    fft2_unitary,
    ifft2_unitary,
    make_mask,
    projector_apply,
)
from utils.stepsize import StepRule, power_iteration_gamma
from utils.tensor_io import ComplexImage, MultiCoilKSpace, inner_product


def test_constant_image_has_single_dc_coefficient():
    n = 8
    k = fft2_unitary(ComplexImage(np.ones((n, n)))).data
    assert abs(k[0, 0] - n) <= 1e-12
    k[0, 0] = 0
    assert np.max(np.abs(k)) <= 1e-12


def test_delta_transforms_to_constant():
    n = 8
    delta = np.zeros((n, n), dtype=complex)
    delta[0, 0] = 1.0
    np.testing.assert_allclose(ifft2_unitary(ComplexImage(delta)).data, np.full((n, n), 1.0 / n), atol=1e-15)


def test_parseval(rng):
    x = crandn(rng, 16, 16)
    k = fft2_unitary(x)
    assert abs(np.linalg.norm(k) - np.linalg.norm(x)) <= 1e-12 * np.linalg.norm(x)


def test_round_trip(rng):
    x = crandn(rng, 16, 12)
    np.testing.assert_allclose(ifft2_unitary(fft2_unitary(x)), x, rtol=0, atol=1e-12 * np.linalg.norm(x))


def test_adjoint(rng):
    for _ in range(20):
        x = crandn(rng, 16, 16)
        y = crandn(rng, 16, 16)
        lhs = inner_product(fft2_unitary(x), y)
        rhs = inner_product(x, ifft2_unitary(y))
        assert rel_dot_error(lhs, rhs, x, y) <= 1e-12


def test_batched_transform_matches_per_image(rng):
    stack = crandn(rng, 3, 8, 8)
    batched = fft2_unitary(stack)
    for j in range(3):
        np.testing.assert_allclose(batched[j], fft2_unitary(ComplexImage(stack[j])).data, atol=1e-13)


def test_full_rate_keeps_everything():
    mask = make_mask(MaskSpec(rate=1.0, acs_lines=8), 16, 16)
    assert mask.keep.all()


@pytest.mark.parametrize("density", ["uniform-random", "variable-density-gaussian"])
def test_column_count_and_centered_acs(density):
    mask = make_mask(MaskSpec(rate=0.34, acs_lines=8, seed=3, density=density), 64, 64)
    centered = mask.centered()
    assert centered[0].sum() == 22
    assert centered[:, 28:36].all()
    assert mask.acs_band == (28, 36)
    # whole phase-encode lines
    assert (centered == centered[0][None, :]).all()


def test_mask_is_deterministic():
    spec = MaskSpec(rate=0.34, acs_lines=8, seed=11)
    first = make_mask(spec, 64, 64)
    second = make_mask(spec, 64, 64)
    assert first.keep.tobytes() == second.keep.tobytes()


def test_narrow_gaussian_fills_nearest_columns():
    spec = MaskSpec(rate=0.5, acs_lines=4, density="variable-density-gaussian", gaussian_width=1e-4)
    mask = make_mask(spec, 8, 32)
    columns = np.flatnonzero(mask.centered()[0])
    assert columns.tolist() == list(range(8, 24))
    assert mask.acs_band == (14, 18)


def test_infeasible_rate():
    with pytest.raises(MaskError):
        make_mask(MaskSpec(rate=0.1, acs_lines=22), 64, 64)


def test_acs_wider_than_grid():
    with pytest.raises(MaskError):
        make_mask(MaskSpec(rate=1.0, acs_lines=20), 16, 16)


def test_acs_band_must_be_sampled():
    centered = np.zeros((4, 8), dtype=bool)
    centered[:, 4] = True
    with pytest.raises(MaskError):
        SamplingMask.from_centered(centered, (3, 5))


def test_from_centered_round_trip():
    mask = make_mask(MaskSpec(rate=0.5, acs_lines=4, seed=2), 16, 16)
    rebuilt = SamplingMask.from_centered(mask.centered(), mask.acs_band)
    assert np.array_equal(rebuilt.keep, mask.keep)
    assert rebuilt.acs_band == mask.acs_band


def test_undersample_identity_and_idempotence(rng):
    k = MultiCoilKSpace(crandn(rng, 2, 16, 16))
    full = make_mask(MaskSpec(rate=1.0, acs_lines=4), 16, 16)
    np.testing.assert_array_equal(apply_undersample(k, full).data, k.data)

    mask = make_mask(MaskSpec(rate=0.4, acs_lines=4, seed=5), 16, 16)
    once = apply_undersample(k, mask)
    twice = apply_undersample(once, mask)
    np.testing.assert_array_equal(once.data, twice.data)
    assert np.linalg.norm(once.data) <= np.linalg.norm(k.data)


def test_undersample_dimension_mismatch(rng):
    mask = make_mask(MaskSpec(rate=0.5, acs_lines=2), 8, 8)
    with pytest.raises(MaskError):
        apply_undersample(MultiCoilKSpace(crandn(rng, 2, 8, 6)), mask)


def test_projector_is_idempotent(rng):
    mask = make_mask(MaskSpec(rate=0.4, acs_lines=4, seed=1), 16, 16)
    x = crandn(rng, 16, 16)
    once = projector_apply(x, mask)
    np.testing.assert_allclose(projector_apply(once, mask), once, atol=1e-12 * np.linalg.norm(x))


def test_projector_has_unit_norm():
    mask = make_mask(MaskSpec(rate=0.4, acs_lines=4, seed=1), 16, 16)
    report = power_iteration_gamma(lambda x: projector_apply(x, mask), (16, 16),
                                   StepRule(kind="power-iteration", power_iters=100, power_tol=1e-9))
    assert abs(report.lipschitz_estimate - 1.0) <= 1e-6
