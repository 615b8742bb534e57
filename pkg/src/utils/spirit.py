"""
SPIRiT calibration, image-domain consistency operator (W - I) and its closed-form step-size bound
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, Field

from config import get_spirit_config
from utils.fourier import SamplingMask, fft2_unitary, ifft2_unitary, undersample
from utils.tensor_io import MultiCoilImage, MultiCoilKSpace

logger = logging.getLogger(__name__)


class CalibrationError(ValueError):
    """Kernel calibration cannot be set up or solved"""


@dataclass(frozen=True, eq=False)
class SpiritKernelSet:
    """
    k-space kernels K[j, i] of shape (J, J, k, k)

    K[j, i] maps the k x k neighbourhood of coil i to the centre sample of coil j
    through circular convolution (K * k)[p] = sum_d K[h + d] k[p - d], h = k // 2.
    """
    kernels: np.ndarray
    tikhonov: float = 0.0
    residual: Optional[float] = None

    def __post_init__(self):
        kernels = np.array(self.kernels, dtype=np.complex128, copy=True)
        if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1] or kernels.shape[2] != kernels.shape[3]:
            raise CalibrationError(f"kernels must have shape (J, J, k, k), got {kernels.shape}")
        if kernels.shape[2] % 2 == 0:
            raise CalibrationError(f"kernel size must be odd, got {kernels.shape[2]}")
        kernels.flags.writeable = False
        object.__setattr__(self, "kernels", kernels)

    @property
    def coil_count(self) -> int:
        return self.kernels.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]

    @property
    def self_center_zero(self) -> bool:
        h = self.kernel_size // 2
        return bool(np.all(self.kernels[np.arange(self.coil_count), np.arange(self.coil_count), h, h] == 0))


@dataclass(frozen=True, eq=False)
class SpiritImageWeights:
    """Diagonals of W[j, i] as images, shape (J, J, rows, cols)"""
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=np.complex128, copy=True)
        if w.ndim != 4 or w.shape[0] != w.shape[1]:
            raise CalibrationError(f"weights must have shape (J, J, rows, cols), got {w.shape}")
        w.flags.writeable = False
        object.__setattr__(self, "w", w)

    @property
    def coil_count(self) -> int:
        return self.w.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.w.shape[2:]


class SpiritBoundReport(BaseModel):
    """Closed-form upper estimates of the SPIRiT system operator's curvature"""
    c_paper: float = Field(ge=0.0)
    c_safe: float = Field(ge=1.0)
    z: int = Field(ge=0, description="offset split index floor(J / 2)")
    per_offset_norms: List[float]
    lambda1: float = Field(gt=0.0)

    @property
    def z_split(self) -> int:
        return self.z

    def bound(self, kind: str) -> float:
        return self.c_paper if kind == "paper" else self.c_safe


def required_band(rows: int, coils: int, kernel_size: int) -> int:
    """Smallest ACS band width giving at least J * k^2 interior calibration equations"""
    interior_rows = rows - kernel_size + 1
    if interior_rows < 1:
        return -1
    return kernel_size - 1 + math.ceil(coils * kernel_size ** 2 / interior_rows)


def _calibration_system(acs: np.ndarray, kernel_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sliding-window matrix over the interior of the ACS block

    Returns:
        (windows, centres): windows has shape (P, J * k * k) ordered coil, row, col;
        centres has shape (J, P)
    """
    coils = acs.shape[0]
    h = kernel_size // 2
    windows = sliding_window_view(acs, (kernel_size, kernel_size), axis=(-2, -1))
    # (J, R, C, k, k) -> (R, C, J, k, k)
    windows = np.moveaxis(windows, 0, 2)
    positions = windows.shape[0] * windows.shape[1]
    matrix = windows.reshape(positions, coils * kernel_size * kernel_size)
    centres = windows[:, :, :, h, h].reshape(positions, coils).T
    return matrix, centres


def _solve_target(matrix: np.ndarray, target: np.ndarray, own_column: int, tikhonov: float) -> np.ndarray:
    keep = np.ones(matrix.shape[1], dtype=bool)
    keep[own_column] = False
    a = matrix[:, keep]
    gram = a.conj().T @ a
    gram[np.diag_indices_from(gram)] += tikhonov
    coeffs = np.zeros(matrix.shape[1], dtype=np.complex128)
    coeffs[keep] = np.linalg.solve(gram, a.conj().T @ target)
    return coeffs


def calibrate_kernels(acs: MultiCoilKSpace, band: Tuple[int, int], kernel_size: int = None,
                      tikhonov: float = None, workers: int = 1) -> SpiritKernelSet:
    """
    Fit SPIRiT kernels by ridge-regularized least squares on the ACS block

    Args:
        acs: Multi-coil k-space (DC at (0, 0)) whose centred band columns are fully sampled
        band: [start, stop) column range in centred coordinates
        kernel_size: Odd kernel width k (default from SpiritConfig)
        tikhonov: Ridge weight; default scale * ||A||_F^2 / columns
        workers: Threads used across target coils

    Returns:
        SpiritKernelSet with K[j, j] centre taps exactly zero
    """
    kernel_size = kernel_size or get_spirit_config().KERNEL_SIZE
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise CalibrationError(f"kernel size must be a positive odd integer, got {kernel_size}")
    start, stop = band
    coils = acs.coil_count
    rows = acs.shape[0]
    block = np.fft.fftshift(acs.data, axes=(-2, -1))[..., start:stop]
    equations = max(rows - kernel_size + 1, 0) * max(block.shape[-1] - kernel_size + 1, 0)
    unknowns = coils * kernel_size ** 2
    if equations < unknowns:
        need = required_band(rows, coils, kernel_size)
        raise CalibrationError(
            f"ACS {rows}x{block.shape[-1]} gives {equations} equations for {unknowns} unknowns; "
            f"need an ACS region of at least {rows}x{need} for {coils} coils and a {kernel_size}x{kernel_size} kernel"
        )

    matrix, centres = _calibration_system(block, kernel_size)
    if tikhonov is None:
        tikhonov = get_spirit_config().TIKHONOV_SCALE * np.linalg.norm(matrix) ** 2 / max(matrix.shape[1] - 1, 1)
    centre_offset = (kernel_size // 2) * kernel_size + kernel_size // 2

    def solve(j):
        return _solve_target(matrix, centres[j], j * kernel_size ** 2 + centre_offset, tikhonov)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            solutions = list(executor.map(solve, range(coils)))
    else:
        solutions = [solve(j) for j in range(coils)]

    # window coefficients sit on k[p - d] with d = h - (a, b); flip to kernel taps K[h + d]
    kernels = np.stack(solutions).reshape(coils, coils, kernel_size, kernel_size)[:, :, ::-1, ::-1]
    residual = _window_residual(matrix, centres, kernels)
    logger.info(f"Calibrated {coils}x{coils} kernels ({kernel_size}x{kernel_size}) from {equations} equations, "
                f"residual {residual:.3e}")
    return SpiritKernelSet(kernels, tikhonov=float(tikhonov), residual=residual)


def _window_residual(matrix: np.ndarray, centres: np.ndarray, kernels: np.ndarray) -> float:
    coils, _, k, _ = kernels.shape
    coeffs = kernels[:, :, ::-1, ::-1].reshape(coils, coils * k * k)
    predicted = coeffs @ matrix.T
    return float(np.linalg.norm(predicted - centres) / max(np.linalg.norm(centres), 1e-300))


def calibration_residual(acs: MultiCoilKSpace, band: Tuple[int, int], kernels: SpiritKernelSet) -> float:
    """||predicted - actual|| / ||actual|| over interior ACS positions"""
    start, stop = band
    block = np.fft.fftshift(acs.data, axes=(-2, -1))[..., start:stop]
    matrix, centres = _calibration_system(block, kernels.kernel_size)
    return _window_residual(matrix, centres, kernels.kernels)


def pad_kernels(kernels: SpiritKernelSet, rows: int, cols: int) -> np.ndarray:
    """Place K[h + d] at grid index (d mod rows, d mod cols)"""
    k = kernels.kernel_size
    if k > rows or k > cols:
        raise CalibrationError(f"kernel size {k} exceeds grid {rows}x{cols}")
    h = k // 2
    padded = np.zeros(kernels.kernels.shape[:2] + (rows, cols), dtype=np.complex128)
    offsets = np.arange(-h, h + 1)
    padded[:, :, (offsets % rows)[:, None], (offsets % cols)[None, :]] = kernels.kernels
    return padded


def kernels_to_image_weights(kernels: SpiritKernelSet, rows: int, cols: int) -> SpiritImageWeights:
    """
    Image-domain diagonals of the k-space convolutions

    With the unitary DFT, F^H (K * F x) = w x where w = rows * cols * ifft2(K_padded).
    """
    padded = pad_kernels(kernels, rows, cols)
    w = rows * cols * np.fft.ifft2(padded, axes=(-2, -1))
    return SpiritImageWeights(w)


def kspace_convolve(kernels: SpiritKernelSet, kspace: np.ndarray) -> np.ndarray:
    """Direct circular k-space convolution: out[j] = sum_i K[j, i] * k_i"""
    k = kernels.kernel_size
    h = k // 2
    out = np.zeros_like(kspace, dtype=np.complex128)
    for a in range(k):
        for b in range(k):
            shifted = np.roll(kspace, shift=(a - h, b - h), axis=(-2, -1))
            out += np.einsum("ji,irc->jrc", kernels.kernels[:, :, a, b], shifted)
    return out


def _check_weights(x: np.ndarray, w: np.ndarray):
    if x.shape != (w.shape[0],) + w.shape[2:]:
        raise CalibrationError(f"coil images {x.shape} do not match weights {w.shape}")


def consistency_apply(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(W - I) x on raw arrays"""
    _check_weights(x, w)
    return np.einsum("jirc,irc->jrc", w, x) - x


def consistency_adjoint(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(W - I)^H y on raw arrays"""
    _check_weights(y, w)
    return np.einsum("jirc,jrc->irc", np.conj(w), y) - y


def spirit_consistency_apply(x: MultiCoilImage, w: SpiritImageWeights) -> MultiCoilImage:
    """Coil j output = sum_i w[j][i] x_i - x_j"""
    return MultiCoilImage(consistency_apply(x.data, w.w))


def spirit_consistency_adjoint(y: MultiCoilImage, w: SpiritImageWeights) -> MultiCoilImage:
    """Coil i output = sum_j conj(w[j][i]) y_j - y_i"""
    return MultiCoilImage(consistency_adjoint(y.data, w.w))


def offset_blocks(w: SpiritImageWeights) -> np.ndarray:
    """
    Diagonals of the blocks of Z = (W - I)^H (W - I)

    Returns:
        z of shape (J, J, rows, cols) with z[i, j] = sum_m conj(d[m, i]) d[m, j], d = w - delta
    """
    coils = w.coil_count
    d = w.w.copy()
    d[np.arange(coils), np.arange(coils)] -= 1.0
    return np.einsum("mirc,mjrc->ijrc", np.conj(d), d)


def spirit_bound(w: SpiritImageWeights, lambda1: float) -> SpiritBoundReport:
    """
    Closed-form bound on the largest eigenvalue of the SPIRiT normal operator

    Per-offset norms are max |z[j, j + i](r)| over block index j and pixel r.
    c_paper sums offsets -z..z and then z+1..J-1 once (paired offsets beyond J/2
    occupy disjoint block rows, so each pair has the norm of one member);
    c_safe = 1 + lambda1 * c_paper also covers the sampling term.
    """
    if lambda1 <= 0:
        raise ValueError(f"lambda1 must be positive, got {lambda1}")
    coils = w.coil_count
    z = offset_blocks(w)
    norms = []
    for offset in range(coils):
        blocks = [np.max(np.abs(z[j, j + offset])) for j in range(coils - offset)]
        norms.append(float(max(blocks)))

    z_split = coils // 2
    centre = norms[0] + 2.0 * sum(norms[1:z_split + 1])
    tail = sum(norms[z_split + 1:])
    c_paper = centre + tail
    report = SpiritBoundReport(
        c_paper=c_paper,
        c_safe=1.0 + lambda1 * c_paper,
        z=z_split,
        per_offset_norms=norms,
        lambda1=lambda1,
    )
    logger.info(f"SPIRiT bound: c_paper={report.c_paper:.6g}, c_safe={report.c_safe:.6g} (J={coils}, lambda1={lambda1})")
    return report


class SpiritOperator:
    """
    Stacked SPIRiT system operator A x = [U F x ; sqrt(lambda1) (W - I) x]

    forward returns a (2J, rows, cols) array; the measurement counterpart is
    [y ; 0] so that 0.5 ||A x - [y; 0]||^2 is the smooth part of the objective.
    """

    def __init__(self, weights: SpiritImageWeights, mask: SamplingMask, lambda1: float):
        if tuple(weights.shape) != tuple(mask.shape):
            raise CalibrationError(f"weights grid {weights.shape} does not match mask {mask.shape}")
        if lambda1 <= 0:
            raise ValueError(f"lambda1 must be positive, got {lambda1}")
        self.weights = weights
        self.mask = mask
        self.lambda1 = lambda1
        self._scale = np.sqrt(lambda1)
        self.forward_count = 0
        self.adjoint_count = 0

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.weights.coil_count,) + tuple(self.weights.shape)

    @property
    def applications(self) -> int:
        return self.forward_count + self.adjoint_count

    def reset_counters(self):
        self.forward_count = 0
        self.adjoint_count = 0

    def measurement(self, y: np.ndarray) -> np.ndarray:
        """[y ; 0] in the stacked range space"""
        return np.concatenate([np.asarray(y, dtype=np.complex128), np.zeros(self.image_shape, dtype=np.complex128)])

    def forward(self, x: np.ndarray, count: bool = True) -> np.ndarray:
        x = np.asarray(x)
        if x.shape != self.image_shape:
            raise CalibrationError(f"coil images {x.shape} do not match {self.image_shape}")
        self.forward_count += int(count)
        sampled = undersample(fft2_unitary(x), self.mask)
        return np.concatenate([sampled, self._scale * consistency_apply(x, self.weights.w)])

    def adjoint(self, r: np.ndarray, count: bool = True) -> np.ndarray:
        r = np.asarray(r)
        coils = self.weights.coil_count
        if r.shape != (2 * coils,) + tuple(self.weights.shape):
            raise CalibrationError(f"range array {r.shape} does not match stacked SPIRiT range")
        self.adjoint_count += int(count)
        data_part = ifft2_unitary(undersample(r[:coils], self.mask))
        return data_part + self._scale * consistency_adjoint(r[coils:], self.weights.w)

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(x))

    def zero_filled(self, y: np.ndarray) -> np.ndarray:
        """F^H U^T y, the initial iterate"""
        return ifft2_unitary(undersample(np.asarray(y), self.mask))


def spirit_normal_apply(x: MultiCoilImage, w: SpiritImageWeights, mask: SamplingMask,
                        lambda1: float) -> MultiCoilImage:
    """F^H U^T U F x + lambda1 (W - I)^H (W - I) x"""
    data = x.data
    out = ifft2_unitary(undersample(fft2_unitary(data), mask))
    out = out + lambda1 * consistency_adjoint(consistency_apply(data, w.w), w.w)
    return MultiCoilImage(out)
