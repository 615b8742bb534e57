"""
SENSE system operator A = U F C, coil sensitivity maps and the SENSE step-size bound
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from utils.fourier import SamplingMask, fft2_unitary, ifft2_unitary, undersample
from utils.tensor_io import ComplexImage, MultiCoilKSpace, ssos

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-8
SSOS_FLOOR = 1e-8


class SensitivityError(ValueError):
    """Sensitivity maps or data do not fit the requested operation"""


@dataclass(frozen=True, eq=False)
class SensitivitySet:
    """Diagonals of the coil modulation matrices C_j, shape (J, rows, cols), sum_j |C_j|^2 = 1"""
    maps: np.ndarray

    def __post_init__(self):
        maps = np.array(self.maps, dtype=np.complex128, copy=True)
        if maps.ndim != 3 or maps.shape[0] < 1:
            raise SensitivityError(f"maps must have shape (J, rows, cols), got {maps.shape}")
        deviation = np.max(np.abs(np.sum(np.abs(maps) ** 2, axis=0) - 1.0))
        if deviation > NORMALIZATION_TOL:
            raise SensitivityError(f"maps are not normalized: max |sum |C_j|^2 - 1| = {deviation:.3e}")
        maps.flags.writeable = False
        object.__setattr__(self, "maps", maps)

    @property
    def coil_count(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.maps.shape[1:]


def normalize_maps(raw: np.ndarray, floor: float = SSOS_FLOOR) -> np.ndarray:
    """
    Pointwise divide by the coil SSOS

    Pixels whose SSOS falls below floor * max(SSOS) get a uniform 1/sqrt(J) magnitude.
    """
    raw = np.asarray(raw, dtype=np.complex128)
    coils = raw.shape[0]
    combined = ssos(raw)
    weak = combined < floor * combined.max() if combined.max() > 0 else np.ones(combined.shape, dtype=bool)
    if np.any(weak):
        logger.debug(f"SSOS floor hit on {int(weak.sum())} pixels")
    safe = np.where(weak, 1.0, combined)
    return np.where(weak[None], 1.0 / np.sqrt(coils), raw / safe[None])


def synth_sensitivities(rows: int, cols: int, coils: int, seed: int = 0) -> SensitivitySet:
    """
    Smooth synthetic coil maps

    Gaussian lobes centred at J points on a circle around the FOV, each with a
    smooth phase ramp, then normalized so that sum_j |C_j|^2 = 1.

    Args:
        rows: Grid rows
        cols: Grid columns
        coils: Coil count J >= 1
        seed: Seed for the array rotation and phase ramps

    Returns:
        SensitivitySet
    """
    if coils < 1:
        raise SensitivityError(f"coil count must be >= 1, got {coils}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    width = 2.0 * min(rows, cols)
    radius = min(rows, cols) / 2
    rotation = rng.uniform(0.0, 2 * np.pi)

    lobes = []
    for j in range(coils):
        theta = rotation + 2 * np.pi * j / coils
        y0 = radius * np.sin(theta) + rows / 2
        x0 = radius * np.cos(theta) + cols / 2
        magnitude = np.exp(-((xx - x0) ** 2 + (yy - y0) ** 2) / (2 * width))
        ky, kx = rng.uniform(-1.0, 1.0, size=2)
        phase = np.pi * (ky * (yy - rows / 2) / rows + kx * (xx - cols / 2) / cols) + rng.uniform(-np.pi, np.pi)
        lobes.append(magnitude * np.exp(1j * phase))

    maps = normalize_maps(np.stack(lobes))
    logger.info(f"Synthesized {coils} sensitivity maps on {rows}x{cols}")
    return SensitivitySet(maps)


def _raised_cosine(length: int) -> np.ndarray:
    n = np.arange(length)
    return 0.5 * (1.0 - np.cos(2 * np.pi * (n + 1) / (length + 1)))


def estimate_sensitivities(acs_kspace: MultiCoilKSpace, band: Tuple[int, int]) -> SensitivitySet:
    """
    Low-resolution sensitivity estimate from the fully sampled centre

    Keeps the centred column band, apodizes it with a raised cosine, inverse
    transforms each coil and divides by the SSOS.

    Args:
        acs_kspace: Multi-coil k-space, DC at (0, 0), band columns fully sampled
        band: [start, stop) column range in centred coordinates

    Returns:
        Normalized SensitivitySet
    """
    start, stop = band
    cols = acs_kspace.shape[1]
    if not (0 <= start < stop <= cols):
        raise SensitivityError(f"ACS band {band} is empty or outside {cols} columns")

    centered = np.fft.fftshift(acs_kspace.data, axes=(-2, -1))
    window = np.zeros(cols)
    window[start:stop] = _raised_cosine(stop - start)
    lowres = ifft2_unitary(np.fft.ifftshift(centered * window[None, None, :], axes=(-2, -1)))

    maps = normalize_maps(lowres)
    logger.info(f"Estimated {acs_kspace.coil_count} sensitivity maps from {stop - start} ACS columns")
    return SensitivitySet(maps)


class SenseOperator:
    """
    A = U F C with forward/adjoint application counters

    Each solver run owns one instance; counters are not shared between threads.
    """

    def __init__(self, maps: SensitivitySet, mask: SamplingMask):
        if tuple(maps.shape) != tuple(mask.shape):
            raise SensitivityError(f"maps grid {maps.shape} does not match mask {mask.shape}")
        self.maps = maps
        self.mask = mask
        self._conj_maps = np.conj(maps.maps)
        self.forward_count = 0
        self.adjoint_count = 0

    @property
    def image_shape(self) -> Tuple[int, int]:
        return self.maps.shape

    @property
    def applications(self) -> int:
        return self.forward_count + self.adjoint_count

    def reset_counters(self):
        self.forward_count = 0
        self.adjoint_count = 0

    def forward(self, x: np.ndarray, count: bool = True) -> np.ndarray:
        """Per coil: mask * F(C_j x)"""
        x = np.asarray(x)
        if x.shape != self.image_shape:
            raise SensitivityError(f"image shape {x.shape} does not match {self.image_shape}")
        self.forward_count += int(count)
        return undersample(fft2_unitary(self.maps.maps * x[None]), self.mask)

    def adjoint(self, y: np.ndarray, count: bool = True) -> np.ndarray:
        """sum_j conj(C_j) * F^H(mask * y_j), summed in coil order"""
        y = np.asarray(y)
        if y.shape != self.maps.maps.shape:
            raise SensitivityError(f"k-space shape {y.shape} does not match {self.maps.maps.shape}")
        self.adjoint_count += int(count)
        return np.sum(self._conj_maps * ifft2_unitary(undersample(y, self.mask)), axis=0)

    def normal(self, x: np.ndarray) -> np.ndarray:
        """A^H A x"""
        return self.adjoint(self.forward(x))

    def measurement(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.complex128)

    def zero_filled(self, y: np.ndarray) -> np.ndarray:
        """A^H y, the initial iterate; not counted as a solver application"""
        return self.adjoint(y, count=False)


def sense_forward(x_c: ComplexImage, maps: SensitivitySet, mask: SamplingMask) -> MultiCoilKSpace:
    """Apply A = U F C to a composite image"""
    return MultiCoilKSpace(SenseOperator(maps, mask).forward(x_c.data))


def sense_adjoint(y: MultiCoilKSpace, maps: SensitivitySet, mask: SamplingMask) -> ComplexImage:
    """Apply A^H to multi-coil k-space"""
    return ComplexImage(SenseOperator(maps, mask).adjoint(y.data))


def sense_gamma_bound() -> float:
    """Certified SENSE step size: ||A^H A|| <= 1 whenever sum_j |C_j|^2 = 1"""
    return 1.0
