"""
Shift-invariant (undecimated) wavelet tight frame and the projected prox step
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, Union

import numpy as np
import pywt
from pydantic import BaseModel, Field

from config import get_frame_config
from utils.tensor_io import ComplexImage

logger = logging.getLogger(__name__)


class FrameError(ValueError):
    """Frame parameters or coefficient shapes do not fit the data"""


class FrameSpec(BaseModel):
    """Wavelet family and number of decomposition levels"""
    filter_family: Literal["haar", "db4"] = get_frame_config().FILTER_FAMILY
    level_count: int = Field(default=get_frame_config().LEVELS, ge=1)

    @property
    def band_count(self) -> int:
        return 3 * self.level_count + 1

    def check_dims(self, rows: int, cols: int) -> None:
        if 2 ** self.level_count > min(rows, cols):
            raise FrameError(
                f"{self.level_count} levels need 2^{self.level_count} <= min(rows, cols), got {rows}x{cols}"
            )


@dataclass
class FrameCoefficients:
    """
    Undecimated subbands, array shape (..., bands, rows, cols)

    Band order: (LH, HL, HH) for level 1, then level 2, ..., scaling band last.
    """
    bands: np.ndarray
    level_count: int
    filter_family: str

    @property
    def band_list(self):
        return [self.bands[..., b, :, :] for b in range(self.bands.shape[-3])]


def _filter_response(taps: np.ndarray, n: int, dilation: int) -> np.ndarray:
    """Periodic DTFT of a dilated filter sampled on the n-point DFT grid"""
    k = np.arange(n)[:, None]
    m = np.arange(len(taps))[None, :]
    return np.exp(-2j * np.pi * k * m * dilation / n) @ taps


class TightFrame:
    """
    Precomputed Fourier responses R_b of every subband for one grid size

    Analysis is ifft2(R_b * fft2(x)); synthesis sums ifft2(conj(R_b) * fft2(c_b)).
    The 1/sqrt(2) filter scaling makes sum_b |R_b|^2 = 1, hence Psi* Psi = I.
    """

    def __init__(self, spec: FrameSpec, rows: int, cols: int):
        spec.check_dims(rows, cols)
        self.spec = spec
        self.shape = (rows, cols)

        wavelet = pywt.Wavelet(spec.filter_family)
        lo = np.asarray(wavelet.dec_lo, dtype=float) / np.sqrt(2.0)
        hi = np.asarray(wavelet.dec_hi, dtype=float) / np.sqrt(2.0)

        responses = []
        acc_r = np.ones(rows, dtype=complex)
        acc_c = np.ones(cols, dtype=complex)
        for level in range(spec.level_count):
            dilation = 2 ** level
            lo_r, hi_r = _filter_response(lo, rows, dilation), _filter_response(hi, rows, dilation)
            lo_c, hi_c = _filter_response(lo, cols, dilation), _filter_response(hi, cols, dilation)
            for fr, fc in ((lo_r, hi_c), (hi_r, lo_c), (hi_r, hi_c)):
                responses.append(np.outer(acc_r * fr, acc_c * fc))
            acc_r = acc_r * lo_r
            acc_c = acc_c * lo_c
        responses.append(np.outer(acc_r, acc_c))

        self.responses = np.stack(responses)
        self.responses.flags.writeable = False
        self._conj_responses = np.conj(self.responses)
        self._conj_responses.flags.writeable = False

    @property
    def band_count(self) -> int:
        return self.responses.shape[0]

    def _check_image(self, x: np.ndarray):
        if tuple(x.shape[-2:]) != self.shape:
            raise FrameError(f"image grid {tuple(x.shape[-2:])} does not match frame grid {self.shape}")

    def analyze(self, x: np.ndarray) -> np.ndarray:
        """Psi x for an image or a stack of images (leading axes kept)"""
        x = np.asarray(x)
        self._check_image(x)
        spectrum = np.fft.fft2(x, axes=(-2, -1))[..., None, :, :]
        return np.fft.ifft2(spectrum * self.responses, axes=(-2, -1))

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Psi* c, the adjoint of analyze"""
        coeffs = np.asarray(coeffs)
        if coeffs.ndim < 3 or tuple(coeffs.shape[-3:]) != (self.band_count,) + self.shape:
            raise FrameError(
                f"coefficient shape {coeffs.shape} does not match ({self.band_count}, {self.shape[0]}, {self.shape[1]})"
            )
        spectrum = np.fft.fft2(coeffs, axes=(-2, -1)) * self._conj_responses
        return np.fft.ifft2(spectrum.sum(axis=-3), axes=(-2, -1))

    def shrink(self, coeffs: np.ndarray, threshold: float, exempt_scaling_band: bool = False) -> np.ndarray:
        return shrink_array(coeffs, threshold, exempt_scaling_band)

    def projected_prox(self, x: np.ndarray, threshold: float, exempt_scaling_band: bool = False) -> np.ndarray:
        """Psi* T_threshold(Psi x)"""
        return self.synthesize(shrink_array(self.analyze(x), threshold, exempt_scaling_band))


@lru_cache(maxsize=16)
def _cached_frame(filter_family: str, level_count: int, rows: int, cols: int) -> TightFrame:
    return TightFrame(FrameSpec(filter_family=filter_family, level_count=level_count), rows, cols)


def get_frame(spec: FrameSpec, rows: int, cols: int) -> TightFrame:
    """
    Get a shared TightFrame for the given spec and grid

    Args:
        spec: Frame parameters
        rows: Image rows
        cols: Image columns

    Returns:
        Cached TightFrame (responses are read-only, safe to share across threads)
    """
    spec.check_dims(rows, cols)
    return _cached_frame(spec.filter_family, spec.level_count, rows, cols)


def shrink_array(coeffs: np.ndarray, threshold: float, exempt_scaling_band: bool = False) -> np.ndarray:
    """Complex soft-thresholding max(|a| - t, 0) * a / |a| on a raw coefficient array"""
    if threshold < 0:
        raise FrameError(f"threshold must be nonnegative, got {threshold}")
    mag = np.abs(coeffs)
    scale = np.maximum(mag - threshold, 0.0) / np.where(mag > 0, mag, 1.0)
    out = coeffs * scale
    if exempt_scaling_band:
        out[..., -1, :, :] = coeffs[..., -1, :, :]
    return out


def _image_array(img: Union[ComplexImage, np.ndarray]) -> np.ndarray:
    return img.data if isinstance(img, ComplexImage) else np.asarray(img)


def analyze(img: Union[ComplexImage, np.ndarray], spec: FrameSpec) -> FrameCoefficients:
    """
    Undecimated wavelet analysis

    Args:
        img: Image (or coil stack, analysed coil by coil)
        spec: Frame parameters

    Returns:
        FrameCoefficients whose energy equals the image energy
    """
    x = _image_array(img)
    frame = get_frame(spec, *x.shape[-2:])
    return FrameCoefficients(frame.analyze(x), spec.level_count, spec.filter_family)


def synthesize(coeffs: FrameCoefficients, spec: FrameSpec):
    """Adjoint of analyze; returns a ComplexImage for single images, an ndarray for stacks"""
    if coeffs.level_count != spec.level_count or coeffs.filter_family != spec.filter_family:
        raise FrameError(
            f"coefficients are {coeffs.filter_family}/{coeffs.level_count}, spec is {spec.filter_family}/{spec.level_count}"
        )
    frame = get_frame(spec, *coeffs.bands.shape[-2:])
    x = frame.synthesize(coeffs.bands)
    return ComplexImage(x) if x.ndim == 2 else x


def soft_threshold(coeffs: FrameCoefficients, threshold: float,
                   exempt_scaling_band: bool = False) -> FrameCoefficients:
    """Pointwise complex soft-thresholding of every band"""
    return FrameCoefficients(
        shrink_array(coeffs.bands, threshold, exempt_scaling_band),
        coeffs.level_count,
        coeffs.filter_family,
    )


def projected_prox(img: Union[ComplexImage, np.ndarray], threshold: float, spec: FrameSpec,
                   exempt_scaling_band: bool = False):
    """synthesize(soft_threshold(analyze(img)))"""
    return synthesize(soft_threshold(analyze(img, spec), threshold, exempt_scaling_band), spec)
