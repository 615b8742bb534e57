"""
Unitary 2-D DFT and Cartesian phase-encode undersampling
"""
import logging
import math
from dataclasses import dataclass
from typing import Literal, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from config import get_sampling_config
from utils.tensor_io import ComplexImage, MultiCoilKSpace

logger = logging.getLogger(__name__)


class MaskError(ValueError):
    """Infeasible sampling request or mask/data dimension mismatch"""


def fft2_unitary(img: Union[ComplexImage, np.ndarray]):
    """
    Orthonormal 2-D DFT over the last two axes, DC at index (0, 0)

    Args:
        img: ComplexImage or ndarray (leading axes are treated as a batch)

    Returns:
        Same container type as the input
    """
    if isinstance(img, ComplexImage):
        return ComplexImage(np.fft.fft2(img.data, norm="ortho"))
    return np.fft.fft2(np.asarray(img), axes=(-2, -1), norm="ortho")


def ifft2_unitary(k: Union[ComplexImage, np.ndarray]):
    """Inverse (and adjoint) of fft2_unitary"""
    if isinstance(k, ComplexImage):
        return ComplexImage(np.fft.ifft2(k.data, norm="ortho"))
    return np.fft.ifft2(np.asarray(k), axes=(-2, -1), norm="ortho")


class MaskSpec(BaseModel):
    """Parameters of a 1-D Cartesian mask (whole columns are kept)"""
    pattern: Literal["cartesian-1d"] = "cartesian-1d"
    rate: float = Field(default=get_sampling_config().RATE, gt=0.0, le=1.0)
    acs_lines: int = Field(default=get_sampling_config().ACS_LINES, ge=1)
    seed: int = Field(default=get_sampling_config().SEED, ge=0)
    density: Literal["uniform-random", "variable-density-gaussian"] = get_sampling_config().DENSITY
    gaussian_width: float = Field(default=get_sampling_config().GAUSSIAN_WIDTH, gt=0.0)


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """
    Binary undersampling pattern U

    `keep` uses the internal convention (DC at (0, 0)); `acs_band` is the
    [start, stop) column range of the fully sampled center in centered
    (fftshifted) column coordinates.
    """
    keep: np.ndarray
    acs_band: Tuple[int, int]

    def __post_init__(self):
        keep = np.array(self.keep, dtype=bool, copy=True)
        if keep.ndim != 2:
            raise MaskError(f"mask must be 2-D, got shape {keep.shape}")
        keep.flags.writeable = False
        object.__setattr__(self, "keep", keep)
        start, stop = self.acs_band
        if not (0 <= start <= stop <= keep.shape[1]):
            raise MaskError(f"ACS band {self.acs_band} outside {keep.shape[1]} columns")
        if not np.all(self.centered()[:, start:stop]):
            raise MaskError(f"ACS band {self.acs_band} is not fully sampled")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.keep.shape

    @property
    def rate(self) -> float:
        return float(self.keep.mean())

    def centered(self) -> np.ndarray:
        """Mask with DC in the middle, as stored on disk"""
        return np.fft.fftshift(self.keep)

    @classmethod
    def from_centered(cls, centered: np.ndarray, acs_band: Tuple[int, int] = None) -> "SamplingMask":
        """Build from a centered boolean grid; the ACS band is inferred when omitted"""
        centered = np.real(np.asarray(centered)) != 0
        if acs_band is None:
            acs_band = infer_acs_band(centered)
        return cls(keep=np.fft.ifftshift(centered), acs_band=acs_band)

    def acs_kspace(self, kspace: np.ndarray) -> np.ndarray:
        """Centered ACS block of multi-coil k-space data, shape (J, rows, band)"""
        start, stop = self.acs_band
        return np.fft.fftshift(kspace, axes=(-2, -1))[..., start:stop]


def infer_acs_band(centered: np.ndarray) -> Tuple[int, int]:
    """Widest run of fully sampled columns containing the center column"""
    full = np.all(centered, axis=0)
    cols = full.size
    mid = cols // 2
    if not full[mid]:
        return (mid, mid)
    start, stop = mid, mid + 1
    while start > 0 and full[start - 1]:
        start -= 1
    while stop < cols and full[stop]:
        stop += 1
    return (start, stop)


def _round_half_away(value: float) -> int:
    return int(math.floor(abs(value) + 0.5)) * (1 if value >= 0 else -1)


def _column_pdf(spec: MaskSpec, cols: int, acs_band: Tuple[int, int]) -> np.ndarray:
    if spec.density == "uniform-random":
        pdf = np.ones(cols)
    else:
        c = np.arange(cols) - cols / 2
        pdf = np.exp(-0.5 * (c / (spec.gaussian_width * cols)) ** 2)
    pdf[acs_band[0]:acs_band[1]] = 0.0
    return pdf


def make_mask(spec: MaskSpec, rows: int, cols: int) -> SamplingMask:
    """
    Build a deterministic 1-D Cartesian mask selecting whole columns

    Args:
        spec: Mask parameters
        rows: Readout size
        cols: Phase-encode size

    Returns:
        SamplingMask with round(rate * cols) columns kept, ACS centered
    """
    if spec.acs_lines > cols:
        raise MaskError(f"acs_lines={spec.acs_lines} exceeds {cols} columns")
    n_sel = cols if spec.rate >= 1.0 else _round_half_away(spec.rate * cols)
    if n_sel < spec.acs_lines:
        raise MaskError(
            f"rate {spec.rate} keeps {n_sel} of {cols} columns, fewer than acs_lines={spec.acs_lines}"
        )

    start = cols // 2 - spec.acs_lines // 2
    acs_band = (start, start + spec.acs_lines)
    selected = np.zeros(cols, dtype=bool)
    selected[acs_band[0]:acs_band[1]] = True

    remaining = n_sel - spec.acs_lines
    if remaining > 0:
        pdf = _column_pdf(spec, cols, acs_band)
        candidates = np.flatnonzero(pdf > 0)
        drawn = min(remaining, candidates.size)
        if drawn:
            rng = np.random.default_rng(spec.seed)
            weights = pdf[candidates] / pdf[candidates].sum()
            selected[rng.choice(candidates, size=drawn, replace=False, p=weights)] = True
        shortfall = remaining - drawn
        if shortfall:
            # pdf underflowed in the tails: take the highest-pdf columns left, nearest the center first
            spare = np.flatnonzero(~selected)
            nearest = spare[np.argsort(np.abs(spare - cols / 2), kind="stable")]
            selected[nearest[:shortfall]] = True
            logger.debug(f"Filled {shortfall} columns deterministically, gaussian_width={spec.gaussian_width}")

    centered = np.broadcast_to(selected[None, :], (rows, cols))
    mask = SamplingMask.from_centered(centered, acs_band)
    logger.info(f"Built {spec.density} mask {rows}x{cols}: {n_sel} columns, rate {mask.rate:.4f}")
    return mask


def _check_dims(data_shape, mask: SamplingMask):
    if tuple(data_shape[-2:]) != tuple(mask.shape):
        raise MaskError(f"data grid {tuple(data_shape[-2:])} does not match mask {mask.shape}")


def apply_undersample(k: MultiCoilKSpace, mask: SamplingMask) -> MultiCoilKSpace:
    """Zero every k-space sample outside the mask (U^T U)"""
    _check_dims(k.data.shape, mask)
    return MultiCoilKSpace(np.where(mask.keep, k.data, 0))


def undersample(k: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Array-level U^T U used inside the operators"""
    _check_dims(k.shape, mask)
    return np.where(mask.keep, k, 0)


def projector_apply(x: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Q x = F^H U^T U F x"""
    return ifft2_unitary(undersample(fft2_unitary(x), mask))
