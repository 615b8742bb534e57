"""
Synthetic multi-coil phantoms standing in for scanner data
"""
import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from phantominator import shepp_logan
from pydantic import BaseModel, Field

from config import get_phantom_config
from utils.fourier import fft2_unitary
from utils.sense import SensitivitySet, synth_sensitivities
from utils.tensor_io import ComplexImage, MultiCoilImage, MultiCoilKSpace

logger = logging.getLogger(__name__)

_cfg = get_phantom_config()


class PhantomSpec(BaseModel):
    """Phantom kind, grid, coil count, noise level and seed"""
    kind: Literal["shepp-logan", "smooth-blobs"] = _cfg.KIND
    rows: int = Field(default=_cfg.ROWS, ge=2)
    cols: int = Field(default=_cfg.COLS, ge=2)
    coils: int = Field(default=_cfg.COILS, ge=1)
    noise_std: float = Field(default=_cfg.NOISE_STD, ge=0.0)
    seed: int = Field(default=_cfg.SEED, ge=0)


@dataclass(frozen=True)
class PhantomBundle:
    truth: ComplexImage
    coils: MultiCoilImage
    kspace: MultiCoilKSpace
    maps: SensitivitySet


def _grid(rows: int, cols: int):
    return np.meshgrid(np.linspace(-1.0, 1.0, rows), np.linspace(-1.0, 1.0, cols), indexing="ij")


def _shepp_logan(rows: int, cols: int) -> np.ndarray:
    n = max(rows, cols)
    full = np.asarray(shepp_logan(n), dtype=float)
    r0 = (n - rows) // 2
    c0 = (n - cols) // 2
    return full[r0:r0 + rows, c0:c0 + cols]


def _smooth_blobs(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(rows, cols)
    radius = np.sqrt((yy / 0.8) ** 2 + (xx / 0.7) ** 2)
    image = 0.4 * np.exp(-radius ** 8)
    for _ in range(5):
        cy, cx = rng.uniform(-0.45, 0.45, size=2)
        width = rng.uniform(0.12, 0.3)
        amplitude = rng.uniform(0.2, 0.6)
        image += amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2)) * np.exp(-radius ** 8)
    return image


def _smooth_phase(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(rows, cols)
    ay, ax = rng.uniform(-0.5, 0.5, size=2)
    return np.pi * (ay * yy + ax * xx) / 2 + 0.3 * np.sin(np.pi * yy * xx)


def gen_phantom(spec: PhantomSpec) -> PhantomBundle:
    """
    Generate truth image, coil images, fully sampled k-space and maps

    Args:
        spec: Phantom parameters

    Returns:
        PhantomBundle; k-space is the unitary FFT of each coil image plus complex
        Gaussian noise whose real and imaginary parts have std noise_std / sqrt(2)
    """
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "shepp-logan":
        magnitude = _shepp_logan(spec.rows, spec.cols)
    else:
        magnitude = _smooth_blobs(spec.rows, spec.cols, rng)
    truth = magnitude * np.exp(1j * _smooth_phase(spec.rows, spec.cols, rng))

    maps = synth_sensitivities(spec.rows, spec.cols, spec.coils, seed=spec.seed)
    coil_images = maps.maps * truth[None]
    kspace = fft2_unitary(coil_images)
    if spec.noise_std > 0:
        noise = rng.standard_normal(kspace.shape) + 1j * rng.standard_normal(kspace.shape)
        kspace = kspace + spec.noise_std / np.sqrt(2.0) * noise

    logger.info(f"Generated {spec.kind} phantom {spec.rows}x{spec.cols}, {spec.coils} coils, noise {spec.noise_std}")
    return PhantomBundle(
        truth=ComplexImage(truth),
        coils=MultiCoilImage(coil_images),
        kspace=MultiCoilKSpace(kspace),
        maps=maps,
    )
