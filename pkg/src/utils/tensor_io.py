"""
Complex array containers and the JSON-sidecar + raw-binary array format
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Union

import numpy as np
from pydantic import BaseModel, ValidationError, field_validator

logger = logging.getLogger(__name__)

_DTYPES = {"c64": np.dtype("<c8"), "c128": np.dtype("<c16")}


class ArrayFormatError(ValueError):
    """Sidecar and payload disagree, or the sidecar itself is malformed"""


class ArrayIOError(OSError):
    """An array file could not be read or written"""


def _frozen(data, ndim: int, name: str) -> np.ndarray:
    arr = np.array(data, dtype=np.complex128, order="C", copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{name} expects a {ndim}-D array, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must not be empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ComplexImage:
    """Single complex image, rows x cols, row-major, double precision"""
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 2, "ComplexImage"))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class MultiCoilImage:
    """Stack of J coil images sharing one grid; axis 0 is the coil index"""
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 3, "MultiCoilImage"))

    @property
    def coil_count(self) -> int:
        return self.data.shape[0]

    @property
    def coils(self) -> List[ComplexImage]:
        return [ComplexImage(c) for c in self.data]

    @property
    def shape(self):
        return self.data.shape[1:]


@dataclass(frozen=True, eq=False)
class MultiCoilKSpace:
    """Per-coil k-space grids, DC at index (0, 0); axis 0 is the coil index"""
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 3, "MultiCoilKSpace"))

    @property
    def coil_count(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape[1:]


ArrayContainer = Union[ComplexImage, MultiCoilImage, MultiCoilKSpace]


class ArrayHeader(BaseModel):
    """Sidecar describing a binary payload"""
    dims: List[int]
    dtype: Literal["c64", "c128"] = "c128"
    order: Literal["row-major"] = "row-major"
    role: str = ""

    @field_validator("dims")
    @classmethod
    def _positive_dims(cls, dims: List[int]) -> List[int]:
        if not dims:
            raise ValueError("dims must not be empty")
        if any(d <= 0 for d in dims):
            raise ValueError(f"dims must be positive, got {dims}")
        return dims

    @property
    def element_count(self) -> int:
        return int(np.prod(self.dims))


def _default_role(obj: ArrayContainer) -> str:
    if isinstance(obj, MultiCoilKSpace):
        return "kspace"
    if isinstance(obj, MultiCoilImage):
        return "coil-images"
    return "image"


def save_ndarray(stem: Union[str, Path], array: np.ndarray, role: str) -> None:
    """
    Write any complex-valued ndarray as `<stem>.json` + `<stem>.bin`

    Args:
        stem: Output path without extension
        array: Array to store; converted to complex128 little-endian
        role: Free-text tag stored in the sidecar
    """
    stem = Path(stem)
    payload = np.ascontiguousarray(array, dtype=_DTYPES["c128"])
    header = ArrayHeader(dims=list(payload.shape), dtype="c128", role=role)
    json_path = stem.with_name(stem.name + ".json")
    bin_path = stem.with_name(stem.name + ".bin")
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(header.model_dump()), encoding="utf-8")
        bin_path.write_bytes(payload.tobytes(order="C"))
    except OSError as e:
        raise ArrayIOError(f"Could not write array to {bin_path}: {e}") from e
    logger.debug(f"Saved {role} array {payload.shape} to {bin_path}")


def save_array(stem: Union[str, Path], obj: ArrayContainer, role: str = None) -> None:
    """
    Write a container in the sidecar + binary format

    Args:
        stem: Output path without extension
        obj: ComplexImage, MultiCoilImage or MultiCoilKSpace
        role: Optional tag overriding the container's default role
    """
    save_ndarray(stem, obj.data, role or _default_role(obj))


def read_header(stem: Union[str, Path]) -> ArrayHeader:
    """Read and validate `<stem>.json`"""
    stem = Path(stem)
    json_path = stem.with_name(stem.name + ".json")
    try:
        raw = json_path.read_text(encoding="utf-8")
    except OSError as e:
        raise ArrayIOError(f"Could not read array header {json_path}: {e}") from e
    try:
        return ArrayHeader.model_validate(json.loads(raw))
    except (json.JSONDecodeError, ValidationError) as e:
        raise ArrayFormatError(f"Malformed array header {json_path}: {e}") from e


def load_ndarray(stem: Union[str, Path]) -> np.ndarray:
    """
    Read `<stem>.json` + `<stem>.bin` into a complex128 ndarray

    Returns:
        Writable complex128 array with the sidecar's dims
    """
    stem = Path(stem)
    header = read_header(stem)
    bin_path = stem.with_name(stem.name + ".bin")
    try:
        payload = bin_path.read_bytes()
    except OSError as e:
        raise ArrayIOError(f"Could not read array payload {bin_path}: {e}") from e

    dtype = _DTYPES[header.dtype]
    expected = header.element_count * dtype.itemsize
    if len(payload) != expected:
        raise ArrayFormatError(
            f"{bin_path} holds {len(payload)} bytes but dims {header.dims} ({header.dtype}) need {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).astype(np.complex128).reshape(header.dims)
    return arr


def load_array(stem: Union[str, Path]) -> ArrayContainer:
    """
    Exact inverse of save_array

    The container type follows the sidecar: 2-D arrays load as ComplexImage,
    3-D arrays as MultiCoilKSpace when role is "kspace" and MultiCoilImage otherwise.
    """
    header = read_header(stem)
    arr = load_ndarray(stem)
    try:
        if arr.ndim == 2:
            return ComplexImage(arr)
        if arr.ndim == 3:
            if header.role == "kspace":
                return MultiCoilKSpace(arr)
            return MultiCoilImage(arr)
    except ValueError as e:
        raise ArrayFormatError(f"Invalid array contents in {stem}: {e}") from e
    raise ArrayFormatError(f"Cannot map dims {header.dims} (role '{header.role}') to an image container")


def inner_product(a: np.ndarray, b: np.ndarray) -> complex:
    """
    Complex inner product sum(conj(a_i) * b_i) over flattened inputs

    Args:
        a: First operand (conjugated)
        b: Second operand

    Returns:
        Complex scalar
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.size != b.size:
        raise ValueError(f"inner_product length mismatch: {a.size} vs {b.size}")
    return complex(np.vdot(a.ravel(), b.ravel()))


def ssos(coil_data: np.ndarray) -> np.ndarray:
    """Square root of the sum of squares across the leading coil axis"""
    return np.sqrt(np.sum(np.abs(coil_data) ** 2, axis=0))
