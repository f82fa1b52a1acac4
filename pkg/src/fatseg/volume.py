"""3D volume and label-map containers, bit-exact file I/O, slicing and padding.

The on-disk container ("FSVOL1") is deliberately minimal: magic bytes, a
little-endian header length, a JSON header and the raw C-order payload.
Every downstream stage moves data through this module.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DimensionError, VolumeFormatError

MAGIC = b"FSVOL1\x00\x00"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_DTYPE_NAMES = {np.dtype("<f4"): "f32", np.dtype("u1"): "u8"}


class LabelScheme(Enum):
    TISSUE = "TISSUE"
    REGION = "REGION"


class SlicePlane(Enum):
    """Anatomical slicing planes; volumes are indexed [z][y][x]."""

    AXIAL = "axial"        # slices index z, arrays are (H, W)
    CORONAL = "coronal"    # slices index y, arrays are (D, W)
    SAGITTAL = "sagittal"  # slices index x, arrays are (D, H)


# Tissue label ids
TISSUE_BACKGROUND = 0
TISSUE_SAT = 1
TISSUE_VAT = 2
TISSUE_BONE = 3
TISSUE_OTHER = 4
TISSUE_CLASS_COUNT = 5

# Region label ids
REGION_BACKGROUND = 0
REGION_THORACIC = 1
REGION_ABDOMINAL = 2
REGION_PELVIC = 3
REGION_CLASS_COUNT = 4

_MAX_LABEL = {LabelScheme.TISSUE: TISSUE_OTHER, LabelScheme.REGION: REGION_PELVIC}


def _check_spacing(spacing_mm: tuple[float, float, float]) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing_mm)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing_mm must be 3 positive reals, got {spacing_mm!r}")
    return spacing


@dataclass
class Volume3D:
    """A 3D scalar image with voxel spacing in millimetres.

    data is float32 indexed [z][y][x]; spacing_mm is (sz, sy, sx).
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DimensionError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing_mm = _check_spacing(self.spacing_mm)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def voxel_volume_mm3(self) -> float:
        sz, sy, sx = self.spacing_mm
        return sz * sy * sx


@dataclass
class LabelMap:
    """Integer-class volume under the tissue or region label scheme."""

    data: np.ndarray
    scheme: LabelScheme
    spacing_mm: tuple[float, float, float]

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3:
            raise DimensionError(f"label data must be 3D, got shape {self.data.shape}")
        self.spacing_mm = _check_spacing(self.spacing_mm)
        if self.data.size and int(self.data.max()) > _MAX_LABEL[self.scheme]:
            raise ValueError(
                f"label id {int(self.data.max())} out of range for scheme {self.scheme.value}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def voxel_volume_mm3(self) -> float:
        sz, sy, sx = self.spacing_mm
        return sz * sy * sx


def _write_container(path: Path, header: dict, payload: bytes) -> None:
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def _read_container(path: Path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic bytes")
    (header_len,) = struct.unpack("<I", blob[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(blob) < start + header_len:
        raise VolumeFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: unreadable header: {exc}") from exc
    return header, blob[start + header_len :]


def write_volume(v: Volume3D | LabelMap, path: str | Path) -> None:
    """Write a volume or label map to the FSVOL1 container format."""
    if isinstance(v, LabelMap):
        dtype, scheme = "u8", v.scheme.value
    else:
        dtype, scheme = "f32", None
    header = {
        "dtype": dtype,
        "shape": list(v.data.shape),
        "spacing_mm": list(v.spacing_mm),
        "scheme": scheme,
    }
    payload = np.ascontiguousarray(v.data, dtype=_DTYPES[dtype]).tobytes()
    _write_container(Path(path), header, payload)


def read_volume(path: str | Path) -> Volume3D | LabelMap:
    """Read an FSVOL1 file; exact inverse of write_volume."""
    header, payload = _read_container(Path(path))
    dtype_name = header.get("dtype")
    if dtype_name not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype {dtype_name!r}")
    shape = header.get("shape")
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(n, int) and n > 0 for n in shape)):
        raise VolumeFormatError(f"{path}: bad shape {shape!r}")
    spacing = header.get("spacing_mm")
    if not (isinstance(spacing, list) and len(spacing) == 3):
        raise VolumeFormatError(f"{path}: bad spacing {spacing!r}")
    dtype = _DTYPES[dtype_name]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    scheme = header.get("scheme")
    if scheme is None:
        if dtype_name != "f32":
            raise VolumeFormatError(f"{path}: u8 payload without a label scheme")
        return Volume3D(data=data.copy(), spacing_mm=tuple(spacing))
    try:
        return LabelMap(data=data.copy(), scheme=LabelScheme(scheme), spacing_mm=tuple(spacing))
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: unknown scheme {scheme!r}") from exc


def write_array(arr: np.ndarray, path: str | Path) -> None:
    """Write a bare float32 array of any rank using the same container layout."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    header = {"dtype": "f32", "shape": list(arr.shape)}
    _write_container(Path(path), header, arr.tobytes())


def read_array(path: str | Path) -> np.ndarray:
    """Read an array written by write_array."""
    header, payload = _read_container(Path(path))
    if header.get("dtype") != "f32":
        raise VolumeFormatError(f"{path}: unknown dtype {header.get('dtype')!r}")
    shape = header.get("shape")
    if not isinstance(shape, list) or any(not isinstance(n, int) or n < 0 for n in shape):
        raise VolumeFormatError(f"{path}: bad shape {shape!r}")
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def extract_slices(data: np.ndarray | Volume3D | LabelMap, plane: SlicePlane) -> list[np.ndarray]:
    """Split a volume into an ordered list of 2D arrays along the given plane.

    AXIAL yields D arrays of (H, W); CORONAL yields H arrays of (D, W);
    SAGITTAL yields W arrays of (D, H). Restacking reproduces the volume.
    """
    arr = data.data if isinstance(data, (Volume3D, LabelMap)) else data
    if plane is SlicePlane.AXIAL:
        return [arr[z] for z in range(arr.shape[0])]
    if plane is SlicePlane.CORONAL:
        return [arr[:, y, :] for y in range(arr.shape[1])]
    return [arr[:, :, x] for x in range(arr.shape[2])]


def restack_slices(slices: list[np.ndarray], plane: SlicePlane) -> np.ndarray:
    """Inverse of extract_slices: rebuild the [z][y][x] volume from slices."""
    stacked = np.stack(slices, axis=0)
    if plane is SlicePlane.AXIAL:
        return stacked
    if plane is SlicePlane.CORONAL:
        return np.transpose(stacked, (1, 0, 2))
    return np.transpose(stacked, (1, 2, 0))


@dataclass(frozen=True)
class PadOffsets:
    """Where a slice was placed on its canvas, so predictions crop back exactly."""

    row: int
    col: int
    height: int
    width: int
    canvas: tuple[int, int] = field(default=(0, 0))


def pad_to_canvas(s: np.ndarray, canvas: tuple[int, int]) -> tuple[np.ndarray, PadOffsets]:
    """Center a 2D slice on a zero-filled canvas.

    The centering offset per axis is floor((canvas - dim) / 2); the offsets are
    returned so crop_from_canvas recovers the original slice exactly.
    """
    h, w = s.shape
    ch, cw = canvas
    if h > ch or w > cw:
        raise DimensionError(f"slice {s.shape} exceeds canvas {canvas}")
    row = (ch - h) // 2
    col = (cw - w) // 2
    out = np.zeros((ch, cw), dtype=s.dtype)
    out[row : row + h, col : col + w] = s
    return out, PadOffsets(row=row, col=col, height=h, width=w, canvas=(ch, cw))


def crop_from_canvas(padded: np.ndarray, offsets: PadOffsets) -> np.ndarray:
    """Undo pad_to_canvas using the recorded offsets.

    Works on the padded slice itself or on any array whose trailing two axes
    are the canvas (e.g. per-class probability maps).
    """
    r, c, h, w = offsets.row, offsets.col, offsets.height, offsets.width
    return padded[..., r : r + h, c : c + w]
