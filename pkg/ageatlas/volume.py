"""
3D scalar volumes: sampling, resampling, smoothing, file IO and slice export.

Every image, Grad-CAM map and atlas in the pipeline is a :class:`Volume3`.
Arrays are indexed ``[x, y, z]``; on disk the payload is x-fastest.
"""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib import colormaps
from PIL import Image
from scipy import ndimage

from .errors import (
    BadMagicError,
    LengthMismatchError,
    NonFiniteError,
    ShapeError,
    VolumeDecodeError,
)

PathLike = Union[str, Path]

VOL_MAGIC = b"VOLF0001"
FIELD_MAGIC = b"DFLD0001"
_ORDER = "x-fastest"

# 256-entry hot colormap, RGB in [0, 255]
HOT_COLORMAP = colormaps["hot"](np.linspace(0.0, 1.0, 256))[:, :3] * 255.0

# display orientation per slicing axis: x -> sagittal, y -> axial, z -> coronal
PLANE_AXES = {"sagittal": 0, "axial": 1, "coronal": 2}


@dataclass(frozen=True)
class Volume3:
    """
    Immutable 3D scalar grid with voxel spacing.

    Args:
        data: Array of shape (nx, ny, nz); stored as read-only float32.
        spacing: Positive voxel lengths (sx, sy, sz).
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"Volume3 needs a non-empty 3D array, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not math.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Volume3 values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume3":
        """New volume with the same spacing."""
        return Volume3(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume3):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


class GridPoint(NamedTuple):
    """Continuous voxel coordinates in a reference volume."""

    x: float
    y: float
    z: float


def sample_points(
    data: np.ndarray, coords: np.ndarray, with_gradient: bool = False
) -> Union[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """
    Trilinear interpolation of a 3D array at many points.

    Points outside ``[0, n-1]`` on any axis read the background value 0 and
    carry a zero gradient.

    Args:
        data: Array of shape (nx, ny, nz).
        coords: Array of shape (3, N) of voxel coordinates.
        with_gradient: Also return d(value)/d(coords) of shape (3, N).

    Returns:
        Values of shape (N,), and the coordinate gradient when requested.
    """
    data = np.asarray(data, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    dims = np.array(data.shape)[:, None]
    inside = np.all((coords >= 0.0) & (coords <= dims - 1), axis=0)

    # x = n-1 falls in the last cell with weight 1 on its upper corner
    base = np.clip(np.floor(coords), 0, np.maximum(dims - 2, 0))
    frac = np.where(inside, coords - base, 0.0)
    i0 = np.clip(base.astype(np.int64), 0, dims - 1)
    i1 = np.minimum(i0 + 1, dims - 1)

    x0, y0, z0 = i0
    x1, y1, z1 = i1
    fx, fy, fz = frac
    c000 = data[x0, y0, z0]
    c100 = data[x1, y0, z0]
    c010 = data[x0, y1, z0]
    c110 = data[x1, y1, z0]
    c001 = data[x0, y0, z1]
    c101 = data[x1, y0, z1]
    c011 = data[x0, y1, z1]
    c111 = data[x1, y1, z1]

    # collapse x, then y, then z
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    values = np.where(inside, c0 * (1 - fz) + c1 * fz, 0.0)
    if not with_gradient:
        return values

    gx = (
        (c100 - c000) * (1 - fy) * (1 - fz)
        + (c110 - c010) * fy * (1 - fz)
        + (c101 - c001) * (1 - fy) * fz
        + (c111 - c011) * fy * fz
    )
    gy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
    gz = c1 - c0
    grad = np.where(inside, np.stack([gx, gy, gz]), 0.0)
    return values, grad


def trilinear_sample(v: Volume3, p: Union[GridPoint, Sequence[float]]) -> float:
    """Interpolated value of ``v`` at one continuous voxel position."""
    point = np.asarray(tuple(p), dtype=np.float64).reshape(3, 1)
    if not np.all(np.isfinite(point)):
        raise ValueError(f"grid point must be finite, got {tuple(p)}")
    return float(sample_points(v.data, point)[0])


def grid_coordinates(dims: Sequence[int]) -> np.ndarray:
    """Voxel-centre coordinates of a grid, shape (3, N), x-major like ``ndarray.ravel``."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh])


def aligned_axis(n_src: int, n_dst: int) -> np.ndarray:
    """Source coordinates for ``n_dst`` samples spread corner-to-corner over ``n_src`` voxels."""
    if n_dst == 1:
        return np.array([(n_src - 1) / 2.0])
    return np.linspace(0.0, n_src - 1, n_dst)


def resize_array(arr: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """
    Linear (bi/trilinear) resize of an N-d array with aligned corners.

    Every requested sample lies inside the source domain, so scipy's order-1
    spline reproduces plain multilinear interpolation.
    """
    arr = np.asarray(arr, dtype=np.float64)
    shape = tuple(int(n) for n in shape)
    if len(shape) != arr.ndim or min(shape) < 1:
        raise ShapeError(f"cannot resize array of shape {arr.shape} to {shape}")
    if shape == arr.shape:
        return arr.copy()
    axes = [aligned_axis(n_src, n_dst) for n_src, n_dst in zip(arr.shape, shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return ndimage.map_coordinates(arr, mesh, order=1, mode="nearest", output=np.float64)


def resample(v: Volume3, dims: Sequence[int]) -> Volume3:
    """Resample to new dimensions, rescaling spacing so the physical extent is kept."""
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"target dims must be three positive integers, got {dims}")
    spacing = []
    for n_src, n_dst, s in zip(v.dims, dims, v.spacing):
        if n_src > 1 and n_dst > 1:
            spacing.append(s * (n_src - 1) / (n_dst - 1))
        else:
            spacing.append(s * n_src / n_dst)
    return Volume3(resize_array(v.data, dims), tuple(spacing))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian truncated at radius ``ceil(3 * sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    return weights / weights.sum()


def smooth_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing of an N-d array; ``sigma == 0`` copies."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    out = np.asarray(arr, dtype=np.float64).copy()
    if sigma == 0:
        return out
    kernel = gaussian_kernel(sigma)
    for axis in range(out.ndim):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="nearest")
    return out


def gaussian_smooth(v: Volume3, sigma: float) -> Volume3:
    """Gaussian-smoothed copy of ``v`` (sigma in voxel units)."""
    if sigma == 0:
        return v
    return v.with_data(smooth_array(v.data, sigma))


def _encode(magic: bytes, header: Dict, payload: np.ndarray) -> bytes:
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    body = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    return magic + struct.pack("<I", len(header_bytes)) + header_bytes + body


def _decode(raw: bytes, magic: bytes, dtype: str, components: int) -> Tuple[Dict, np.ndarray]:
    if raw[:8] != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {raw[:8]!r}")
    if len(raw) < 12:
        raise LengthMismatchError("length mismatch: truncated header length")
    (header_len,) = struct.unpack("<I", raw[8:12])
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise LengthMismatchError("length mismatch: truncated header")
    try:
        header = json.loads(raw[12:header_end].decode("utf-8"))
        dims = [int(n) for n in header["dims"]]
        spacing = [float(s) for s in header["spacing"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise VolumeDecodeError(f"bad header: {e}") from e
    if header.get("dtype") != dtype:
        raise VolumeDecodeError(f"bad header: dtype {header.get('dtype')!r}, expected {dtype!r}")
    if header.get("order", _ORDER) != _ORDER:
        raise VolumeDecodeError(f"bad header: unsupported order {header['order']!r}")
    if len(dims) != 3 or min(dims) < 1 or len(spacing) != 3:
        raise VolumeDecodeError(f"bad header: dims {dims}, spacing {spacing}")

    expected = int(np.prod(dims)) * components
    payload = raw[header_end:]
    if len(payload) != expected * 4:
        raise LengthMismatchError(
            f"length mismatch: header declares {expected} scalars, "
            f"payload holds {len(payload) / 4:g}"
        )
    values = np.frombuffer(payload, dtype="<f4")
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("non-finite values in payload")
    return {"dims": dims, "spacing": spacing}, values


def write_vol(v: Volume3, path: PathLike) -> Path:
    """Write ``v`` in the ``.vol`` format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"dims": list(v.dims), "spacing": list(v.spacing), "dtype": "f32", "order": _ORDER}
    path.write_bytes(_encode(VOL_MAGIC, header, v.data.ravel(order="F")))
    return path


def read_vol(path: PathLike) -> Volume3:
    """Read a ``.vol`` file; raises a :class:`VolumeDecodeError` subclass on malformed input."""
    header, values = _decode(Path(path).read_bytes(), VOL_MAGIC, "f32", 1)
    data = values.reshape(header["dims"], order="F")
    return Volume3(data, tuple(header["spacing"]))


_FIELD_KEYS = ("dims", "spacing", "dtype", "order")


def write_dfield(
    components: np.ndarray,
    spacing: Sequence[float],
    path: PathLike,
    metadata: Optional[Mapping[str, Any]] = None,
) -> Path:
    """
    Write a displacement field of shape (3, nx, ny, nz), interleaved per voxel.

    ``metadata`` entries are stored in the JSON header next to the layout keys.
    """
    components = np.asarray(components, dtype=np.float32)
    if components.ndim != 4 or components.shape[0] != 3:
        raise ShapeError(f"field must have shape (3, nx, ny, nz), got {components.shape}")
    reserved = sorted(set(metadata or {}) & set(_FIELD_KEYS))
    if reserved:
        raise ValueError(f"metadata may not override header keys {reserved}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": list(components.shape[1:]),
        "spacing": [float(s) for s in spacing],
        "dtype": "f32x3",
        "order": _ORDER,
        **dict(metadata or {}),
    }
    path.write_bytes(_encode(FIELD_MAGIC, header, components.ravel(order="F")))
    return path


def read_dfield(path: PathLike) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    """Read a ``.dfield`` file into a (3, nx, ny, nz) float32 array and its spacing."""
    header, values = _decode(Path(path).read_bytes(), FIELD_MAGIC, "f32x3", 3)
    components = values.reshape([3] + header["dims"], order="F").astype(np.float32)
    return components, tuple(header["spacing"])


def read_dfield_metadata(path: PathLike) -> Dict[str, Any]:
    """Header entries of a ``.dfield`` file other than its layout keys."""
    header, _ = _decode(Path(path).read_bytes(), FIELD_MAGIC, "f32x3", 3)
    return {k: v for k, v in header.items() if k not in _FIELD_KEYS}


def _plane(data: np.ndarray, axis: int, index: int) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    n = data.shape[axis]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range [0, {n}) along axis {axis}")
    sl = np.take(data, index, axis=axis)
    # rows run head-to-feet where the longitudinal axis is present
    if axis == 0:
        return np.flipud(sl)
    if axis == 2:
        return np.flipud(sl.T)
    return sl.T


def _rescale(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.float64)
    return (values.astype(np.float64) - lo) / (hi - lo) * 255.0


def slice_image(v: Volume3, axis: int, index: int) -> np.ndarray:
    """Grayscale slice rescaled to the full [0, 255] range (uint8)."""
    return np.rint(_rescale(_plane(v.data, axis, index))).astype(np.uint8)


def overlay_image(
    base: Volume3, cam: Volume3, axis: int, index: int, alpha: float = 0.5
) -> np.ndarray:
    """RGB blend ``(1 - alpha) * gray + alpha * hot(cam)`` of one slice (uint8, HxWx3)."""
    if base.dims != cam.dims:
        raise ShapeError(f"base dims {base.dims} differ from cam dims {cam.dims}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    gray = _rescale(_plane(base.data, axis, index))
    idx = np.clip(np.rint(_plane(cam.data, axis, index).astype(np.float64) * 255.0), 0, 255)
    colors = HOT_COLORMAP[idx.astype(np.int64)]
    blended = (1.0 - alpha) * gray[..., None] + alpha * colors
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def export_slice(v: Volume3, axis: int, index: int, path: PathLike) -> Path:
    """Write one grayscale slice as binary PGM (P5).

    Pillow's PPM writer covers the whole netpbm family and emits P5 for mode "L".
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(slice_image(v, axis, index)).save(path, format="PPM")
    return path


def overlay_slice(
    base: Volume3,
    cam: Volume3,
    axis: int,
    index: int,
    path: PathLike,
    alpha: float = 0.5,
) -> Path:
    """Write one CAM-over-anatomy slice as binary PPM."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay_image(base, cam, axis, index, alpha)).save(
        path, format="PPM"
    )
    return path


def write_panel_grid(rows: Sequence[Sequence[np.ndarray]], path: PathLike, gap: int = 2) -> Path:
    """Tile RGB panels into one binary PPM, one row per entry of ``rows``.

    Cells are sized to the largest panel and padded with black; short rows stay
    black on the right.
    """
    cells = [panel for row in rows for panel in row]
    if not cells:
        raise ValueError("panel grid needs at least one panel")
    height = max(p.shape[0] for p in cells)
    width = max(p.shape[1] for p in cells)
    n_cols = max(len(row) for row in rows)
    sheet = np.zeros(
        (len(rows) * (height + gap) - gap, n_cols * (width + gap) - gap, 3), dtype=np.uint8
    )
    for r, row in enumerate(rows):
        for c, panel in enumerate(row):
            top, left = r * (height + gap), c * (width + gap)
            sheet[top : top + panel.shape[0], left : left + panel.shape[1]] = panel
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet).save(path, format="PPM")
    return path
