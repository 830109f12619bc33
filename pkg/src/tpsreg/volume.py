"""Scalar volumes on a regular grid: MetaImage I/O, windowing, cropping, sampling.

Arrays are stored with shape ``(nx, ny, nz)`` and indexed ``[i, j, k]``.  On
disk MetaImage data is x-fastest, which is Fortran order for that shape.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, FormatError, UnsupportedFormatError

AIR_HU = -1000.0

_MET_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_UCHAR": np.dtype("u1"),
}
_REQUIRED_KEYS = ("ObjectType", "NDims", "DimSize", "ElementType", "ElementSpacing", "ElementDataFile")

# points per chunk for vectorised sampling; bounds peak memory, no effect on results
SAMPLE_CHUNK = 1 << 20


class IntensityKind(str, enum.Enum):
    HU = "HU"
    NORMALISED = "normalised"


@dataclass(frozen=True)
class GridGeometry:
    """Voxel lattice: index ``(i, j, k)`` sits at ``origin + (i, j, k) * spacing``."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ContractError("geometry needs three dims, spacings and origin components")
        if min(dims) < 1:
            raise ContractError(f"dims must be >= 1, got {dims}")
        if min(spacing) <= 0:
            raise ContractError(f"spacing must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    def index_to_physical(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.float64)
        return np.asarray(self.origin) + ijk * np.asarray(self.spacing)

    def physical_to_index(self, points) -> np.ndarray:
        """Continuous (fractional) index of physical points."""
        points = np.asarray(points, dtype=np.float64)
        return (points - np.asarray(self.origin)) / np.asarray(self.spacing)

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def center(self) -> np.ndarray:
        return self.index_to_physical((np.asarray(self.dims) - 1) / 2.0)

    def iter_slabs(self, max_points: int = SAMPLE_CHUNK) -> Iterator[tuple[slice, np.ndarray]]:
        """Yield ``(k-slice, voxel centers)`` for consecutive z-slabs of the grid.

        Centers come out with shape ``(nx, ny, nk, 3)`` for the slab.
        """
        nx, ny, nz = self.dims
        per_slab = max(1, max_points // (nx * ny))
        x = self.axis_coords(0)
        y = self.axis_coords(1)
        z = self.axis_coords(2)
        for k0 in range(0, nz, per_slab):
            k1 = min(nz, k0 + per_slab)
            pts = np.empty((nx, ny, k1 - k0, 3))
            pts[..., 0] = x[:, None, None]
            pts[..., 1] = y[None, :, None]
            pts[..., 2] = z[None, None, k0:k1]
            yield slice(k0, k1), pts

    def voxel_centers(self) -> np.ndarray:
        """All voxel centers, shape ``(nx, ny, nz, 3)``."""
        out = np.empty(self.dims + (3,))
        for sl, pts in self.iter_slabs():
            out[:, :, sl] = pts
        return out


@dataclass(frozen=True)
class Volume:
    geometry: GridGeometry
    values: np.ndarray
    intensity_kind: IntensityKind = IntensityKind.HU

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != self.geometry.dims:
            if values.size != self.geometry.n_voxels:
                raise ContractError(
                    f"{values.size} values do not fill a grid of dims {self.geometry.dims}")
            values = values.reshape(self.geometry.dims, order="F")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "intensity_kind", IntensityKind(self.intensity_kind))
        if self.intensity_kind is IntensityKind.NORMALISED and values.size:
            if values.min() < 0 or values.max() > 1:
                raise ContractError("normalised volume values must lie in [0, 1]")

    @property
    def border_value(self) -> float:
        return AIR_HU if self.intensity_kind is IntensityKind.HU else 0.0

    def with_values(self, values, kind: IntensityKind | None = None) -> "Volume":
        return Volume(self.geometry, values, kind or self.intensity_kind)


# ---------------------------------------------------------------------------
# MetaImage

def _parse_header(path: Path) -> dict[str, str]:
    header: dict[str, str] = {}
    try:
        text = path.read_text(encoding="ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: header is not ASCII") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'Key = Value', got {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    missing = [k for k in _REQUIRED_KEYS if k not in header]
    if missing:
        raise FormatError(f"{path}: missing required header field(s) {', '.join(missing)}")
    return header


def _floats(header, key, n, path):
    try:
        vals = [float(t) for t in header[key].split()]
    except ValueError as exc:
        raise FormatError(f"{path}: bad {key} {header[key]!r}") from exc
    if len(vals) != n:
        raise FormatError(f"{path}: {key} needs {n} values, got {len(vals)}")
    return tuple(vals)


def read_metaimage_array(path) -> tuple[GridGeometry, np.ndarray, dict[str, str]]:
    """Read a 3D MetaImage into ``(geometry, array, header)``.

    Multi-channel images come back with a trailing channel axis.
    """
    path = Path(path)
    header = _parse_header(path)
    if header["ObjectType"] != "Image":
        raise UnsupportedFormatError(f"{path}: ObjectType {header['ObjectType']!r} is not Image")
    if header["NDims"] != "3":
        raise UnsupportedFormatError(f"{path}: only NDims = 3 is supported")
    etype = header["ElementType"]
    if etype not in _MET_TYPES:
        raise UnsupportedFormatError(f"{path}: unsupported ElementType {etype}")
    if header.get("CompressedData", "False").lower() == "true":
        raise UnsupportedFormatError(f"{path}: compressed data is not supported")
    try:
        dims = tuple(int(t) for t in header["DimSize"].split())
    except ValueError as exc:
        raise FormatError(f"{path}: bad DimSize {header['DimSize']!r}") from exc
    if len(dims) != 3:
        raise FormatError(f"{path}: DimSize needs 3 values")
    spacing = _floats(header, "ElementSpacing", 3, path)
    origin_key = next((k for k in ("Offset", "Origin", "Position") if k in header), None)
    origin = _floats(header, origin_key, 3, path) if origin_key else (0.0, 0.0, 0.0)
    channels = int(header.get("ElementNumberOfChannels", "1"))
    dtype = _MET_TYPES[etype]
    if header.get("BinaryDataByteOrderMSB", header.get("ElementByteOrderMSB", "False")).lower() == "true":
        dtype = dtype.newbyteorder(">")

    data_file = header["ElementDataFile"]
    if data_file == "LOCAL":
        raise UnsupportedFormatError(f"{path}: inline (LOCAL) data is not supported")
    raw_path = path.parent / data_file
    if not raw_path.exists():
        raise FileNotFoundError(f"{path}: data file {raw_path} not found")
    count = int(np.prod(dims)) * channels
    data = np.fromfile(raw_path, dtype=dtype)
    if data.size != count:
        raise FormatError(f"{raw_path}: expected {count} elements, found {data.size}")
    data = data.astype(dtype.newbyteorder("="), copy=False)
    if channels == 1:
        arr = data.reshape(dims, order="F")
    else:
        arr = data.reshape((channels,) + dims, order="F").transpose(1, 2, 3, 0)
    geometry = GridGeometry(dims, spacing, origin)
    return geometry, np.ascontiguousarray(arr), header


def write_metaimage_array(path, geometry: GridGeometry, arr: np.ndarray,
                          extra: dict[str, str] | None = None) -> None:
    """Write ``arr`` (``(nx, ny, nz)`` or ``(nx, ny, nz, c)``) as ``.mhd`` + ``.raw``."""
    path = Path(path)
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype == np.int16:
        etype = "MET_SHORT"
    elif arr.dtype == np.uint8:
        etype = "MET_UCHAR"
    else:
        etype = "MET_FLOAT"
        arr = arr.astype(np.float32)
    channels = 1 if arr.ndim == 3 else arr.shape[3]
    if arr.shape[:3] != geometry.dims:
        raise ContractError(f"array shape {arr.shape} does not match dims {geometry.dims}")

    raw_name = path.with_suffix(".raw").name
    fmt = lambda vals: " ".join(repr(float(v)) for v in vals)  # noqa: E731
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"DimSize = {' '.join(str(d) for d in geometry.dims)}",
        f"ElementSpacing = {fmt(geometry.spacing)}",
        f"Offset = {fmt(geometry.origin)}",
    ]
    if channels > 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    lines += [f"ElementType = {etype}", f"ElementDataFile = {raw_name}"]

    if channels == 1:
        flat = arr.ravel(order="F")
    else:
        flat = arr.transpose(3, 0, 1, 2).ravel(order="F")
    flat = flat.astype(flat.dtype.newbyteorder("<"), copy=False)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    flat.tofile(path.parent / raw_name)


def read_metaimage(path) -> Volume:
    """Read a scalar MetaImage volume (MET_SHORT or MET_FLOAT)."""
    geometry, arr, header = read_metaimage_array(path)
    if arr.ndim != 3:
        raise UnsupportedFormatError(f"{path}: expected a scalar image")
    if header["ElementType"] not in ("MET_SHORT", "MET_FLOAT"):
        raise UnsupportedFormatError(f"{path}: volumes must be MET_SHORT or MET_FLOAT")
    kind = header.get("IntensityKind", IntensityKind.HU.value)
    try:
        kind = IntensityKind(kind)
    except ValueError as exc:
        raise FormatError(f"{path}: unknown IntensityKind {kind!r}") from exc
    return Volume(geometry, arr, kind)


def write_metaimage(vol: Volume, path) -> None:
    """Write ``vol``; int16 data goes out as MET_SHORT, anything else as MET_FLOAT."""
    values = vol.values
    if values.dtype != np.int16:
        values = values.astype(np.float32)
    extra = {}
    if vol.intensity_kind is IntensityKind.NORMALISED:
        extra["IntensityKind"] = vol.intensity_kind.value
    os.makedirs(Path(path).parent, exist_ok=True)
    write_metaimage_array(path, vol.geometry, values, extra)


# ---------------------------------------------------------------------------
# preprocessing

def window_normalize(vol: Volume, window: float = 1600.0, level: float = 0.0) -> Volume:
    """Map HU onto [0, 1] with a linear window of width ``window`` centred on ``level``."""
    if vol.intensity_kind is not IntensityKind.HU:
        raise ContractError("window_normalize expects an HU volume")
    if window <= 0:
        raise ContractError("window width must be positive")
    lo = level - window / 2.0
    out = np.clip((vol.values.astype(np.float64) - lo) / window, 0.0, 1.0)
    return Volume(vol.geometry, out.astype(np.float32), IntensityKind.NORMALISED)


def crop_offset(geometry: GridGeometry, target, center) -> np.ndarray:
    """Integer index of the crop window's first voxel in the source lattice."""
    target = np.asarray(target, dtype=np.int64)
    c = geometry.physical_to_index(center)
    return np.round(c - (target - 1) / 2.0).astype(np.int64)


def crop_array(arr: np.ndarray, geometry: GridGeometry, target, center, fill) -> tuple[np.ndarray, GridGeometry]:
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ContractError(f"crop dims must be three positive integers, got {target}")
    off = crop_offset(geometry, target, center)
    out = np.full(target + arr.shape[3:], fill, dtype=arr.dtype)
    src, dst = [], []
    for a in range(3):
        s0 = max(0, off[a])
        s1 = min(geometry.dims[a], off[a] + target[a])
        if s1 <= s0:
            s0 = s1 = 0
        src.append(slice(s0, s1))
        dst.append(slice(s0 - off[a], s1 - off[a]) if s1 > s0 else slice(0, 0))
    out[tuple(dst)] = arr[tuple(src)]
    origin = geometry.index_to_physical(off)
    return out, GridGeometry(target, geometry.spacing, tuple(origin))


def crop_to_dims(vol: Volume, target, center) -> Volume:
    """Crop (or pad with air) to ``target`` dims around the physical point ``center``.

    The window is snapped to the source lattice so voxel values are copied, not
    interpolated.
    """
    out, geometry = crop_array(vol.values, vol.geometry, target, center, vol.border_value)
    return Volume(geometry, out, vol.intensity_kind)


# ---------------------------------------------------------------------------
# interpolation

def _corner_setup(q: np.ndarray, dims):
    """Lower corner index and fractional offset per axis, plus an inside flag."""
    dims_a = np.asarray(dims)
    inside = np.all((q >= 0) & (q <= dims_a - 1), axis=1)
    i0 = np.floor(q).astype(np.int64)
    i0 = np.clip(i0, 0, np.maximum(dims_a - 2, 0))
    f = q - i0
    f[:, dims_a == 1] = 0.0
    i1 = np.minimum(i0 + 1, dims_a - 1)
    return inside, i0, i1, f


def trilinear_at_indices(values: np.ndarray, q: np.ndarray, border: float,
                         gradient: bool = False):
    """Trilinear interpolation at continuous indices ``q`` (N, 3).

    Points outside ``[0, n-1]`` on any axis get ``border``.  With
    ``gradient=True`` also returns the derivative with respect to ``q`` (per
    index unit; zero outside).
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    n = q.shape[0]
    out = np.full(n, border, dtype=np.float64)
    grad = np.zeros((n, 3)) if gradient else None
    inside, i0, i1, f = _corner_setup(q, values.shape[:3])
    if inside.any():
        i0, i1, f = i0[inside], i1[inside], f[inside]
        v = values
        c000 = v[i0[:, 0], i0[:, 1], i0[:, 2]].astype(np.float64)
        c100 = v[i1[:, 0], i0[:, 1], i0[:, 2]].astype(np.float64)
        c010 = v[i0[:, 0], i1[:, 1], i0[:, 2]].astype(np.float64)
        c110 = v[i1[:, 0], i1[:, 1], i0[:, 2]].astype(np.float64)
        c001 = v[i0[:, 0], i0[:, 1], i1[:, 2]].astype(np.float64)
        c101 = v[i1[:, 0], i0[:, 1], i1[:, 2]].astype(np.float64)
        c011 = v[i0[:, 0], i1[:, 1], i1[:, 2]].astype(np.float64)
        c111 = v[i1[:, 0], i1[:, 1], i1[:, 2]].astype(np.float64)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        c00 = c000 * gx + c100 * fx
        c10 = c010 * gx + c110 * fx
        c01 = c001 * gx + c101 * fx
        c11 = c011 * gx + c111 * fx
        c0 = c00 * gy + c10 * fy
        c1 = c01 * gy + c11 * fy
        out[inside] = c0 * gz + c1 * fz
        if gradient:
            dims = np.asarray(values.shape[:3])
            dx = ((c100 - c000) * gy * gz + (c110 - c010) * fy * gz
                  + (c101 - c001) * gy * fz + (c111 - c011) * fy * fz)
            dy = (c10 - c00) * gz + (c11 - c01) * fz
            dz = c1 - c0
            g = np.stack([dx, dy, dz], axis=1)
            g[:, dims == 1] = 0.0
            grad[inside] = g
    if gradient:
        return out, grad
    return out


def sample_points(vol: Volume, points) -> np.ndarray:
    """Vectorised :func:`trilinear_sample` over an ``(N, 3)`` array of mm points."""
    points = np.asarray(points, dtype=np.float64)
    shape = points.shape[:-1]
    flat = points.reshape(-1, 3)
    out = np.empty(flat.shape[0])
    for s in range(0, flat.shape[0], SAMPLE_CHUNK):
        q = vol.geometry.physical_to_index(flat[s:s + SAMPLE_CHUNK])
        out[s:s + SAMPLE_CHUNK] = trilinear_at_indices(vol.values, q, vol.border_value)
    return out.reshape(shape)


def trilinear_sample(vol: Volume, point) -> float:
    """Trilinear interpolation at one physical point; air/zero outside the grid."""
    return float(sample_points(vol, np.asarray(point, dtype=np.float64).reshape(1, 3))[0])
