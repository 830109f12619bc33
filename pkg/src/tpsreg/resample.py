"""Pull the fixed image (or its masks) back onto the moving grid through a field.

For every moving-grid voxel centre ``x`` the output is the fixed image at
``x + u(x)``; no field inversion is ever needed.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .segment import Mask
from .tps import DisplacementField
from .volume import GridGeometry, Volume, trilinear_at_indices


class Interpolation(str, enum.Enum):
    TRILINEAR = "trilinear"
    NEAREST = "nearest"


@dataclass(frozen=True)
class WarpRequest:
    field: DisplacementField
    image: Volume | Mask
    interpolation: Interpolation = Interpolation.TRILINEAR

    def __post_init__(self):
        object.__setattr__(self, "interpolation", Interpolation(self.interpolation))
        if isinstance(self.image, Mask) and self.interpolation is not Interpolation.NEAREST:
            raise ContractError("masks must be warped with nearest-neighbour sampling")

    def run(self):
        if isinstance(self.image, Mask):
            return warp_mask(self.field, self.image)
        if self.interpolation is Interpolation.NEAREST:
            return warp_volume_nearest(self.field, self.image)
        return warp_volume(self.field, self.image)


def compose_identity(geometry: GridGeometry) -> DisplacementField:
    return DisplacementField(geometry, np.zeros(geometry.dims + (3,)))


def _pulled_indices(field: DisplacementField, source_geometry: GridGeometry, sl, pts):
    q = source_geometry.physical_to_index(pts + field.vectors[:, :, sl])
    return q.reshape(-1, 3)


def warp_volume(field: DisplacementField, fixed: Volume) -> Volume:
    """Trilinear pull-back; samples outside the fixed grid read as air (or 0)."""
    out = np.empty(field.geometry.dims, dtype=np.float32)
    for sl, pts in field.geometry.iter_slabs():
        q = _pulled_indices(field, fixed.geometry, sl, pts)
        vals = trilinear_at_indices(fixed.values, q, fixed.border_value)
        out[:, :, sl] = vals.reshape(pts.shape[:3])
    return Volume(field.geometry, out, fixed.intensity_kind)


def _nearest(arr: np.ndarray, q: np.ndarray, fill):
    idx = np.floor(q + 0.5).astype(np.int64)
    dims = np.asarray(arr.shape[:3])
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.full(len(q), fill, dtype=arr.dtype)
    ii = idx[inside]
    out[inside] = arr[ii[:, 0], ii[:, 1], ii[:, 2]]
    return out


def warp_volume_nearest(field: DisplacementField, fixed: Volume) -> Volume:
    out = np.empty(field.geometry.dims, dtype=fixed.values.dtype)
    for sl, pts in field.geometry.iter_slabs():
        q = _pulled_indices(field, fixed.geometry, sl, pts)
        out[:, :, sl] = _nearest(fixed.values, q, fixed.border_value).reshape(pts.shape[:3])
    return Volume(field.geometry, out, fixed.intensity_kind)


def warp_mask(field: DisplacementField, fixed_mask: Mask) -> Mask:
    """Nearest-neighbour pull-back of a mask; outside the fixed grid is background."""
    out = np.empty(field.geometry.dims, dtype=bool)
    for sl, pts in field.geometry.iter_slabs():
        q = _pulled_indices(field, fixed_mask.geometry, sl, pts)
        out[:, :, sl] = _nearest(fixed_mask.bits, q, False).reshape(pts.shape[:3])
    return Mask(field.geometry, out, fixed_mask.label)


def sample_field(field: DisplacementField, points: np.ndarray) -> np.ndarray:
    """Trilinear field lookup at physical points, clamped to the grid (constant extension)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = field.geometry.physical_to_index(pts)
    q = np.clip(q, 0, np.asarray(field.geometry.dims) - 1)
    out = np.empty((len(pts), 3))
    for c in range(3):
        out[:, c] = trilinear_at_indices(field.vectors[..., c], q, 0.0)
    return out


def compose_fields(first: DisplacementField, then: DisplacementField) -> DisplacementField:
    """Field equivalent to pulling through ``first`` and then through ``then``.

    If ``first`` produced the initialised image ``I1(x) = F(x + u1(x))`` and
    ``then`` registers that image, the total is ``u(x) = u2(x) + u1(x + u2(x))``.
    """
    if then.geometry != first.geometry:
        raise ContractError("fields must share the moving grid")
    out = np.empty_like(then.vectors)
    for sl, pts in then.geometry.iter_slabs():
        u2 = then.vectors[:, :, sl]
        u1 = sample_field(first, (pts + u2).reshape(-1, 3)).reshape(u2.shape)
        out[:, :, sl] = u2 + u1
    return DisplacementField(then.geometry, out)


def field_from_transform(transform, geometry: GridGeometry) -> DisplacementField:
    """Dense field ``T(x) - x`` for a point transform (e.g. the similarity pre-alignment)."""
    out = np.empty(geometry.dims + (3,))
    for sl, pts in geometry.iter_slabs():
        flat = pts.reshape(-1, 3)
        out[:, :, sl] = (transform.apply(flat) - flat).reshape(pts.shape)
    return DisplacementField(geometry, out)
