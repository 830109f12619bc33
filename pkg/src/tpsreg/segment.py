"""Threshold segmentation of bone and the external body envelope."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError, DegenerateInputError
from .volume import (GridGeometry, IntensityKind, Volume, crop_array,
                     read_metaimage_array, write_metaimage_array)

BONE_HU = 400.0
ENVELOPE_HU = -200.0

_STRUCT = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


@dataclass(frozen=True)
class Mask:
    geometry: GridGeometry
    bits: np.ndarray
    label: str = ""

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != self.geometry.dims:
            if bits.size != self.geometry.n_voxels:
                raise ContractError(f"{bits.size} bits do not fill dims {self.geometry.dims}")
            bits = bits.reshape(self.geometry.dims, order="F")
        object.__setattr__(self, "bits", bits)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def relabel(self, label: str) -> "Mask":
        return Mask(self.geometry, self.bits, label)


def _require_hu(vol: Volume):
    if vol.intensity_kind is not IntensityKind.HU:
        raise ContractError("expected an HU volume")


def threshold_mask(vol: Volume, low: float, label: str = "") -> Mask:
    """Voxels with value >= ``low`` (inclusive)."""
    _require_hu(vol)
    return Mask(vol.geometry, vol.values >= low, label)


def largest_component(mask: Mask, connectivity: int = 26) -> Mask:
    """Keep the largest connected component.

    Ties go to the component holding the smallest x-fastest linear index.
    """
    if connectivity not in _STRUCT:
        raise ContractError("connectivity must be 6 or 26")
    labels, n = ndimage.label(mask.bits, structure=_STRUCT[connectivity])
    if n <= 1:
        return Mask(mask.geometry, labels > 0, mask.label)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    best = np.flatnonzero(sizes == sizes.max()) + 1
    if best.size > 1:
        nx, ny, nz = mask.geometry.dims
        lin = np.arange(nx * ny * nz, dtype=np.int64).reshape((nx, ny, nz), order="F")
        first = ndimage.minimum(lin, labels=labels, index=best)
        keep = best[int(np.argmin(first))]
    else:
        keep = best[0]
    return Mask(mask.geometry, labels == keep, mask.label)


def fill_holes(mask: Mask) -> Mask:
    """Set background pockets not 6-connected to the volume border to foreground."""
    filled = ndimage.binary_fill_holes(mask.bits, structure=_STRUCT[6])
    return Mask(mask.geometry, filled, mask.label)


def extract_body_envelope(vol: Volume, threshold: float = ENVELOPE_HU) -> Mask:
    """Solid body mask: threshold, keep the largest 26-component (drops the table), fill."""
    m = threshold_mask(vol, threshold)
    m = fill_holes(largest_component(m, 26))
    if not m.bits.any():
        raise DegenerateInputError(f"no voxels at or above {threshold} HU; cannot find the body")
    return m.relabel("envelope")


def extract_bone(vol: Volume, envelope: Mask, crop_inferior: float | None = None,
                 threshold: float = BONE_HU) -> Mask:
    """Bone inside the envelope, dropping everything with physical z below ``crop_inferior``."""
    if envelope.geometry != vol.geometry:
        raise ContractError("envelope geometry does not match the volume")
    bits = threshold_mask(vol, threshold).bits & envelope.bits
    if crop_inferior is not None:
        z = vol.geometry.axis_coords(2)
        bits[:, :, z < crop_inferior] = False
    return Mask(vol.geometry, bits, "bone")


def crop_mask(mask: Mask, target, center) -> Mask:
    bits, geometry = crop_array(mask.bits, mask.geometry, target, center, False)
    return Mask(geometry, bits, mask.label)


def centroid(mask: Mask) -> np.ndarray:
    idx = np.argwhere(mask.bits)
    if not len(idx):
        raise DegenerateInputError(f"mask '{mask.label}' is empty")
    return mask.geometry.index_to_physical(idx.mean(axis=0))


def read_mask(path, label: str | None = None) -> Mask:
    from pathlib import Path

    geometry, arr, _ = read_metaimage_array(path)
    if arr.ndim != 3:
        raise ContractError(f"{path}: a mask must be a scalar image")
    return Mask(geometry, arr != 0, label if label is not None else Path(path).stem)


def write_mask(mask: Mask, path) -> None:
    write_metaimage_array(path, mask.geometry, mask.bits.astype(np.uint8))
