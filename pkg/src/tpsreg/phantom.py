"""Synthetic head-and-neck-like CT phantoms with a known deformation.

Shapes are analytic, so a deformed (moving) phantom is produced exactly by
evaluating the shapes at ``x + u(x)`` rather than by resampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .segment import Mask
from .tps import ControlPointSet, DisplacementField, TpsModel, tps_field_on_grid, tps_fit
from .volume import AIR_HU, GridGeometry, Volume

BODY_HU = 20.0
BONE_HU = 1000.0
TABLE_HU = 100.0


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def contains(self, p: np.ndarray) -> np.ndarray:
        q = (p - np.asarray(self.center)) / np.asarray(self.radii)
        return (q * q).sum(axis=-1) <= 1.0


@dataclass(frozen=True)
class EllipticCylinder:
    """Cylinder along z with an elliptical cross-section."""

    center_xy: tuple[float, float]
    radii_xy: tuple[float, float]
    z_range: tuple[float, float]

    def contains(self, p: np.ndarray) -> np.ndarray:
        q = (p[..., :2] - np.asarray(self.center_xy)) / np.asarray(self.radii_xy)
        z = p[..., 2]
        return ((q * q).sum(axis=-1) <= 1.0) & (z >= self.z_range[0]) & (z <= self.z_range[1])


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def contains(self, p: np.ndarray) -> np.ndarray:
        return np.all((p >= np.asarray(self.lo)) & (p <= np.asarray(self.hi)), axis=-1)


@dataclass(frozen=True)
class Organ:
    name: str
    shape: Ellipsoid
    hu: float


@dataclass(frozen=True)
class PhantomSpec:
    geometry: GridGeometry
    body: Ellipsoid
    bone: EllipticCylinder
    organs: tuple[Organ, ...]
    table: Box | None = None
    cavity: Ellipsoid | None = None
    body_lobes: tuple[Ellipsoid, ...] = ()
    bone_parts: tuple[Ellipsoid, ...] = ()

    def in_bone(self, p: np.ndarray) -> np.ndarray:
        inside = self.bone.contains(p)
        for part in self.bone_parts:
            inside |= part.contains(p)
        return inside

    def in_body(self, p: np.ndarray) -> np.ndarray:
        inside = self.body.contains(p)
        for lobe in self.body_lobes:
            inside |= lobe.contains(p)
        return inside

    def hu_at(self, p: np.ndarray) -> np.ndarray:
        out = np.full(p.shape[:-1], AIR_HU, dtype=np.float32)
        if self.table is not None:
            out[self.table.contains(p)] = TABLE_HU
        out[self.in_body(p)] = BODY_HU
        if self.cavity is not None:
            out[self.cavity.contains(p)] = AIR_HU
        for organ in self.organs:
            out[organ.shape.contains(p)] = organ.hu
        out[self.in_bone(p)] = BONE_HU
        return out


@dataclass
class Phantom:
    spec: PhantomSpec
    volume: Volume
    organs: dict[str, Mask] = field(default_factory=dict)


def _render(spec: PhantomSpec, geometry: GridGeometry, field_: DisplacementField | None) -> Phantom:
    hu = np.empty(geometry.dims, dtype=np.float32)
    masks = {o.name: np.zeros(geometry.dims, dtype=bool) for o in spec.organs}
    for sl, pts in geometry.iter_slabs():
        if field_ is not None:
            pts = pts + field_.vectors[:, :, sl]
        hu[:, :, sl] = spec.hu_at(pts)
        for o in spec.organs:
            masks[o.name][:, :, sl] = o.shape.contains(pts) & ~spec.in_bone(pts)
    vol = Volume(geometry, np.rint(hu).astype(np.int16))
    return Phantom(spec, vol, {k: Mask(geometry, v, k) for k, v in masks.items()})


def render(spec: PhantomSpec) -> Phantom:
    return _render(spec, spec.geometry, None)


def render_deformed(spec: PhantomSpec, field_: DisplacementField) -> Phantom:
    """The phantom pulled through ``field_``: value at ``x`` is the shape at ``x + u(x)``."""
    return _render(spec, field_.geometry, field_)


ORGAN_LAYOUT = (
    # name, offset from body centre as fraction of body radii, radii (mm), HU
    ("brainstem", (0.0, 0.2, 0.45), (9.0, 11.0, 16.0), 120.0),
    ("parotid_l", (-0.55, 0.0, 0.05), (8.0, 13.0, 11.0), -80.0),
    ("parotid_r", (0.55, 0.0, 0.05), (8.0, 13.0, 11.0), -60.0),
    ("mandible_body", (0.0, -0.55, -0.05), (20.0, 8.0, 7.0), 160.0),
    ("submand_l", (-0.4, -0.35, -0.25), (7.0, 6.0, 8.0), 140.0),
    ("submand_r", (0.4, -0.35, -0.25), (7.0, 6.0, 8.0), 100.0),
    ("cord_upper", (0.0, 0.2, -0.4), (6.0, 7.0, 18.0), 130.0),
    ("larynx", (0.0, -0.35, -0.6), (10.0, 8.0, 14.0), -40.0),
    ("oral_cavity", (0.0, -0.3, 0.25), (16.0, 11.0, 9.0), 60.0),
)


def make_spec(geometry: GridGeometry, n_organs: int = 4, rng: np.random.Generator | None = None,
              jitter: float = 0.0, table: bool = True) -> PhantomSpec:
    """Body ellipsoid, posterior bone column capped by a skull-base plate, organ blobs and a detached table.

    Shoulder and face lobes make the outline, and the plate makes the bone,
    asymmetric head-to-foot and front-to-back as in real anatomy.

    ``jitter`` perturbs organ positions/sizes and body radii by a relative
    amount (inter-patient variation).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    ext = (np.asarray(geometry.dims) - 1) * np.asarray(geometry.spacing)
    c = np.asarray(geometry.center())
    radii = np.array([0.40, 0.33, 0.40]) * ext
    radii = radii * (1 + jitter * rng.uniform(-1, 1, 3))
    body = Ellipsoid(tuple(c), tuple(radii))
    # anterior is -y (the table and the spine sit at +y), inferior is -z
    lobes = (
        Ellipsoid((c[0], c[1] + 0.1 * radii[1], c[2] - 0.9 * radii[2]),
                  (1.12 * radii[0], 0.8 * radii[1], 0.45 * radii[2])),
        Ellipsoid((c[0], c[1] - 0.85 * radii[1], c[2] + 0.35 * radii[2]),
                  (0.3 * radii[0], 0.3 * radii[1], 0.3 * radii[2])),
    )
    bone = EllipticCylinder(
        center_xy=(c[0], c[1] + 0.55 * radii[1]),
        radii_xy=(0.16 * radii[0], 0.10 * radii[1] + 2.0),
        z_range=(c[2] - 0.7 * radii[2], c[2] + 0.6 * radii[2]),
    )
    # superior plate reaching forward from the top of the column
    plate = Ellipsoid((c[0], c[1] + 0.25 * radii[1], c[2] + 0.6 * radii[2]),
                      (0.45 * radii[0], 0.35 * radii[1], 0.06 * radii[2] + 2.0))
    organs = []
    scale = min(radii[0] / 55.0, radii[1] / 60.0, 1.0)
    for name, off, r, hu in ORGAN_LAYOUT[:n_organs]:
        off = np.asarray(off) + jitter * rng.uniform(-0.1, 0.1, 3)
        rr = np.asarray(r) * scale * (1 + jitter * rng.uniform(-1, 1, 3))
        organs.append(Organ(name, Ellipsoid(tuple(c + off * radii), tuple(rr)), hu))
    tbl = None
    if table:
        y0 = c[1] + radii[1] + 0.03 * ext[1] + 2 * geometry.spacing[1]
        tbl = Box((c[0] - 0.45 * ext[0], y0, c[2] - 0.45 * ext[2]),
                  (c[0] + 0.45 * ext[0], y0 + 0.03 * ext[1] + geometry.spacing[1], c[2] + 0.45 * ext[2]))
    return PhantomSpec(geometry, body, bone, tuple(organs), tbl, body_lobes=lobes, bone_parts=(plate,))


def known_deformation(spec: PhantomSpec, max_displacement: float = 15.0,
                      rng: np.random.Generator | None = None, n_side: int = 3) -> TpsModel:
    """Smooth TPS deformation whose largest displacement inside the body is ``max_displacement``.

    Its controls sit on a lattice well outside the body so the kernel's
    cone points never fall inside the anatomy.
    """
    rng = rng if rng is not None else np.random.default_rng(1)
    g = spec.geometry
    c = np.asarray(g.center())
    half = (np.asarray(g.dims) - 1) * np.asarray(g.spacing) / 2.0
    axes = [np.linspace(-1.6, 1.6, n_side) * h for h in half]
    ctrl = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3) + c
    disp = rng.normal(size=ctrl.shape)
    model = tps_fit(ControlPointSet(ctrl, ctrl + disp), 0.0)
    fld = tps_field_on_grid(model, g, coarse_stride=max(1, min(g.dims) // 16))
    peak = 0.0
    for sl, pts in g.iter_slabs():
        inside = spec.in_body(pts)
        if inside.any():
            peak = max(peak, float(np.linalg.norm(fld.vectors[:, :, sl][inside], axis=-1).max()))
    k = max_displacement / peak
    return TpsModel(model.controls, model.weights * k, model.affine * k, 0.0)


def phantom_pair(geometry: GridGeometry, n_organs: int = 4, max_displacement: float = 15.0,
                 seed: int = 0, jitter: float = 0.0):
    """``(fixed, moving, true_field)``: moving is fixed pulled through the known TPS.

    ``true_field`` lives on the moving grid and maps moving voxels to their
    fixed-phantom positions, i.e. the field an ideal registration recovers.
    """
    rng = np.random.default_rng(seed)
    spec = make_spec(geometry, n_organs, rng, jitter)
    model = known_deformation(spec, max_displacement, rng)
    true_field = tps_field_on_grid(model, geometry, 1)
    return render(spec), render_deformed(spec, true_field), true_field



def write_case(directory, geometry: GridGeometry, n_organs: int = 4, max_displacement: float = 15.0,
               seed: int = 0, jitter: float = 0.0, evaluation_only: tuple[str, ...] = ()) -> Path:
    """Write a phantom pair, its organ masks, the true field and a config; return the config path."""
    from .segment import write_mask
    from .tps import write_field
    from .volume import write_metaimage

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fixed, moving, true_field = phantom_pair(geometry, n_organs, max_displacement, seed, jitter)
    write_metaimage(fixed.volume, d / "fixed.mhd")
    write_metaimage(moving.volume, d / "moving.mhd")
    write_field(true_field, d / "true_field.mhd")
    lines = ['fixed = "fixed.mhd"', 'moving = "moving.mhd"', 'output_dir = "out"', "",
             "[preprocess]", "crop_dims = \"none\"", ""]
    for name in fixed.organs:
        write_mask(fixed.organs[name], d / f"fixed_{name}.mhd")
        write_mask(moving.organs[name], d / f"moving_{name}.mhd")
        role = "evaluation" if name in evaluation_only else "included"
        lines += [f"[structures.{name}]", f'fixed = "fixed_{name}.mhd"', f'moving = "moving_{name}.mhd"',
                  f'role = "{role}"', ""]
    cfg = d / "config.toml"
    cfg.write_text("\n".join(lines))
    return cfg
