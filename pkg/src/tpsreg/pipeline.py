"""End-to-end orchestration: configuration, the initialisation and two-stage runs,
timing, batch evaluation.

Every stage persists its products under the output directory so that the
stage-level CLI commands can pick the run up at any boundary.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import tomli

from .correspond import (BaselineEstimator, CorrespondenceEstimator, CorrespondenceSet, SimilarityTransform,
                         gather_control_points, prealign_meshes, write_correspondences)
from .errors import ConfigError, ContractError, DegenerateInputError, StageError
from .mesh import TriMesh, condition, write_ply
from .metrics import bonferroni_threshold, structure_metrics, wilcoxon_signed_rank
from .refine import bspline_field, bspline_optimize
from .resample import compose_fields, field_from_transform, warp_mask, warp_volume
from .segment import Mask, centroid, crop_mask, extract_body_envelope, extract_bone, read_mask, write_mask
from .tps import (ControlPointSet, DisplacementField, TpsModel, read_field, save_tps, subsample_controls,
                  tps_field_on_grid, tps_fit, write_field)
from .volume import (GridGeometry, IntensityKind, Volume, crop_to_dims, read_metaimage, window_normalize,
                     write_metaimage)

log = logging.getLogger(__name__)

INCLUDED = "included"
EVALUATION = "evaluation"
ROLES = (INCLUDED, EVALUATION)
DEFAULT_CROP = (128, 288, 480)
METRIC_COLUMNS = ["structure", "role", "pipeline", "mdta", "hausdorff", "dice"]


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class StructureSpec:
    name: str
    fixed: Path
    moving: Path
    role: str = INCLUDED


@dataclass(frozen=True)
class PipelineConfig:
    fixed: Path
    moving: Path
    output_dir: Path
    structures: tuple[StructureSpec, ...] = ()
    crop_dims: tuple[int, int, int] | None = DEFAULT_CROP
    window: float = 1600.0
    level: float = 0.0
    bone_hu: float = 400.0
    envelope_hu: float = -200.0
    bone_crop_z: float | None = None
    include_bone: bool = True
    include_envelope: bool = True
    taubin_lambda: float = 0.5
    taubin_mu: float = -0.53
    taubin_iterations: int = 10
    decimation_target: int = 3000
    null_threshold: float = 20.0
    mutual_factor: float = 2.0
    min_spacing: float = 1.0
    lambda_tps: float = 0.0
    max_controls: int = 0
    coarse_stride: int = 4
    refine_enabled: bool = False
    refine_lattice_spacing: float = 20.0
    refine_bending_weight: float = 0.001
    refine_max_iters: int = 50
    refine_downsample: int = 1
    refine_from_rigid: bool = True
    external_field: Path | None = None
    workers: int = 1

    def validate(self, check_files: bool = True) -> "PipelineConfig":
        checks = [
            (self.window > 0, "preprocess.window must be positive"),
            (self.crop_dims is None or (len(self.crop_dims) == 3 and min(self.crop_dims) >= 1),
             "preprocess.crop_dims must be three positive integers"),
            (0 < self.taubin_lambda <= 1, "mesh.taubin_lambda must lie in (0, 1]"),
            (self.taubin_mu <= 0 and (self.taubin_mu == 0 or -self.taubin_mu >= self.taubin_lambda),
             "mesh.taubin_mu must be 0 or satisfy mu <= -lambda"),
            (self.taubin_iterations >= 0, "mesh.taubin_iterations must be >= 0"),
            (self.decimation_target == 0 or self.decimation_target >= 4,
             "mesh.decimation_target must be 0 (off) or >= 4"),
            (self.null_threshold > 0, "correspond.null_threshold must be positive"),
            (self.mutual_factor >= 1, "correspond.mutual_factor must be >= 1"),
            (self.min_spacing >= 0, "correspond.min_spacing must be >= 0"),
            (self.lambda_tps >= 0, "tps.lambda must be >= 0"),
            (self.max_controls == 0 or self.max_controls >= 4, "tps.max_controls must be 0 (off) or >= 4"),
            (self.coarse_stride >= 1, "tps.coarse_stride must be >= 1"),
            (self.refine_lattice_spacing > 0, "refine.lattice_spacing must be positive"),
            (self.refine_bending_weight >= 0, "refine.bending_weight must be >= 0"),
            (self.refine_max_iters >= 0, "refine.max_iters must be >= 0"),
            (self.refine_downsample >= 1, "refine.downsample must be >= 1"),
            (self.workers >= 1, "run.workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        names = [s.name for s in self.structures]
        if len(set(names)) != len(names):
            raise ConfigError("structure names must be unique")
        reserved = {"bone", "envelope"} & set(names)
        if reserved:
            raise ConfigError(f"structure names {sorted(reserved)} are reserved for derived masks")
        for s in self.structures:
            if s.role not in ROLES:
                raise ConfigError(f"structure '{s.name}': role must be one of {ROLES}")
        if check_files:
            paths = [("fixed", self.fixed), ("moving", self.moving)]
            paths += [(f"structures.{s.name}.{side}", getattr(s, side))
                      for s in self.structures for side in ("fixed", "moving")]
            if self.external_field is not None:
                paths.append(("refine.external_field", self.external_field))
            for key, p in paths:
                if not Path(p).is_file():
                    raise ConfigError(f"{key}: file not found: {p}")
        return self

    @property
    def included(self) -> list[str]:
        names = [s.name for s in self.structures if s.role == INCLUDED]
        if self.include_bone:
            names.append("bone")
        if self.include_envelope:
            names.append("envelope")
        return names

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "structures":
                v = {s.name: {"fixed": str(s.fixed), "moving": str(s.moving), "role": s.role} for s in v}
            elif isinstance(v, Path):
                v = str(v)
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


def _opt(conv):
    def parse(v):
        if v is None or (isinstance(v, str) and v.strip().lower() in ("", "none")):
            return None
        return conv(v)
    return parse


def _bool(v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.strip().lower() in ("true", "yes", "1", "false", "no", "0"):
        return v.strip().lower() in ("true", "yes", "1")
    raise ValueError(f"not a boolean: {v!r}")


def _int(v):
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ValueError(f"not an integer: {v!r}")
    return int(v)


def _dims(v):
    if isinstance(v, str):
        v = [p for p in v.replace("x", ",").split(",") if p.strip()]
    dims = tuple(_int(x) for x in v)
    if len(dims) != 3:
        raise ValueError("expected three dims")
    return dims


# dotted config key -> (field name, converter); paths are handled separately
_SCALARS = {
    "preprocess.crop_dims": ("crop_dims", _opt(_dims)),
    "preprocess.window": ("window", float),
    "preprocess.level": ("level", float),
    "segment.bone_hu": ("bone_hu", float),
    "segment.envelope_hu": ("envelope_hu", float),
    "segment.bone_crop_z": ("bone_crop_z", _opt(float)),
    "segment.include_bone": ("include_bone", _bool),
    "segment.include_envelope": ("include_envelope", _bool),
    "mesh.taubin_lambda": ("taubin_lambda", float),
    "mesh.taubin_mu": ("taubin_mu", float),
    "mesh.taubin_iterations": ("taubin_iterations", _int),
    "mesh.decimation_target": ("decimation_target", _int),
    "correspond.null_threshold": ("null_threshold", float),
    "correspond.mutual_factor": ("mutual_factor", float),
    "correspond.min_spacing": ("min_spacing", float),
    "tps.lambda": ("lambda_tps", float),
    "tps.max_controls": ("max_controls", _int),
    "tps.coarse_stride": ("coarse_stride", _int),
    "refine.enabled": ("refine_enabled", _bool),
    "refine.lattice_spacing": ("refine_lattice_spacing", float),
    "refine.bending_weight": ("refine_bending_weight", float),
    "refine.max_iters": ("refine_max_iters", _int),
    "refine.downsample": ("refine_downsample", _int),
    "refine.from_rigid": ("refine_from_rigid", _bool),
    "run.workers": ("workers", _int),
}
_PATHS = {"fixed": "fixed", "moving": "moving", "output_dir": "output_dir",
          "refine.external_field": "external_field"}


def _flatten(table: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in table.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` with a TOML-syntax value; bare words are taken as strings."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, raw = (p.strip() for p in text.split("=", 1))
    if not key:
        raise ConfigError(f"override '{text}' has an empty key")
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key, value


def config_from_mapping(values: Mapping[str, Any], base_dir: Path | None = None,
                        check_files: bool = True) -> PipelineConfig:
    """Build a config from a flat ``dotted.key -> value`` mapping (or nested tables)."""
    flat = _flatten(values)
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def path(v):
        p = Path(str(v)).expanduser()
        return p if p.is_absolute() else base / p

    kwargs: dict[str, Any] = {}
    structures: dict[str, dict[str, Any]] = {}
    for key, v in flat.items():
        try:
            if key in _SCALARS:
                name, conv = _SCALARS[key]
                kwargs[name] = conv(v)
            elif key in _PATHS:
                kwargs[_PATHS[key]] = None if key == "refine.external_field" and _opt(str)(v) is None else path(v)
            elif key.startswith("structures."):
                parts = key.split(".")
                if len(parts) != 3 or parts[2] not in ("fixed", "moving", "role"):
                    raise ConfigError(f"unknown structure key '{key}'")
                structures.setdefault(parts[1], {})[parts[2]] = str(v) if parts[2] == "role" else path(v)
            else:
                raise ConfigError(f"unknown configuration key '{key}'")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: {exc}") from exc
    for req in ("fixed", "moving", "output_dir"):
        if req not in kwargs:
            raise ConfigError(f"missing required key '{req}'")
    specs = []
    for name, d in structures.items():
        if "fixed" not in d or "moving" not in d:
            raise ConfigError(f"structure '{name}' needs both fixed and moving mask paths")
        specs.append(StructureSpec(name, d["fixed"], d["moving"], d.get("role", INCLUDED)))
    kwargs["structures"] = tuple(specs)
    return PipelineConfig(**kwargs).validate(check_files)


def load_config(path, overrides: Iterable[str] = (), check_files: bool = True) -> PipelineConfig:
    """Read a TOML config; relative paths are relative to the config file.

    ``overrides`` are ``key=value`` strings applied on top (relative paths in
    them resolve against the working directory).
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            table = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    flat = _flatten(table)
    base = path.resolve().parent
    resolved = {}
    for key, v in flat.items():
        is_path = key in _PATHS or (key.startswith("structures.") and not key.endswith(".role"))
        if is_path and isinstance(v, str) and v.strip().lower() not in ("", "none"):
            p = Path(v).expanduser()
            v = str(p if p.is_absolute() else base / p)
        resolved[key] = v
    for text in overrides:
        k, v = parse_override(text)
        resolved[k] = v
    return config_from_mapping(resolved, Path.cwd(), check_files)


# ---------------------------------------------------------------------------
# timing

@dataclass
class TimingReport:
    """Wall-clock seconds per stage, reported to 0.1 s."""

    rigid_prealign: float = 0.0
    mesh_generation: float = 0.0
    correspondence: float = 0.0
    tps_fit: float = 0.0
    resampling: float = 0.0
    refinement: float = 0.0

    STAGES = ("rigid_prealign", "mesh_generation", "correspondence", "tps_fit", "resampling", "refinement")

    def rounded(self) -> dict[str, float]:
        return {s: round(getattr(self, s), 1) for s in self.STAGES}

    @property
    def total(self) -> float:
        return round(sum(self.rounded().values()), 1)

    def as_dict(self) -> dict[str, float]:
        d = self.rounded()
        d["total"] = self.total
        return d

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2) + "\n")

    @classmethod
    def read(cls, path) -> "TimingReport":
        d = json.loads(Path(path).read_text())
        return cls(**{s: float(d.get(s, 0.0)) for s in cls.STAGES})


class _Clock:
    def __init__(self, timing: TimingReport):
        self.timing = timing

    @contextmanager
    def stage(self, name: str, bucket: str):
        t0 = time.monotonic()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            setattr(self.timing, bucket, getattr(self.timing, bucket) + time.monotonic() - t0)


# ---------------------------------------------------------------------------
# initialisation

@dataclass
class InitArtifacts:
    output_dir: Path
    fixed: Volume
    moving: Volume
    fixed_masks: dict[str, Mask]
    moving_masks: dict[str, Mask]
    rigid: SimilarityTransform
    correspondences: list[CorrespondenceSet]
    controls: ControlPointSet
    model: TpsModel
    field: DisplacementField
    warped: Volume
    warped_masks: dict[str, Mask]
    timing: TimingReport


def _map(workers: int, fn, items):
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _read_hu(path) -> Volume:
    vol = read_metaimage(path)
    if vol.intensity_kind is not IntensityKind.HU:
        raise ContractError(f"{path}: expected an HU volume")
    return vol


def _load_side(cfg: PipelineConfig, side: str) -> tuple[Volume, dict[str, Mask]]:
    """Read, crop and segment one patient; user masks first, then bone and envelope."""
    vol = _read_hu(getattr(cfg, side))
    masks = {}
    for s in cfg.structures:
        m = read_mask(getattr(s, side), s.name)
        if m.geometry != vol.geometry:
            raise ContractError(f"mask '{s.name}' ({side}) does not share the volume grid")
        masks[s.name] = m
    if cfg.crop_dims is not None:
        center = centroid(extract_body_envelope(vol, cfg.envelope_hu))
        vol = crop_to_dims(vol, cfg.crop_dims, center)
        masks = {k: crop_mask(m, cfg.crop_dims, center) for k, m in masks.items()}
    envelope = extract_body_envelope(vol, cfg.envelope_hu)
    masks["bone"] = extract_bone(vol, envelope, cfg.bone_crop_z, cfg.bone_hu)
    masks["envelope"] = envelope
    return vol, masks


def _mesh(cfg: PipelineConfig, mask: Mask) -> TriMesh:
    return condition(mask, cfg.taubin_lambda, cfg.taubin_mu, cfg.taubin_iterations, cfg.decimation_target or None)


def write_control_points(cps: ControlPointSet, path) -> None:
    """Control points in the correspondence CSV layout (every row non-null)."""
    names = []
    for name, n in cps.per_structure_counts.items():
        names.extend([name] * n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["structure", "src_x", "src_y", "src_z", "tgt_x", "tgt_y", "tgt_z", "is_null"])
        for name, s, t in zip(names, cps.sources.tolist(), cps.targets.tolist()):
            w.writerow([name, *map(repr, s), *map(repr, t), 0])


def write_transform(tf: SimilarityTransform, path) -> None:
    Path(path).write_text(json.dumps({"rotation": tf.rotation.tolist(), "scale": tf.scale,
                                      "translation": tf.translation.tolist()}, indent=2) + "\n")


def read_transform(path) -> SimilarityTransform:
    d = json.loads(Path(path).read_text())
    return SimilarityTransform(np.asarray(d["rotation"], dtype=np.float64), float(d["scale"]),
                               np.asarray(d["translation"], dtype=np.float64))


def run_initialise(cfg: PipelineConfig, estimator: CorrespondenceEstimator | None = None) -> InitArtifacts:
    """Segmentations -> meshes -> correspondences -> TPS -> field -> warped fixed image.

    Returns the in-memory products; all of them are also written below
    ``cfg.output_dir``.
    """
    estimator = estimator or BaselineEstimator(cfg.null_threshold, cfg.mutual_factor)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.as_dict(), indent=2) + "\n")
    timing = TimingReport()
    clock = _Clock(timing)

    with clock.stage("preprocess", "mesh_generation"):
        fixed, fixed_masks = _load_side(cfg, "fixed")
        moving, moving_masks = _load_side(cfg, "moving")
        for side, vol, masks in (("fixed", fixed, fixed_masks), ("moving", moving, moving_masks)):
            (out / "masks" / side).mkdir(parents=True, exist_ok=True)
            write_metaimage(vol, out / f"{side}.mhd")
            for name, m in masks.items():
                write_mask(m, out / "masks" / side / f"{name}.mhd")

    meshed = list(dict.fromkeys(cfg.included + ["envelope"]))
    with clock.stage("mesh", "mesh_generation"):
        jobs = [(side, name) for name in meshed for side in ("moving", "fixed")]
        masks_by_side = {"fixed": fixed_masks, "moving": moving_masks}
        results = _map(cfg.workers, lambda job: _mesh(cfg, masks_by_side[job[0]][job[1]]), jobs)
        meshes = {job: m for job, m in zip(jobs, results)}
        for (side, name), m in meshes.items():
            (out / "meshes" / side).mkdir(parents=True, exist_ok=True)
            write_ply(m, out / "meshes" / side / f"{name}.ply")

    with clock.stage("rigid_prealign", "rigid_prealign"):
        rigid = prealign_meshes(meshes["moving", "envelope"], meshes["fixed", "envelope"])
        write_transform(rigid, out / "rigid.json")

    with clock.stage("correspond", "correspondence"):
        sets = _map(cfg.workers, lambda name: estimator(meshes["moving", name], meshes["fixed", name]),
                    cfg.included)
        write_correspondences(sets, out / "correspondences.csv")
        cps = gather_control_points(sets, cfg.min_spacing)
        if cfg.max_controls and len(cps) > cfg.max_controls:
            cps = subsample_controls(cps, cfg.max_controls, cfg.min_spacing)
        write_control_points(cps, out / "control_points.csv")

    with clock.stage("tps_fit", "tps_fit"):
        model = tps_fit(cps, cfg.lambda_tps)
        save_tps(model, out / "tps_model.tps")
        fld = _persist_field(tps_field_on_grid(model, moving.geometry, cfg.coarse_stride), out / "field_init.mhd")

    with clock.stage("resample", "resampling"):
        warped = warp_volume(fld, fixed)
        write_metaimage(warped, out / "warped_init.mhd")
        warped_masks = _warp_masks(fld, fixed_masks, out / "warped_masks" / "init")

    timing.write(out / "timing.json")
    summary = {
        "control_points": len(cps),
        "per_structure_counts": cps.per_structure_counts,
        "null_correspondences": {cs.source_structure: cs.n_null for cs in sets},
        "lambda_tps": cfg.lambda_tps,
    }
    (out / "init_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("init: %d control points, timing %s", len(cps), timing.as_dict())
    return InitArtifacts(out, fixed, moving, fixed_masks, moving_masks, rigid, sets, cps, model, fld,
                         warped, warped_masks, timing)


def _persist_field(fld: DisplacementField, path) -> DisplacementField:
    """Write ``fld`` and continue with the stored (float32) values, so a resumed run matches bit for bit."""
    write_field(fld, path)
    return DisplacementField(fld.geometry, fld.vectors.astype(np.float32).astype(np.float64))


def _warp_masks(fld: DisplacementField, masks: Mapping[str, Mask], directory: Path | None) -> dict[str, Mask]:
    out = {}
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)
    for name, m in masks.items():
        out[name] = warp_mask(fld, m)
        if directory is not None:
            write_mask(out[name], directory / f"{name}.mhd")
    return out


# ---------------------------------------------------------------------------
# two-stage registration

@dataclass
class RegisterArtifacts:
    init: InitArtifacts
    field: DisplacementField            # composed total field
    warped: Volume
    metrics: list[dict]
    timing: TimingReport


def _subsample(vol: Volume, d: int) -> Volume:
    """Mean over d x d x d blocks (trailing partial blocks dropped), centred on each block."""
    if d == 1:
        return vol
    g = vol.geometry
    n = [s // d for s in g.dims]
    if min(n) < 1:
        raise ContractError(f"refine.downsample={d} exceeds the grid size {g.dims}")
    v = vol.values[:n[0] * d, :n[1] * d, :n[2] * d].astype(np.float64)
    v = v.reshape(n[0], d, n[1], d, n[2], d).mean(axis=(1, 3, 5))
    origin = tuple(np.asarray(g.origin) + 0.5 * (d - 1) * np.asarray(g.spacing))
    geom = GridGeometry(tuple(n), tuple(s * d for s in g.spacing), origin)
    return Volume(geom, v, vol.intensity_kind)


def _refine(cfg: PipelineConfig, pulled: Volume, moving: Volume) -> DisplacementField:
    """B-spline field on the moving grid registering the already-pulled fixed image."""
    fixed_n = window_normalize(pulled, cfg.window, cfg.level)
    moving_n = window_normalize(moving, cfg.window, cfg.level)
    d = cfg.refine_downsample
    res = bspline_optimize(_subsample(fixed_n, d), _subsample(moving_n, d), cfg.refine_lattice_spacing,
                           cfg.refine_bending_weight, cfg.refine_max_iters, cover=moving.geometry)
    return bspline_field(res.grid, moving.geometry)


def _structure_roles(cfg: PipelineConfig) -> dict[str, str]:
    roles = {s.name: s.role for s in cfg.structures}
    roles["bone"] = INCLUDED if cfg.include_bone else EVALUATION
    roles["envelope"] = INCLUDED if cfg.include_envelope else EVALUATION
    return roles


def run_register(cfg: PipelineConfig, estimator: CorrespondenceEstimator | None = None) -> RegisterArtifacts:
    """Initialisation followed by refinement (internal or an ingested field) and metrics.

    Pipelines scored per structure: ``rigid`` (similarity pre-alignment only),
    ``init`` (TPS), and when a second stage is available ``init+refine``.  With
    ``refine_from_rigid`` the internal refinement is also run from the rigid
    start (``no-init``), the conventional pipeline without initialisation.
    """
    init = run_initialise(cfg, estimator)
    out = init.output_dir
    timing = init.timing
    clock = _Clock(timing)
    roles = _structure_roles(cfg)
    geometry = init.moving.geometry
    fields_by_pipeline: dict[str, DisplacementField] = {}
    masks_by_pipeline: dict[str, dict[str, Mask]] = {"init": init.warped_masks}

    with clock.stage("resample", "resampling"):
        rigid_field = field_from_transform(init.rigid, geometry)
        masks_by_pipeline["rigid"] = _warp_masks(rigid_field, init.fixed_masks, out / "warped_masks" / "rigid")

    total = init.field
    with clock.stage("refine", "refinement"):
        second = None
        if cfg.external_field is not None:
            second = read_field(cfg.external_field)
            if second.geometry != geometry:
                raise ContractError("external field must live on the (cropped) moving grid")
        elif cfg.refine_enabled:
            second = _refine(cfg, init.warped, init.moving)
        if cfg.refine_enabled and cfg.refine_from_rigid:
            rigid_pulled = warp_volume(rigid_field, init.fixed)
            fields_by_pipeline["no-init"] = compose_fields(rigid_field, _refine(cfg, rigid_pulled, init.moving))
        if second is not None:
            second = _persist_field(second, out / "field_refine.mhd")
            total = compose_fields(init.field, second)

    with clock.stage("resample", "resampling"):
        total = _persist_field(total, out / "field_total.mhd")
        if second is not None:
            fields_by_pipeline["init+refine"] = total
        warped = warp_volume(total, init.fixed) if second is not None else init.warped
        write_metaimage(warped, out / "warped_final.mhd")
        for name, fld in fields_by_pipeline.items():
            masks_by_pipeline[name] = _warp_masks(fld, init.fixed_masks, out / "warped_masks" / name)

    with clock.stage("metrics", "resampling"):
        rows = []
        order = [p for p in ("rigid", "no-init", "init", "init+refine") if p in masks_by_pipeline]
        for pipeline in order:
            for name, role in roles.items():
                r = structure_metrics(masks_by_pipeline[pipeline][name], init.moving_masks[name], name)
                rows.append({"structure": name, "role": role, "pipeline": pipeline,
                             "mdta": r.mdta, "hausdorff": r.hausdorff, "dice": r.dice})
        write_metrics(rows, out / "metrics.csv")
        (out / "metrics.json").write_text(json.dumps(summarise_metrics(rows), indent=2) + "\n")

    timing.write(out / "timing.json")
    return RegisterArtifacts(init, total, warped, rows, timing)


def write_metrics(rows: Sequence[Mapping], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k in ("mdta", "hausdorff", "dice") else r[k])
                        for k in METRIC_COLUMNS})


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in METRIC_COLUMNS):
            raise ContractError(f"{path}: expected columns {','.join(METRIC_COLUMNS)}")
        rows = []
        for r in reader:
            rows.append({**r, **{k: float(r[k]) for k in ("mdta", "hausdorff", "dice")}})
    return rows


def summarise_metrics(rows: Sequence[Mapping]) -> dict:
    """Mean mDTA / Dice per pipeline, split by structure role."""
    out: dict[str, dict] = {}
    for pipeline in dict.fromkeys(r["pipeline"] for r in rows):
        entry = {}
        for role in ROLES:
            sel = [r for r in rows if r["pipeline"] == pipeline and r["role"] == role]
            if sel:
                entry[role] = {"n": len(sel),
                               "mean_mdta": float(np.mean([r["mdta"] for r in sel])),
                               "mean_dice": float(np.mean([r["dice"] for r in sel]))}
        out[pipeline] = entry
    return out


# ---------------------------------------------------------------------------
# batch evaluation

@dataclass
class EvaluationReport:
    method: str
    baseline: str
    metric: str
    threshold: float
    n_tests: int
    rows: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"method": self.method, "baseline": self.baseline, "metric": self.metric,
                "threshold": self.threshold, "n_tests": self.n_tests, "rows": self.rows}

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "evaluation.json").write_text(json.dumps(self.as_dict(), indent=2) + "\n")
        cols = ["structure", "n_pairs", "mean_method", "mean_baseline", "mean_difference",
                "statistic", "p_value", "exact", "significant", "status"]
        with open(d / "evaluation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({c: r.get(c) for c in cols})


def _collect(directory: Path, pipeline: str | None) -> tuple[str, dict[str, dict[str, float]], str]:
    """``{pair key: {structure: metric row}}`` for one results directory."""
    files = sorted(Path(directory).glob("**/metrics.csv"))
    if not files:
        raise ContractError(f"{directory}: no metrics.csv files found")
    by_pair = {}
    chosen = pipeline
    for f in files:
        rows = read_metrics(f)
        available = list(dict.fromkeys(r["pipeline"] for r in rows))
        if chosen is None:
            if len(available) != 1:
                raise ContractError(f"{f}: several pipelines {available}; choose one")
            chosen = available[0]
        if chosen not in available:
            raise ContractError(f"{f}: pipeline '{chosen}' not present (have {available})")
        key = str(f.parent.relative_to(directory))
        by_pair[key] = {r["structure"]: r for r in rows if r["pipeline"] == chosen}
    return chosen, by_pair, str(directory)


def run_evaluate(results_dir, baseline_dir, pipeline: str | None = None, baseline_pipeline: str | None = None,
                 metric: str = "mdta", alpha: float = 0.05, workers: int = 1) -> EvaluationReport:
    """Paired signed-rank test per structure, method vs baseline, Bonferroni-flagged.

    Registration pairs are matched by the relative directory of each
    ``metrics.csv``.  Structures whose differences are all zero (or fewer than
    five non-zero) are reported as degenerate and never flagged.
    """
    if metric not in ("mdta", "hausdorff", "dice"):
        raise ContractError(f"unknown metric '{metric}'")
    method, res, _ = _collect(Path(results_dir), pipeline)
    base, ref, _ = _collect(Path(baseline_dir), baseline_pipeline)
    if set(res) != set(ref):
        raise ContractError("result and baseline directories hold different registration pairs")
    pairs = sorted(res)
    if len(pairs) < 5:
        raise ContractError(f"need at least 5 registration pairs, found {len(pairs)}")
    structures = list(res[pairs[0]])
    for p in pairs:
        if set(res[p]) != set(structures) or set(ref[p]) != set(structures):
            raise ContractError(f"pair '{p}': structure sets differ")
    threshold = bonferroni_threshold(alpha, len(structures))

    def test(name):
        x = np.array([res[p][name][metric] for p in pairs])
        y = np.array([ref[p][name][metric] for p in pairs])
        row = {"structure": name, "role": res[pairs[0]][name].get("role", ""), "n_pairs": len(pairs),
               "mean_method": float(x.mean()), "mean_baseline": float(y.mean()),
               "mean_difference": float((x - y).mean())}
        try:
            t = wilcoxon_signed_rank(x, y, threshold)
        except DegenerateInputError as exc:
            row.update(statistic=None, p_value=None, exact=None, significant=False, status=f"degenerate: {exc}")
        else:
            row.update(statistic=t.statistic, p_value=t.p_value, exact=t.exact, significant=t.significant,
                       status="ok")
        return row

    rows = _map(workers, test, structures)
    return EvaluationReport(method, base, metric, threshold, len(structures), rows)


# ---------------------------------------------------------------------------
# reporting

def format_timing(reports: Mapping[str, TimingReport]) -> str:
    """One line per run plus the mean: ``total (rigid + mesh + corr + tps + resample) [+ refine]``."""
    lines = []

    def line(name, d):
        parts = " + ".join(f"{d[s]:.1f}" for s in TimingReport.STAGES[1:5])
        extra = f"  refine {d['refinement']:.1f}" if d["refinement"] else ""
        return f"{name:<24} total {d['total']:6.1f} s  rigid {d['rigid_prealign']:.1f}  init ({parts}){extra}"

    for name, rep in reports.items():
        lines.append(line(name, rep.as_dict()))
    if len(reports) > 1:
        mean = TimingReport(**{s: float(np.mean([getattr(r, s) for r in reports.values()]))
                               for s in TimingReport.STAGES})
        lines.append(line("mean", mean.as_dict()))
    header = "stages: init = mesh generation + correspondence + TPS fitting + resampling"
    return "\n".join([header] + lines)


def format_evaluation(report: Mapping) -> str:
    lines = [f"{report['method']} vs {report['baseline']} ({report['metric']}), "
             f"threshold {report['threshold']:.4g} over {report['n_tests']} tests"]
    lines.append(f"{'structure':<20}{'method':>10}{'baseline':>10}{'diff':>10}{'p':>12}  flag")
    for r in report["rows"]:
        p = "-" if r["p_value"] is None else f"{r['p_value']:.4g}"
        flag = "*" if r["significant"] else ("degenerate" if r["status"] != "ok" else "")
        lines.append(f"{r['structure']:<20}{r['mean_method']:>10.3f}{r['mean_baseline']:>10.3f}"
                     f"{r['mean_difference']:>10.3f}{p:>12}  {flag}")
    return "\n".join(lines)


def format_metrics(rows: Sequence[Mapping]) -> str:
    lines = [f"{'structure':<20}{'role':<12}{'pipeline':<14}{'mdta':>9}{'hausdorff':>11}{'dice':>8}"]
    for r in rows:
        lines.append(f"{r['structure']:<20}{r['role']:<12}{r['pipeline']:<14}{r['mdta']:>9.3f}"
                     f"{r['hausdorff']:>11.3f}{r['dice']:>8.3f}")
    return "\n".join(lines)


def build_report(paths: Iterable) -> str:
    """Human-readable summary of timing, metrics and evaluation files under ``paths``."""
    timings, sections = {}, []
    for p in map(Path, paths):
        if not p.exists():
            raise ContractError(f"{p}: no such file or directory")
        files = sorted(p.glob("**/*")) if p.is_dir() else [p]
        for f in files:
            if f.name == "timing.json":
                timings[str(f.parent)] = TimingReport.read(f)
            elif f.name == "evaluation.json":
                sections.append(format_evaluation(json.loads(f.read_text())))
            elif f.name == "metrics.csv":
                sections.append(f"{f}\n" + format_metrics(read_metrics(f)))
    if timings:
        sections.insert(0, format_timing(timings))
    if not sections:
        raise ContractError("nothing to report: no timing.json, metrics.csv or evaluation.json found")
    return "\n\n".join(sections)


def with_overrides(cfg: PipelineConfig, **changes) -> PipelineConfig:
    return replace(cfg, **changes).validate(check_files=False)
