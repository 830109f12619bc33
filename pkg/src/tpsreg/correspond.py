"""Surface correspondences between moving- and fixed-patient structures.

A correspondence estimator is any callable ``(source_mesh, target_mesh) ->
CorrespondenceSet``.  :class:`BaselineEstimator` is the deterministic
geometric one used by default: similarity pre-alignment by principal axes,
then nearest-vertex matching with a null flag for unreliable matches.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, DegenerateInputError, FormatError
from .mesh import TriMesh, surface_moments
from .tps import ControlPointSet

NULL_THRESHOLD = 20.0
MUTUAL_FACTOR = 2.0
SIGN_TIE_TOLERANCE = 0.25
CSV_COLUMNS = ["structure", "src_x", "src_y", "src_z", "tgt_x", "tgt_y", "tgt_z", "is_null"]


@dataclass(frozen=True)
class CorrespondencePair:
    source: tuple[float, float, float]
    target: tuple[float, float, float]
    is_null: bool
    structure: str


@dataclass(frozen=True)
class CorrespondenceSet:
    """One row per source vertex. Indices are ``-1`` when unknown (e.g. read from CSV)."""

    sources: np.ndarray
    targets: np.ndarray
    is_null: np.ndarray
    source_structure: str = ""
    target_structure: str = ""
    source_index: np.ndarray | None = None
    target_index: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.sources, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        nul = np.asarray(self.is_null, dtype=bool).reshape(-1)
        if not (len(s) == len(t) == len(nul)):
            raise ContractError("correspondence arrays differ in length")
        object.__setattr__(self, "sources", s)
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "is_null", nul)
        for name in ("source_index", "target_index"):
            idx = getattr(self, name)
            idx = np.full(len(s), -1, dtype=np.int64) if idx is None else np.asarray(idx, dtype=np.int64)
            object.__setattr__(self, name, idx)

    def __len__(self):
        return len(self.sources)

    @property
    def n_null(self) -> int:
        return int(self.is_null.sum())

    @property
    def pairs(self) -> list[CorrespondencePair]:
        return [CorrespondencePair(tuple(s), tuple(t), bool(n), self.source_structure)
                for s, t, n in zip(self.sources.tolist(), self.targets.tolist(), self.is_null.tolist())]


CorrespondenceEstimator = Callable[[TriMesh, TriMesh], CorrespondenceSet]


@dataclass(frozen=True)
class SimilarityTransform:
    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.eye(3), 1.0, np.zeros(3))


# ---------------------------------------------------------------------------
# rigid pre-alignment

def _principal_axes(cov: np.ndarray):
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    if w[-1] <= 1e-10 * max(w[0], 1e-300):
        raise DegenerateInputError("point cloud is coplanar or collinear")
    return w, v


def _cloud_moments(points: np.ndarray):
    c = points.mean(axis=0)
    x = points - c
    return c, x.T @ x / len(x)


def rigid_prealign(source_points, target_points, tie_tolerance: float = SIGN_TIE_TOLERANCE,
                   source_moments=None, target_moments=None) -> SimilarityTransform:
    """Similarity transform taking ``source_points`` onto ``target_points``.

    Centroids are matched, principal axes aligned, and the scale set to the
    ratio of RMS radii.  Of the four proper axis-sign choices the one with the
    smallest sum of squared nearest-neighbour distances wins; choices within
    ``tie_tolerance`` (relative) of that minimum are treated as ties and the
    one closest to the identity rotation is taken.

    ``source_moments``/``target_moments`` are optional ``(centroid,
    second_moment)`` pairs replacing the moments of the point clouds; surface
    meshes pass their integrated surface moments.  The sign cost always uses
    the points.
    """
    src = np.asarray(source_points, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    if len(src) < 4 or len(tgt) < 4:
        raise DegenerateInputError("need at least 4 points on each side")
    ms, cs = source_moments if source_moments is not None else _cloud_moments(src)
    mt, ct = target_moments if target_moments is not None else _cloud_moments(tgt)
    ms, mt = np.asarray(ms, dtype=np.float64), np.asarray(mt, dtype=np.float64)
    _, es = _principal_axes(np.asarray(cs, dtype=np.float64))
    _, et = _principal_axes(np.asarray(ct, dtype=np.float64))
    scale = float(np.sqrt(np.trace(ct) / np.trace(cs)))
    xs = src - ms

    tree = cKDTree(tgt)
    candidates = []
    for signs in product((1.0, -1.0), repeat=3):
        rot = et @ np.diag(signs) @ es.T
        if np.linalg.det(rot) < 0:
            continue
        moved = scale * xs @ rot.T + mt
        d, _ = tree.query(moved)
        candidates.append((float((d ** 2).sum()), rot))
    # near-symmetric shapes give near-equal costs; then prefer the smallest rotation
    best_cost = min(c for c, _ in candidates)
    close = [(c, r) for c, r in candidates if c <= best_cost * (1 + tie_tolerance) + 1e-12]
    rot = max(close, key=lambda cr: (np.trace(cr[1]), -cr[0]))[1]
    # re-orthonormalise against round-off
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return SimilarityTransform(rot, scale, mt - scale * rot @ ms)


# ---------------------------------------------------------------------------
# matching

def _mesh_moments(mesh: TriMesh):
    try:
        return surface_moments(mesh)
    except DegenerateInputError:
        return None


def prealign_meshes(source: TriMesh, target: TriMesh) -> SimilarityTransform:
    """rigid_prealign on mesh vertices with the moments taken over the surfaces."""
    return rigid_prealign(source.vertices, target.vertices,
                          source_moments=_mesh_moments(source), target_moments=_mesh_moments(target))


def baseline_match(source: TriMesh, target: TriMesh, null_threshold: float = NULL_THRESHOLD,
                   mutual_factor: float = MUTUAL_FACTOR) -> CorrespondenceSet:
    """Match every source vertex to its nearest target vertex after similarity alignment.

    A match is null when its aligned distance exceeds ``null_threshold`` or is
    more than ``mutual_factor`` times the distance from the matched target
    vertex back to its own nearest aligned source vertex.
    """
    if not source.n_vertices or not target.n_vertices:
        raise ContractError("cannot match an empty mesh")
    tf = prealign_meshes(source, target)
    aligned = tf.apply(source.vertices)
    d, j = cKDTree(target.vertices).query(aligned)
    back, _ = cKDTree(aligned).query(target.vertices[j])
    is_null = (d > null_threshold) | (d > mutual_factor * back)
    return CorrespondenceSet(
        sources=source.vertices.copy(),
        targets=target.vertices[j],
        is_null=is_null,
        source_structure=source.label,
        target_structure=target.label,
        source_index=np.arange(source.n_vertices),
        target_index=j,
    )


@dataclass(frozen=True)
class BaselineEstimator:
    null_threshold: float = NULL_THRESHOLD
    mutual_factor: float = MUTUAL_FACTOR

    def __call__(self, source: TriMesh, target: TriMesh) -> CorrespondenceSet:
        return baseline_match(source, target, self.null_threshold, self.mutual_factor)


def _dedupe(points: np.ndarray, radius: float) -> np.ndarray:
    """Keep-first greedy removal of points closer than ``radius`` to a kept one."""
    keep = np.ones(len(points), dtype=bool)
    if radius <= 0 or len(points) < 2:
        return keep
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    if not len(pairs):
        return keep
    dist = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
    pairs = pairs[dist < radius]
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    later: dict[int, list[int]] = {}
    for i, k in pairs.tolist():
        later.setdefault(i, []).append(k)
    for i in range(len(points)):
        if keep[i]:
            for k in later.get(i, ()):
                keep[k] = False
    return keep


def gather_control_points(sets: Sequence[CorrespondenceSet], min_spacing: float = 1.0) -> ControlPointSet:
    """Concatenate the non-null pairs of all sets into one control-point set.

    Source points closer than half ``min_spacing`` to an earlier one are
    dropped (structure order, then vertex order).
    """
    if not sets:
        raise ContractError("need at least one correspondence set")
    labels, src, tgt = [], [], []
    seen: dict[str, int] = {}
    for cs in sets:
        name = cs.source_structure or "structure"
        if name in seen:
            seen[name] += 1
            name = f"{name}#{seen[name]}"
        else:
            seen[name] = 1
        ok = ~cs.is_null
        labels.append((name, int(ok.sum())))
        src.append(cs.sources[ok])
        tgt.append(cs.targets[ok])
    sources = np.concatenate(src)
    targets = np.concatenate(tgt)
    if not len(sources):
        raise DegenerateInputError("every correspondence is null")
    keep = _dedupe(sources, 0.5 * min_spacing)
    counts, start = {}, 0
    for name, n in labels:
        counts[name] = int(keep[start:start + n].sum())
        start += n
    return ControlPointSet(sources[keep], targets[keep], counts)


# ---------------------------------------------------------------------------
# CSV

def write_correspondences(sets: Iterable[CorrespondenceSet], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for cs in sets:
            for s, t, n in zip(cs.sources.tolist(), cs.targets.tolist(), cs.is_null.tolist()):
                w.writerow([cs.source_structure, *map(repr, s), *map(repr, t), int(n)])


def read_correspondences(path) -> list[CorrespondenceSet]:
    groups: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in CSV_COLUMNS):
            raise FormatError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, 2):
            try:
                rec = ([float(row[c]) for c in CSV_COLUMNS[1:4]],
                       [float(row[c]) for c in CSV_COLUMNS[4:7]],
                       row["is_null"].strip().lower() in ("1", "true"))
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad row") from exc
            groups.setdefault(row["structure"], []).append(rec)
    out = []
    for name, rows in groups.items():
        s, t, n = zip(*rows)
        out.append(CorrespondenceSet(np.array(s), np.array(t), np.array(n), name, name))
    return out


def read_many(paths: Iterable) -> list[CorrespondenceSet]:
    out = []
    for p in paths:
        out.extend(read_correspondences(Path(p)))
    return out
