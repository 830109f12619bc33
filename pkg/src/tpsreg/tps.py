"""Regularised 3D thin-plate spline on control-point displacements.

The spline maps a moving-patient point ``x`` to ``x + u(x)`` with

    u(x) = L x + t + sum_i w_i U(|x - c_i|),     U(r) = -r

where ``U`` is the 3D biharmonic kernel (sign chosen so that the bending
energy ``sum_d w_d^T K w_d`` is non-negative).  The smoothing parameter is
added to the kernel diagonal.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import lapack
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import ContractError, DegenerateInputError, FormatError
from .volume import GridGeometry, read_metaimage_array, write_metaimage_array

# kernel-matrix elements per evaluation chunk
EVAL_CHUNK = 1 << 22
_MAGIC = b"TPSMODEL"
_VERSION = 1


def kernel(r: np.ndarray) -> np.ndarray:
    return -r


@dataclass(frozen=True)
class ControlPointSet:
    """Paired points, grouped in contiguous blocks per structure."""

    sources: np.ndarray
    targets: np.ndarray
    per_structure_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.sources, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        if s.shape != t.shape:
            raise ContractError("sources and targets differ in length")
        counts = dict(self.per_structure_counts) or {"": len(s)}
        if sum(counts.values()) != len(s):
            raise ContractError("per-structure counts do not add up to the number of points")
        object.__setattr__(self, "sources", s)
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "per_structure_counts", counts)

    def __len__(self):
        return len(self.sources)

    @property
    def displacements(self) -> np.ndarray:
        return self.targets - self.sources

    def structure_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, n in self.per_structure_counts.items():
            out[name] = slice(start, start + n)
            start += n
        return out

    def take(self, index) -> "ControlPointSet":
        """Subset by sorted global indices, keeping the structure blocks."""
        index = np.sort(np.asarray(index, dtype=np.int64))
        counts = {}
        for name, sl in self.structure_slices().items():
            counts[name] = int(((index >= sl.start) & (index < sl.stop)).sum())
        return ControlPointSet(self.sources[index], self.targets[index], counts)


@dataclass(frozen=True)
class TpsModel:
    controls: np.ndarray
    weights: np.ndarray
    affine: np.ndarray          # 3x4, [linear | translation], acting on displacement
    lambda_tps: float = 0.0

    @classmethod
    def identity(cls, controls=None) -> "TpsModel":
        c = np.zeros((0, 3)) if controls is None else np.asarray(controls, dtype=np.float64)
        return cls(c, np.zeros_like(c), np.zeros((3, 4)), 0.0)

    @property
    def n(self) -> int:
        return len(self.controls)

    def __call__(self, points) -> np.ndarray:
        return tps_evaluate(self, points)


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement (mm) on the moving-image grid, shape (nx, ny, nz, 3)."""

    geometry: GridGeometry
    vectors: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vectors)
        if vec.shape != self.geometry.dims + (3,):
            raise ContractError(f"field shape {vec.shape} does not match grid {self.geometry.dims}")
        object.__setattr__(self, "vectors", vec)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=-1)


def write_field(fld: DisplacementField, path) -> None:
    write_metaimage_array(path, fld.geometry, fld.vectors.astype(np.float32))


def read_field(path) -> DisplacementField:
    geometry, arr, _ = read_metaimage_array(path)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise FormatError(f"{path}: a displacement field needs 3 channels")
    return DisplacementField(geometry, arr.astype(np.float64))


# ---------------------------------------------------------------------------
# fitting

def _check_spread(points: np.ndarray):
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if len(points) < 4 or sv[-1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateInputError("control points are coplanar or too few (need 4 non-coplanar)")


def _kernel_matvec(c, w, lam):
    """K w + lam w, computed in row chunks without storing K."""
    n = len(c)
    rows = max(1, EVAL_CHUNK // max(n, 1))
    out = np.empty_like(w)
    for s in range(0, n, rows):
        blk = kernel(cdist(c[s:s + rows], c))
        out[s:s + rows] = blk @ w + lam * w[s:s + rows]
    return out


def tps_fit(cps: ControlPointSet, lambda_tps: float = 0.0, refine_steps: int = 2) -> TpsModel:
    """Solve the bordered TPS system for all three displacement components.

    ``[K + lam I, P; P^T, 0] [w; a] = [d; 0]`` with ``P = [1 | c]``.  The
    symmetric indefinite system is factorised once (Bunch-Kaufman) and the
    solution polished with a few steps of iterative refinement.
    """
    if lambda_tps < 0:
        raise ContractError("lambda_tps must be >= 0")
    src = cps.sources
    n = len(src)
    if n < 4:
        raise DegenerateInputError("need at least 4 control points")
    _check_spread(src)
    if lambda_tps == 0:
        scale = float(np.ptp(src, axis=0).max())
        if cKDTree(src).query_pairs(1e-9 * scale, output_type="ndarray").size:
            raise DegenerateInputError("duplicate control points make the interpolation system singular")

    center = src.mean(axis=0)
    c = src - center
    d = cps.displacements
    m = n + 4
    A = np.zeros((m, m), order="F")
    rows = max(1, EVAL_CHUNK // n)
    for s in range(0, n, rows):
        e = min(n, s + rows)
        A[s:e, :n] = kernel(cdist(c[s:e], c))
    A[np.arange(n), np.arange(n)] += lambda_tps
    A[:n, n] = 1.0
    A[:n, n + 1:] = c
    A[n, :n] = 1.0
    A[n + 1:, :n] = c.T

    rhs = np.zeros((m, 3))
    rhs[:n] = d
    lu, ipiv, info = lapack.dsytrf(A, lower=1, overwrite_a=1)
    del A
    if info != 0:
        raise DegenerateInputError("TPS system is singular")
    sol, info = lapack.dsytrs(lu, ipiv, rhs, lower=1)
    if info != 0 or not np.all(np.isfinite(sol)):
        raise DegenerateInputError("TPS solve failed")

    for _ in range(refine_steps):
        w, a = sol[:n], sol[n:]
        res = np.zeros_like(rhs)
        res[:n] = d - (_kernel_matvec(c, w, lambda_tps) + a[0] + c @ a[1:])
        res[n] = -w.sum(axis=0)
        res[n + 1:] = -(c.T @ w)
        corr, info = lapack.dsytrs(lu, ipiv, res, lower=1)
        sol = sol + corr

    w = sol[:n]
    a = sol[n:]                 # rows: [const; x; y; z], cols: output dim
    linear = a[1:].T            # 3x3, displacement = linear @ (x - center) + const
    trans = a[0] - linear @ center
    affine = np.concatenate([linear, trans[:, None]], axis=1)
    return TpsModel(src.copy(), w.copy(), affine, float(lambda_tps))


# ---------------------------------------------------------------------------
# evaluation

def tps_evaluate(model: TpsModel, points) -> np.ndarray:
    """Displacement at each point, shape ``(N, 3)``."""
    pts = np.asarray(points, dtype=np.float64)
    shape = pts.shape
    pts = pts.reshape(-1, 3)
    out = pts @ model.affine[:, :3].T + model.affine[:, 3]
    if model.n:
        rows = max(1, EVAL_CHUNK // model.n)
        for s in range(0, len(pts), rows):
            out[s:s + rows] += kernel(cdist(pts[s:s + rows], model.controls)) @ model.weights
    return out.reshape(shape)


def _lattice(n: int, stride: int) -> np.ndarray:
    idx = np.arange(0, n, stride)
    if idx[-1] != n - 1:
        idx = np.append(idx, n - 1)
    return idx


def _interp_axis(coarse: np.ndarray, idx: np.ndarray, n: int, axis: int) -> np.ndarray:
    """Linear interpolation along ``axis`` from lattice indices ``idx`` to ``0..n-1``."""
    if len(idx) == 1:
        return np.repeat(coarse, n, axis=axis)
    fine = np.arange(n)
    seg = np.clip(np.searchsorted(idx, fine, side="right") - 1, 0, len(idx) - 2)
    t = (fine - idx[seg]) / (idx[seg + 1] - idx[seg])
    lo = np.take(coarse, seg, axis=axis)
    hi = np.take(coarse, seg + 1, axis=axis)
    shape = [1] * coarse.ndim
    shape[axis] = n
    t = t.reshape(shape)
    return lo * (1.0 - t) + hi * t


def tps_field_on_grid(model: TpsModel, geometry: GridGeometry, coarse_stride: int = 1) -> DisplacementField:
    """Evaluate the spline at every voxel centre of ``geometry``.

    With ``coarse_stride > 1`` the spline is evaluated exactly on a lattice of
    every ``coarse_stride``-th voxel (plus the last plane on each axis) and
    trilinearly interpolated in between.
    """
    if coarse_stride < 1:
        raise ContractError("coarse_stride must be >= 1")
    if coarse_stride == 1:
        out = np.empty(geometry.dims + (3,))
        for sl, pts in geometry.iter_slabs():
            out[:, :, sl] = tps_evaluate(model, pts)
        return DisplacementField(geometry, out)

    idx = [_lattice(n, coarse_stride) for n in geometry.dims]
    coords = [geometry.origin[a] + idx[a] * geometry.spacing[a] for a in range(3)]
    pts = np.stack(np.meshgrid(*coords, indexing="ij"), axis=-1)
    coarse = tps_evaluate(model, pts)
    for a in range(3):
        coarse = _interp_axis(coarse, idx[a], geometry.dims[a], a)
    return DisplacementField(geometry, coarse)


def bending_energy(model: TpsModel) -> float:
    """``sum_d w_d^T K w_d``; zero for purely affine models."""
    if not model.n:
        return 0.0
    kw = _kernel_matvec(model.controls, model.weights, 0.0)
    return float((model.weights * kw).sum())


# ---------------------------------------------------------------------------
# control-point subsampling

def _farthest_point(points: np.ndarray, k: int, min_separation: float) -> np.ndarray:
    n = len(points)
    if k >= n and min_separation <= 0:
        return np.arange(n)
    chosen = [0]
    dist = np.linalg.norm(points - points[0], axis=1)
    while len(chosen) < min(k, n):
        nxt = int(np.argmax(dist))
        if dist[nxt] <= 0 or dist[nxt] < min_separation:
            break
        chosen.append(nxt)
        np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1), out=dist)
    return np.sort(np.asarray(chosen))


def subsample_controls(cps: ControlPointSet, max_n: int, min_separation: float = 0.0) -> ControlPointSet:
    """Greedy farthest-point subsampling, with per-structure quotas proportional
    to structure size (largest-remainder rounding)."""
    if max_n < 4:
        raise ContractError("max_n must be >= 4")
    n = len(cps)
    if max_n >= n and min_separation <= 0:
        return cps
    slices = cps.structure_slices()
    names = list(slices)
    sizes = np.array([cps.per_structure_counts[k] for k in names], dtype=np.float64)
    share = np.minimum(sizes, max_n * sizes / max(n, 1))
    quota = np.floor(share).astype(int)
    order = np.argsort(-(share - quota), kind="stable")
    for i in order[: max(0, min(max_n, n) - quota.sum())]:
        if quota[i] < sizes[i]:
            quota[i] += 1
    keep = []
    for name, q in zip(names, quota):
        sl = slices[name]
        if q <= 0:
            continue
        local = _farthest_point(cps.sources[sl], int(q), min_separation)
        keep.append(local + sl.start)
    idx = np.concatenate(keep) if keep else np.empty(0, dtype=np.int64)
    return cps.take(idx)


# ---------------------------------------------------------------------------
# serialisation

def save_tps(model: TpsModel, path) -> None:
    """Little-endian binary: magic, version, n, lambda, controls, weights, affine."""
    head = _MAGIC + struct.pack("<IQd", _VERSION, model.n, model.lambda_tps)
    body = (np.ascontiguousarray(model.controls, dtype="<f8").tobytes()
            + np.ascontiguousarray(model.weights, dtype="<f8").tobytes()
            + np.ascontiguousarray(model.affine, dtype="<f8").tobytes())
    Path(path).write_bytes(head + body)


def load_tps(path) -> TpsModel:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise FormatError(f"{path}: not a TPS model file")
    off = len(_MAGIC)
    version, n, lam = struct.unpack_from("<IQd", data, off)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    off += struct.calcsize("<IQd")
    need = off + 8 * (6 * n + 12)
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    controls = arr[: 3 * n].reshape(n, 3)
    weights = arr[3 * n: 6 * n].reshape(n, 3)
    affine = arr[6 * n:].reshape(3, 4)
    return TpsModel(controls, weights, affine, lam)
