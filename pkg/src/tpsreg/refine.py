"""Cubic B-spline free-form refinement with an SSD + bending objective.

Minimal intensity-based second stage: the field lives on the moving grid,
the fixed image is pulled through it, and the coefficients are optimised by
gradient descent with step halving.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tps import DisplacementField
from .volume import GridGeometry, IntensityKind, Volume, trilinear_at_indices

log = logging.getLogger(__name__)

LATTICE_SPACING = 20.0
BENDING_WEIGHT = 0.001
MAX_ITERS = 50


@dataclass(frozen=True)
class BsplineGrid:
    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]
    coefficients: np.ndarray        # (na, nb, nc, 3), mm

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.coefficients.shape[:3])

    def with_coefficients(self, coefficients) -> "BsplineGrid":
        return BsplineGrid(self.origin, self.spacing, np.asarray(coefficients, dtype=np.float64))


def make_grid(geometry: GridGeometry, lattice_spacing: float = LATTICE_SPACING) -> BsplineGrid:
    """Zero lattice covering ``geometry`` plus one ring of nodes on every side."""
    spacing = np.full(3, float(lattice_spacing))
    if np.any(spacing < 4 * np.asarray(geometry.spacing) - 1e-9):
        raise ContractError("lattice spacing must be at least 4x the voxel spacing")
    extent = (np.asarray(geometry.dims) - 1) * np.asarray(geometry.spacing)
    dims = np.floor(extent / spacing + 1e-9).astype(int) + 4
    origin = np.asarray(geometry.origin) - spacing
    return BsplineGrid(tuple(origin), tuple(spacing), np.zeros(tuple(dims) + (3,)))


def _basis_matrix(coords: np.ndarray, origin: float, spacing: float, n_nodes: int) -> np.ndarray:
    t = (coords - origin) / spacing
    i = np.floor(t).astype(np.int64)
    if np.any(i < 1) or np.any(i + 2 > n_nodes - 1):
        raise ContractError("B-spline lattice does not cover the requested grid")
    u = t - i
    w = np.stack([
        (1 - u) ** 3 / 6.0,
        (3 * u ** 3 - 6 * u ** 2 + 4) / 6.0,
        (-3 * u ** 3 + 3 * u ** 2 + 3 * u + 1) / 6.0,
        u ** 3 / 6.0,
    ], axis=1)
    B = np.zeros((len(coords), n_nodes))
    rows = np.arange(len(coords))
    for k in range(4):
        B[rows, i - 1 + k] = w[:, k]
    return B


def _bases(grid: BsplineGrid, geometry: GridGeometry):
    return [_basis_matrix(geometry.axis_coords(a), grid.origin[a], grid.spacing[a], grid.dims[a])
            for a in range(3)]


def _expand(bases, coeffs):
    bx, by, bz = bases
    t = np.tensordot(bx, coeffs, axes=(1, 0))
    t = np.einsum("jb,ibcd->ijcd", by, t)
    return np.einsum("kc,ijcd->ijkd", bz, t)


def _contract(bases, g):
    bx, by, bz = bases
    t = np.einsum("kc,ijkd->ijcd", bz, g)
    t = np.einsum("jb,ijcd->ibcd", by, t)
    return np.tensordot(bx.T, t, axes=(1, 0))


def bspline_field(grid: BsplineGrid, geometry: GridGeometry) -> DisplacementField:
    """Tensor-product cubic B-spline evaluated at every voxel centre."""
    return DisplacementField(geometry, _expand(_bases(grid, geometry), grid.coefficients))


def _second_diff(c: np.ndarray, axis: int) -> np.ndarray:
    """Second difference with zero ghost nodes (Dirichlet), same shape as ``c``."""
    p = np.pad(c, [(1, 1) if a == axis else (0, 0) for a in range(c.ndim)])
    n = c.shape[axis]
    lo = np.take(p, np.arange(0, n), axis=axis)
    mid = np.take(p, np.arange(1, n + 1), axis=axis)
    hi = np.take(p, np.arange(2, n + 2), axis=axis)
    return hi - 2 * mid + lo


def bending_penalty(grid: BsplineGrid) -> tuple[float, np.ndarray]:
    """Mean squared lattice second derivative (per mm^2) and its gradient."""
    c = grid.coefficients
    n = c.shape[0] * c.shape[1] * c.shape[2]
    val = 0.0
    grad = np.zeros_like(c)
    for a in range(3):
        h2 = grid.spacing[a] ** 2
        d = _second_diff(c, a) / h2
        val += float((d * d).sum())
        grad += 2.0 * _second_diff(d, a) / h2
    return val / n, grad / n


def _require_pair(fixed: Volume, moving: Volume):
    if fixed.geometry != moving.geometry:
        raise ContractError("fixed and moving volumes must share a geometry")
    if fixed.intensity_kind is not IntensityKind.NORMALISED or moving.intensity_kind is not IntensityKind.NORMALISED:
        raise ContractError("refinement expects window-normalised volumes")


class _Problem:
    def __init__(self, fixed: Volume, moving: Volume, grid: BsplineGrid, bending_weight: float):
        self.fixed = fixed
        self.target = moving.values.astype(np.float64)
        self.geometry = moving.geometry
        self.grid = grid
        self.weight = bending_weight
        self.bases = _bases(grid, moving.geometry)
        self.points = moving.geometry.voxel_centers()
        self.n = moving.geometry.n_voxels

    def _pull(self, coeffs, gradient):
        u = _expand(self.bases, coeffs)
        q = self.fixed.geometry.physical_to_index((self.points + u).reshape(-1, 3))
        return trilinear_at_indices(self.fixed.values, q, self.fixed.border_value, gradient=gradient)

    def objective(self, coeffs) -> float:
        vals = self._pull(coeffs, False)
        r = vals - self.target.reshape(-1)
        pen, _ = bending_penalty(self.grid.with_coefficients(coeffs))
        return float((r * r).sum() / self.n) + self.weight * pen

    def objective_and_gradient(self, coeffs):
        vals, gq = self._pull(coeffs, True)
        r = vals - self.target.reshape(-1)
        g_phys = gq / np.asarray(self.fixed.geometry.spacing)
        du = (2.0 / self.n) * r[:, None] * g_phys
        grad = _contract(self.bases, du.reshape(self.geometry.dims + (3,)))
        pen, pgrad = bending_penalty(self.grid.with_coefficients(coeffs))
        return float((r * r).sum() / self.n) + self.weight * pen, grad + self.weight * pgrad


def bspline_objective(fixed: Volume, moving: Volume, grid: BsplineGrid,
                      bending_weight: float = BENDING_WEIGHT) -> tuple[float, np.ndarray]:
    """SSD + bending objective and its analytic gradient at ``grid.coefficients``."""
    _require_pair(fixed, moving)
    return _Problem(fixed, moving, grid, bending_weight).objective_and_gradient(grid.coefficients)


@dataclass
class RefineResult:
    grid: BsplineGrid
    history: list[float] = field(default_factory=list)
    iterations: int = 0


def bspline_optimize(fixed: Volume, moving: Volume, lattice_spacing: float = LATTICE_SPACING,
                     bending_weight: float = BENDING_WEIGHT, max_iters: int = MAX_ITERS,
                     cover: GridGeometry | None = None, initial_step: float | None = None,
                     tol: float = 1e-7) -> RefineResult:
    """Gradient descent on the lattice coefficients.

    Each iteration moves the coefficient with the largest gradient by ``step``
    mm (others proportionally); failed steps are halved, successful ones grow
    by 1.5x.  ``cover`` sizes the lattice for a (larger) grid on which the
    result will later be evaluated.
    """
    _require_pair(fixed, moving)
    if bending_weight < 0 or max_iters < 0:
        raise ContractError("bending_weight and max_iters must be non-negative")
    grid = make_grid(cover or moving.geometry, lattice_spacing)
    if cover is not None:
        # the lattice must also cover the optimisation grid
        _bases(grid, moving.geometry)
    prob = _Problem(fixed, moving, grid, bending_weight)
    c = grid.coefficients.copy()
    step = initial_step if initial_step is not None else min(moving.geometry.spacing)
    min_step = 1e-6 * step
    energy, g = prob.objective_and_gradient(c)
    history = [energy]
    it = 0
    for it in range(1, max_iters + 1):
        gmax = float(np.abs(g).max())
        if gmax == 0.0:
            it -= 1
            break
        direction = g / gmax
        accepted = False
        while step >= min_step:
            trial = c - step * direction
            e_trial = prob.objective(trial)
            if e_trial < energy:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            it -= 1
            break
        rel = (energy - e_trial) / max(abs(energy), 1e-300)
        c, energy = trial, e_trial
        history.append(energy)
        step *= 1.5
        if rel < tol:
            break
        energy, g = prob.objective_and_gradient(c)
    log.debug("bspline refine: %d iterations, objective %.6g -> %.6g", it, history[0], history[-1])
    return RefineResult(grid.with_coefficients(c), history, it)


def bspline_register(fixed: Volume, moving: Volume, lattice_spacing: float = LATTICE_SPACING,
                     bending_weight: float = BENDING_WEIGHT, max_iters: int = MAX_ITERS) -> DisplacementField:
    """Refinement field on the moving grid: ``fixed(x + u(x))`` approximates ``moving(x)``."""
    res = bspline_optimize(fixed, moving, lattice_spacing, bending_weight, max_iters)
    return bspline_field(res.grid, moving.geometry)
