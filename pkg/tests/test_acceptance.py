"""Acceptance suite: one verdict line per criterion.

Every check records ``PASS``/``FAIL`` plus the measured numbers before it
asserts, so the terminal summary lists all eight criteria even when some
fail.  Run alone with ``pytest tests/test_acceptance.py`` or
``python tests/test_acceptance.py``.

Criteria 5-7 build phantoms at 2 mm and 1 mm and take most of the time.
"""
import hashlib
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE, ball_mask
from tpsreg import pipeline
from tpsreg.correspond import gather_control_points
from tpsreg.mesh import decimate, marching_cubes, mesh_diagnostics, taubin_smooth
from tpsreg.metrics import bonferroni_threshold, hausdorff, mdta, structure_metrics, wilcoxon_signed_rank
from tpsreg.phantom import write_case
from tpsreg.tps import ControlPointSet, bending_energy, tps_evaluate, tps_field_on_grid, tps_fit
from tpsreg.volume import GridGeometry, read_metaimage_array

# documented reduction of the 128x288x480 crop: same field of view, 2 mm voxels
REDUCED = GridGeometry((64, 144, 240), (2.0, 2.0, 2.0))
FULL = GridGeometry((128, 288, 480), (1.0, 1.0, 1.0))
ORGANS = ("brainstem", "parotid_l", "parotid_r", "mandible_body")
C5_SEED = 0
C6_SEEDS = (0, 1, 2, 3, 4)
# refiner at its defaults; from_rigid=false only skips the extra no-init pipeline
C6_OVERRIDES = ["refine.enabled=true", "refine.from_rigid=false"]

FIRST_DIGESTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


class Hasher:
    def __init__(self):
        self.h = hashlib.sha256()

    def add(self, *arrays):
        for a in arrays:
            a = np.ascontiguousarray(a)
            self.h.update(str((a.dtype, a.shape)).encode())
            self.h.update(a.tobytes())

    def add_dir(self, directory: Path, skip=("timing.json", "config.json")):
        for p in sorted(directory.rglob("*")):
            if p.is_file() and p.name not in skip:
                self.h.update(str(p.relative_to(directory)).encode())
                self.h.update(p.read_bytes())

    def hexdigest(self):
        return self.h.hexdigest()


# -- 1: TPS correctness ------------------------------------------------------

def _side_error(model):
    w, c = model.weights, model.controls
    scale = max(1.0, float(np.abs(w).max()) * float(np.abs(c).max()))
    return max(float(np.abs(w.sum(axis=0)).max()), float(np.abs(c.T @ w).max()) / scale)


def criterion_1(workdir: Path):
    rng = np.random.default_rng(101)
    h = Hasher()
    t0 = time.perf_counter()
    worst_resid = worst_affine = worst_side = 0.0
    for _ in range(50):
        src = rng.uniform(-60, 60, (200, 3))
        tgt = src + rng.normal(scale=4.0, size=(200, 3))
        m = tps_fit(ControlPointSet(src, tgt), 0.0)
        worst_resid = max(worst_resid, float(np.abs(src + tps_evaluate(m, src) - tgt).max()))
        worst_side = max(worst_side, _side_error(m))
        h.add(m.weights, m.affine)
    for _ in range(20):
        src = rng.uniform(-60, 60, (rng.integers(20, 200), 3))
        A = np.eye(3) + rng.normal(scale=0.1, size=(3, 3))
        tgt = src @ A.T + rng.normal(scale=10.0, size=3)
        for lam in (0.0, 1.0, 100.0):
            m = tps_fit(ControlPointSet(src, tgt), lam)
            worst_affine = max(worst_affine, float(np.abs(m.weights).max()))
            worst_side = max(worst_side, _side_error(m))
            h.add(m.weights, m.affine)
    monotone = True
    lams = (0.0, 0.1, 1.0, 10.0, 100.0, 1000.0)
    for _ in range(10):
        src = rng.uniform(-60, 60, (120, 3))
        cps = ControlPointSet(src, src + rng.normal(scale=3.0, size=(120, 3)))
        energy, resid = [], []
        for lam in lams:
            m = tps_fit(cps, lam)
            worst_side = max(worst_side, _side_error(m))
            energy.append(bending_energy(m))
            resid.append(float(np.linalg.norm(src + tps_evaluate(m, src) - cps.targets)))
            h.add(m.weights, m.affine)
        monotone &= all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(energy, energy[1:]))
        monotone &= all(b >= a * (1 - 1e-9) - 1e-12 for a, b in zip(resid, resid[1:]))
    elapsed = time.perf_counter() - t0
    ok = worst_resid < 1e-8 and worst_affine < 1e-6 and worst_side < 1e-8 and monotone and elapsed < 60
    detail = (f"interp residual {worst_resid:.1e} mm (<1e-8), affine |w| {worst_affine:.1e} (<1e-6), "
              f"side conditions {worst_side:.1e}, lambda-monotone {monotone}, {elapsed:.1f} s (<60)")
    return ok, detail, h.hexdigest()


# -- 2: field evaluation -----------------------------------------------------

def smooth_benchmark(n=50, seed=7, amplitude=5.0, wavelength=128.0, inside=False):
    """50-control model of a smooth sinusoidal deformation of a 64 mm cube.

    Controls sit on a shell 60-80 mm from the cube centre so no kernel cone
    point lies on the grid; ``inside=True`` scatters them through the cube
    instead, which puts a gradient kink at every control.
    """
    rng = np.random.default_rng(seed)
    if inside:
        src = rng.uniform(0, 63, (n, 3))
    else:
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        src = 31.5 + d * rng.uniform(60, 80, (n, 1))
    k = 2 * np.pi / wavelength
    ph = rng.uniform(0, 2 * np.pi, 3)
    u = amplitude * np.stack([np.sin(k * src[:, 1] + ph[0]), np.sin(k * src[:, 2] + ph[1]),
                              np.sin(k * src[:, 0] + ph[2])], axis=1)
    return tps_fit(ControlPointSet(src, src + u), 0.0)


def criterion_2(workdir: Path):
    g = GridGeometry((64, 64, 64))
    h = Hasher()
    t0 = time.perf_counter()
    model = smooth_benchmark()
    f1 = tps_field_on_grid(model, g, 1).vectors
    direct = tps_evaluate(model, g.voxel_centers().reshape(-1, 3)).reshape(f1.shape)
    exact = float(np.abs(f1 - direct).max())
    f4 = tps_field_on_grid(model, g, 4).vectors
    coarse = float(np.linalg.norm(f4 - f1, axis=-1).max())
    kinked = smooth_benchmark(inside=True)
    k1 = tps_field_on_grid(kinked, g, 1).vectors
    k4 = tps_field_on_grid(kinked, g, 4).vectors
    kink_dev = float(np.linalg.norm(k4 - k1, axis=-1).max())
    h.add(f1, f4, k1, k4)
    elapsed = time.perf_counter() - t0
    ok = exact <= 1e-9 and coarse < 0.1 and elapsed < 300
    detail = (f"stride-1 vs pointwise {exact:.1e} mm (<=1e-9), stride-4 vs stride-1 {coarse:.3f} mm (<0.1) "
              f"[controls inside the grid: {kink_dev:.3f} mm, informational], {elapsed:.1f} s (<300)")
    return ok, detail, h.hexdigest()


# -- 3: meshes ---------------------------------------------------------------

def criterion_3(workdir: Path):
    h = Hasher()
    t0 = time.perf_counter()
    topo_ok, raw_ratios, smooth_ratios, drifts = True, [], [], []
    for r in (5, 10, 20):
        mc = marching_cubes(ball_mask(r))
        d = mesh_diagnostics(mc)
        topo_ok &= d.watertight and d.euler_characteristic == 2
        r_eff = (3 * d.enclosed_volume / (4 * np.pi)) ** (1 / 3)
        raw_ratios.append(d.surface_area / (4 * np.pi * r_eff ** 2))
        sm = taubin_smooth(mc, 0.5, -0.53, 10)
        ds = mesh_diagnostics(sm)
        rs = (3 * ds.enclosed_volume / (4 * np.pi)) ** (1 / 3)
        smooth_ratios.append(ds.surface_area / (4 * np.pi * rs ** 2))
        drifts.append(abs(ds.enclosed_volume / d.enclosed_volume - 1))
        h.add(mc.vertices, mc.faces, sm.vertices)
    sphere = taubin_smooth(marching_cubes(ball_mask(20)))
    target = int(round(sphere.n_faces * 0.6))
    dec = decimate(sphere, target)
    dec_drift = abs(mesh_diagnostics(dec).enclosed_volume / mesh_diagnostics(sphere).enclosed_volume - 1)
    h.add(dec.vertices, dec.faces)
    elapsed = time.perf_counter() - t0
    area_ok = all(abs(q - 1) < 0.05 for q in raw_ratios)
    ok = topo_ok and area_ok and max(drifts) < 0.05 and dec_drift < 0.02 and elapsed < 120
    detail = (f"watertight chi=2 {topo_ok}; raw marching-cubes area / 4 pi r^2 "
              f"{', '.join(f'{q:.3f}' for q in raw_ratios)} (within 5%: {area_ok}) "
              f"[after Taubin {', '.join(f'{q:.3f}' for q in smooth_ratios)}, informational]; "
              f"Taubin volume drift {max(drifts):.2%} (<5%); decimation {sphere.n_faces}->{dec.n_faces} faces "
              f"drift {dec_drift:.3%} (<2%); {elapsed:.1f} s (<120)")
    return ok, detail, h.hexdigest()


# -- 4: metric oracles -------------------------------------------------------

def _brute_directed(a, b):
    out = np.empty(len(a))
    for i in range(0, len(a), 256):
        out[i:i + 256] = np.sqrt(((a[i:i + 256, None, :] - b[None, :, :]) ** 2).sum(-1)).min(axis=1)
    return out


def _enumerated_p(d):
    ranks = stats.rankdata(np.abs(d))
    w = ranks[d > 0].sum()
    n = len(d)
    signs = (np.arange(1 << n)[:, None] >> np.arange(n)) & 1
    totals = signs @ ranks
    return min(1.0, 2 * min(np.mean(totals <= w + 1e-9), np.mean(totals >= w - 1e-9)))


def criterion_4(workdir: Path):
    rng = np.random.default_rng(404)
    h = Hasher()
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        a = rng.normal(scale=20.0, size=(rng.integers(1, 2001), 3))
        b = rng.normal(scale=20.0, size=(rng.integers(1, 2001), 3)) + rng.normal(scale=5.0, size=3)
        ab, ba = _brute_directed(a, b), _brute_directed(b, a)
        m, hd = mdta(a, b), hausdorff(a, b)
        worst = max(worst, abs(m - 0.5 * (ab.mean() + ba.mean())), abs(hd - max(ab.max(), ba.max())))
        h.add(np.array([m, hd]))
    worst_p = 0.0
    for i in range(50):
        n = 5 + i % 8
        x = rng.normal(size=n)
        y = x + rng.normal(loc=0.3, size=n)
        if i % 3 == 0:
            y = x + np.round(y - x, 1)          # tied magnitudes
        d = (x - y)[x != y]
        if len(d) < 5:
            continue
        res = wilcoxon_signed_rank(x, y)
        worst_p = max(worst_p, abs(res.p_value - _enumerated_p(d)))
        h.add(np.array([res.statistic, res.p_value]))
    thr = bonferroni_threshold(0.05, 11)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and worst_p <= 1e-12 and round(thr, 4) == 0.0045 and elapsed < 120
    detail = (f"mdta/hausdorff vs brute force {worst:.1e} mm (<=1e-9), exact Wilcoxon vs enumeration "
              f"{worst_p:.1e}, bonferroni(0.05, 11) = {thr:.6f} -> {round(thr, 4)} (0.0045), {elapsed:.1f} s (<120)")
    return ok, detail, h.hexdigest()


# -- 5: phantom recovery -----------------------------------------------------

def _self_case(directory: Path) -> Path:
    cfg = write_case(directory, REDUCED, n_organs=4, seed=C5_SEED)
    for suffix in (".mhd", ".raw"):
        shutil.copy(directory / f"fixed{suffix}", directory / f"moving{suffix}")
    for p in directory.glob("fixed_*.raw"):
        shutil.copy(p, directory / p.name.replace("fixed_", "moving_"))
    return cfg


def criterion_5(workdir: Path):
    h = Hasher()
    t0 = time.perf_counter()
    case = workdir / "c5"
    cfg = pipeline.load_config(write_case(case, REDUCED, n_organs=4, seed=C5_SEED))
    art = pipeline.run_initialise(cfg)
    elapsed = time.perf_counter() - t0
    _, true, _ = read_metaimage_array(case / "true_field.mhd")
    organ = np.any([art.moving_masks[n].bits for n in ORGANS], axis=0)
    err = np.linalg.norm(art.field.vectors[organ] - true[organ], axis=-1)
    per_organ = {n: float(np.linalg.norm(art.field.vectors[art.moving_masks[n].bits]
                                         - true[art.moving_masks[n].bits], axis=-1).mean()) for n in ORGANS}
    voxel = min(REDUCED.spacing)
    dta = {n: structure_metrics(art.warped_masks[n], art.moving_masks[n]).mdta for n in ORGANS}
    h.add_dir(art.output_dir)

    selfcfg = pipeline.load_config(_self_case(workdir / "c5_self"))
    self_art = pipeline.run_initialise(selfcfg)
    self_norm = float(self_art.field.norms().max())
    h.add_dir(self_art.output_dir)

    ok = err.mean() < 1.0 and max(dta.values()) < voxel and self_norm < 0.5 and elapsed < 600
    detail = (f"{REDUCED.dims[0]}x{REDUCED.dims[1]}x{REDUCED.dims[2]} at {voxel:g} mm, seed {C5_SEED}: "
              f"organ field error {err.mean():.3f} mm (<1) "
              f"[{', '.join(f'{n} {v:.2f}' for n, v in per_organ.items())}]; "
              f"organ mDTA max {max(dta.values()):.2f} mm (<{voxel:g}); self-registration |u| max "
              f"{self_norm:.1e} mm (<0.5); init {elapsed:.0f} s (<600)")
    return ok, detail, h.hexdigest()


# -- 6: two-stage improvement ------------------------------------------------

def criterion_6(workdir: Path):
    h = Hasher()
    t0 = time.perf_counter()
    beats_rigid, losses, init_vals, refined_vals = True, [], [], []
    for seed in C6_SEEDS:
        case = workdir / f"c6_{seed}"
        cfg = pipeline.load_config(write_case(case, REDUCED, n_organs=4, seed=seed), C6_OVERRIDES)
        rows = pipeline.run_register(cfg).metrics
        by = {(r["pipeline"], r["structure"]): r["mdta"] for r in rows if r["role"] == "included"}
        names = sorted({s for _, s in by})
        for name in names:
            if not by["init", name] < by["rigid", name]:
                beats_rigid = False
                losses.append(f"seed {seed} {name}")
            init_vals.append(by["init", name])
            refined_vals.append(by["init+refine", name])
        h.add_dir(cfg.output_dir)
    elapsed = time.perf_counter() - t0
    mean_init, mean_ref = float(np.mean(init_vals)), float(np.mean(refined_vals))
    ok = beats_rigid and mean_ref <= mean_init
    detail = (f"{len(C6_SEEDS)} phantom pairs x {len(init_vals) // len(C6_SEEDS)} included structures: "
              f"init < rigid everywhere {beats_rigid}{' (' + ', '.join(losses) + ')' if losses else ''}; "
              f"mean mDTA init {mean_init:.3f} mm, init+refine {mean_ref:.3f} mm (<= init); {elapsed:.0f} s")
    return ok, detail, h.hexdigest()


# -- 7: performance ----------------------------------------------------------

def criterion_7(workdir: Path):
    case = workdir / "c7"
    cfg = pipeline.load_config(write_case(case, FULL, n_organs=9, seed=0), ["tps.max_controls=2000"])
    t0 = time.perf_counter()
    art = pipeline.run_initialise(cfg)
    init_s = time.perf_counter() - t0
    stages = art.timing.as_dict()
    breakdown = all(stages[s] > 0 for s in ("mesh_generation", "correspondence", "tps_fit", "resampling"))

    cps = gather_control_points(art.correspondences, cfg.min_spacing)
    t0 = time.perf_counter()
    model = tps_fit(cps, 0.0)
    fit_s = time.perf_counter() - t0
    resid = float(np.abs(cps.sources + tps_evaluate(model, cps.sources) - cps.targets).max())
    side = _side_error(model)
    ok = resid < 1e-8 and side < 1e-8 and fit_s < 900 and init_s < 120 and breakdown
    detail = (f"{len(cps)} gathered controls (11 structures, 1 mm phantom): fit {fit_s:.0f} s (<900), "
              f"residual {resid:.1e} mm (<1e-8), side conditions {side:.1e}; init with 2000 controls "
              f"{init_s:.1f} s (<120), stages {stages}")
    return ok, detail, None


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4,
            5: criterion_5, 6: criterion_6, 7: criterion_7}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


SLOW = {5, 6, 7}


@pytest.mark.parametrize("n", [pytest.param(n, marks=pytest.mark.slow) if n in SLOW else n
                               for n in sorted(CRITERIA)])
def test_criterion(n, workdir):
    ok, detail, digest = CRITERIA[n](workdir / "first")
    if digest is not None:
        FIRST_DIGESTS[n] = digest
    record(n, ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_criterion_8_determinism(workdir):
    """Re-run criteria 1-6 in a fresh directory and compare every artifact byte for byte."""
    differing = []
    for n in range(1, 7):
        if n not in FIRST_DIGESTS:
            FIRST_DIGESTS[n] = CRITERIA[n](workdir / "first")[2]
        if CRITERIA[n](workdir / "second")[2] != FIRST_DIGESTS[n]:
            differing.append(n)
    ok = not differing
    record(8, ok, "criteria 1-6 re-run: artifacts bit-identical" if ok
           else f"criteria {differing} produced different artifacts")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", *sys.argv[1:]]))
