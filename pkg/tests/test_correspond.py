import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from conftest import ball_mask
from tpsreg.correspond import (BaselineEstimator, CorrespondenceSet, baseline_match, gather_control_points,
                               read_correspondences, rigid_prealign, write_correspondences)
from tpsreg.errors import ContractError, DegenerateInputError, FormatError
from tpsreg.mesh import TriMesh, condition
from tpsreg.segment import Mask


def anisotropic_cloud(seed=0, n=400):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 3)) * [30.0, 12.0, 5.0] + [4.0, -2.0, 7.0]


def rotation_angle(r):
    return float(np.arccos(np.clip((np.trace(r) - 1) / 2, -1, 1)))


@pytest.fixture(scope="module")
def sphere():
    return condition(ball_mask(15, label="sphere"), target_faces=3000)


def test_prealign_identity_and_translation():
    p = anisotropic_cloud()
    tf = rigid_prealign(p, p)
    assert np.allclose(tf.rotation, np.eye(3), atol=1e-12) and tf.scale == pytest.approx(1.0)
    assert np.allclose(tf.translation, 0, atol=1e-10)
    tf = rigid_prealign(p, p + [10.0, 0, 0])
    assert np.allclose(tf.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(tf.translation, [10, 0, 0], atol=1e-9)


def test_prealign_recovers_rotation_and_scale():
    p = anisotropic_cloud(1)
    R = Rotation.from_euler("z", 30, degrees=True).as_matrix()
    tf = rigid_prealign(p, 1.1 * p @ R.T)
    assert rotation_angle(tf.rotation.T @ R) < 1e-6
    assert tf.scale == pytest.approx(1.1, abs=1e-6)
    assert np.allclose(tf.rotation.T @ tf.rotation, np.eye(3), atol=1e-9)
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
def test_prealign_never_worse_than_no_alignment(seed):
    rng = np.random.default_rng(seed)
    p = anisotropic_cloud(seed % 1000, 200)
    R = Rotation.random(random_state=seed).as_matrix()
    q = p @ R.T + rng.normal(scale=20, size=3) + rng.normal(scale=0.5, size=p.shape)
    tf = rigid_prealign(p, q)
    tree = cKDTree(q)
    before = (tree.query(p)[0] ** 2).sum()
    after = (tree.query(tf.apply(p))[0] ** 2).sum()
    assert after <= before


def test_prealign_rejects_flat_clouds():
    rng = np.random.default_rng(2)
    flat = np.c_[rng.normal(size=(50, 2)), np.zeros(50)]
    with pytest.raises(DegenerateInputError):
        rigid_prealign(flat, anisotropic_cloud())
    with pytest.raises(DegenerateInputError):
        rigid_prealign(flat[:3], flat[:3])


def test_prealign_prefers_small_rotation_on_symmetric_shapes():
    # an ellipsoid surface is symmetric under every axis-sign flip
    rng = np.random.default_rng(3)
    v = rng.normal(size=(3000, 3))
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * [25.0, 15.0, 8.0]
    tf = rigid_prealign(v, v + [3.0, 2.0, 1.0])
    assert rotation_angle(tf.rotation) < 0.05


def test_self_match_is_identity(sphere):
    cs = baseline_match(sphere, sphere)
    assert cs.n_null == 0
    assert np.array_equal(cs.target_index, np.arange(sphere.n_vertices))
    assert np.array_equal(cs.sources, cs.targets)


def test_translated_sphere(sphere):
    moved = TriMesh(sphere.vertices + [5.0, 0, 0], sphere.faces, "moved")
    cs = baseline_match(sphere, moved, null_threshold=10.0)
    assert cs.n_null == 0
    err = np.linalg.norm(cs.targets - (sphere.vertices + [5.0, 0, 0]), axis=1)
    assert err.mean() < 1.0


def test_global_rigid_motion_keeps_assignment():
    m = condition(Mask(*_blob(), "blob"), target_faces=1500)
    other = TriMesh(m.vertices * [1.1, 0.95, 1.0] + [2.0, -1.0, 3.0], m.faces, "other")
    ref = baseline_match(m, other)
    R = Rotation.from_euler("xyz", [20, -35, 50], degrees=True).as_matrix()
    t = np.array([40.0, -12.0, 7.5])
    a = TriMesh(m.vertices @ R.T + t, m.faces, "a")
    b = TriMesh(other.vertices @ R.T + t, other.faces, "b")
    cs = baseline_match(a, b)
    assert np.array_equal(cs.target_index, ref.target_index)
    assert np.array_equal(cs.is_null, ref.is_null)


def _blob():
    from tpsreg.volume import GridGeometry
    n = 40
    i, j, k = np.meshgrid(*[np.arange(n)] * 3, indexing="ij")
    bits = ((i - 19) / 15) ** 2 + ((j - 20) / 9) ** 2 + ((k - 18) / 6) ** 2 <= 1
    bits |= ((i - 28) / 5) ** 2 + ((j - 25) / 5) ** 2 + ((k - 20) / 5) ** 2 <= 1
    return GridGeometry((n, n, n)), bits


def _hemisphere(sphere):
    c = sphere.vertices.mean(axis=0)
    keep = sphere.vertices[:, 2] >= c[2]
    faces = sphere.faces[keep[sphere.faces].all(axis=1)]
    used = np.unique(faces)
    remap = np.full(sphere.n_vertices, -1)
    remap[used] = np.arange(len(used))
    return TriMesh(sphere.vertices[used], remap[faces], "hemisphere"), sphere.vertices[:, 2] - c[2]


def test_hemisphere_nulls_concentrate_on_missing_half(sphere):
    half, z = _hemisphere(sphere)
    cs = baseline_match(sphere, half, null_threshold=10.0)
    assert cs.is_null[z > 0.0].mean() < 0.05
    # most of the flagged vertices belong to the half that has no partner surface
    assert (cs.is_null & (z < 0.0)).sum() > 0.75 * cs.is_null.sum()


@pytest.mark.xfail(strict=True, reason="similarity pre-alignment shifts and shrinks a full sphere onto a "
                                       "hemisphere, so part of the missing half finds close partners")
def test_hemisphere_missing_half_is_all_null(sphere):
    half, z = _hemisphere(sphere)
    cs = baseline_match(sphere, half, null_threshold=10.0)
    assert cs.is_null[z < -2.0].all()


def test_estimator_wraps_baseline(sphere):
    est = BaselineEstimator(null_threshold=5.0, mutual_factor=3.0)
    a = est(sphere, sphere)
    b = baseline_match(sphere, sphere, 5.0, 3.0)
    assert np.array_equal(a.target_index, b.target_index)


def test_match_rejects_empty_mesh(sphere):
    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int), "e")
    with pytest.raises(ContractError):
        baseline_match(sphere, empty)


def _set(name, src, null=None, tgt=None):
    src = np.asarray(src, float)
    tgt = src + 1.0 if tgt is None else tgt
    null = np.zeros(len(src), bool) if null is None else np.asarray(null)
    return CorrespondenceSet(src, tgt, null, name, name)


def test_gather_counts_and_excludes_nulls():
    rng = np.random.default_rng(4)
    a = _set("a", rng.uniform(0, 100, (30, 3)))
    assert len(gather_control_points([a])) == 30
    null = np.zeros(20, bool)
    null[::3] = True
    b = _set("b", rng.uniform(200, 300, (20, 3)), null)
    cps = gather_control_points([a, b])
    assert len(cps) == 30 + 20 - null.sum()
    assert cps.per_structure_counts == {"a": 30, "b": int((~null).sum())}
    nulls = b.sources[null]
    assert cKDTree(cps.sources).query(nulls)[0].min() > 0


def test_gather_dedupes_keep_first():
    src = np.array([[0, 0, 0], [0.3, 0, 0], [5, 0, 0], [5.2, 0, 0], [9, 9, 9.0]])
    cps = gather_control_points([_set("a", src[:3]), _set("b", src[3:])], min_spacing=1.0)
    assert np.array_equal(cps.sources, src[[0, 2, 4]])
    assert cps.per_structure_counts == {"a": 2, "b": 1}
    assert min(cKDTree(cps.sources).query(cps.sources, k=2)[0][:, 1]) >= 0.5


def test_gather_errors():
    with pytest.raises(ContractError):
        gather_control_points([])
    with pytest.raises(DegenerateInputError):
        gather_control_points([_set("a", np.eye(3), [True, True, True])])


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    sets = [_set("parotid_l", rng.normal(size=(6, 3)), [0, 1, 0, 0, 1, 0]), _set("bone", rng.normal(size=(3, 3)))]
    write_correspondences(sets, tmp_path / "c.csv")
    header = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert header == "structure,src_x,src_y,src_z,tgt_x,tgt_y,tgt_z,is_null"
    back = read_correspondences(tmp_path / "c.csv")
    assert [b.source_structure for b in back] == ["parotid_l", "bone"]
    for a, b in zip(sets, back):
        assert np.array_equal(a.sources, b.sources) and np.array_equal(a.targets, b.targets)
        assert np.array_equal(a.is_null, b.is_null)
    (tmp_path / "bad.csv").write_text("structure,x\nfoo,1\n")
    with pytest.raises(FormatError):
        read_correspondences(tmp_path / "bad.csv")
