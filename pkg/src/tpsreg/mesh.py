"""Surface meshes from binary masks, with smoothing and decimation.

Meshes are plain vertex/face arrays in physical millimetres.  Faces are wound
so the right-hand normals point outward (positive signed volume).
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from skimage import measure

from .errors import ContractError, DegenerateInputError, FormatError
from .segment import Mask

TAUBIN_LAMBDA = 0.5
TAUBIN_MU = -0.53
TAUBIN_ITERATIONS = 10
DECIMATE_TARGET = 3000


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ContractError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


@dataclass(frozen=True)
class MeshDiagnostics:
    euler_characteristic: int
    surface_area: float
    enclosed_volume: float
    watertight: bool


# ---------------------------------------------------------------------------
# basic geometry

def unique_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def face_normals(vertices, faces, normalize=True):
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    n = np.cross(b - a, c - a)
    if normalize:
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.where(lens > 0, lens, 1.0)
    return n


def signed_volume(vertices, faces) -> float:
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def surface_moments(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Area centroid and central second-moment matrix of the surface, integrated per triangle.

    Unlike moments of the vertex cloud these do not depend on how densely
    each region happens to be tessellated.
    """
    if not mesh.n_faces:
        raise DegenerateInputError("surface moments need at least one face")
    tri = mesh.vertices[mesh.faces]
    area = np.linalg.norm(face_normals(mesh.vertices, mesh.faces, normalize=False), axis=1) / 2
    total = area.sum()
    if total <= 0:
        raise DegenerateInputError("surface has zero area")
    centroid = (area @ tri.mean(axis=1)) / total
    tri = tri - centroid
    s = tri.sum(axis=1)
    # exact integral of x x^T over a triangle: A/12 (sum v v^T + s s^T)
    second = np.einsum("f,fki,fkj->ij", area, tri, tri) + np.einsum("f,fi,fj->ij", area, s, s)
    return centroid, second / (12.0 * total)


def is_watertight(faces: np.ndarray) -> bool:
    """Every edge has exactly two incident faces, traversed in opposite directions."""
    if not len(faces):
        return False
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    _, counts = np.unique(und, axis=0, return_counts=True)
    if np.any(counts != 2):
        return False
    # consistent orientation: no directed edge repeated
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    return bool(np.all(dcounts == 1))


def mesh_diagnostics(mesh: TriMesh) -> MeshDiagnostics:
    f = mesh.faces
    v = mesh.vertices
    used = np.unique(f) if len(f) else np.empty(0, dtype=np.int64)
    n_edges = len(unique_edges(f)) if len(f) else 0
    area = float(np.linalg.norm(face_normals(v, f, normalize=False), axis=1).sum() / 2) if len(f) else 0.0
    return MeshDiagnostics(
        euler_characteristic=int(len(used) - n_edges + len(f)),
        surface_area=area,
        enclosed_volume=signed_volume(v, f) if len(f) else 0.0,
        watertight=is_watertight(f),
    )


def clean(mesh: TriMesh, decimals: int = 9) -> TriMesh:
    """Merge coincident vertices, drop degenerate and unreferenced ones."""
    v, f = mesh.vertices, mesh.faces
    if not len(f):
        return mesh
    key = np.round(v, decimals)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    # keep first-seen order for determinism
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    f = rank[inverse.ravel()][f]
    v = v[first[order]]
    ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    f = f[ok]
    used = np.zeros(len(v), dtype=bool)
    used[f.ravel()] = True
    remap = np.cumsum(used) - 1
    return TriMesh(v[used], remap[f], mesh.label)


# ---------------------------------------------------------------------------
# marching cubes

def marching_cubes(mask: Mask, step: int = 1) -> TriMesh:
    """Iso-surface at 0.5 of the 0/1 mask field, in physical coordinates.

    The mask is zero-padded internally so border-touching structures still
    close.  ``step > 1`` samples every ``step``-th voxel (coarser mesh).
    """
    if not mask.bits.any():
        raise DegenerateInputError(f"mask '{mask.label}' is empty")
    if step < 1:
        raise ContractError("step must be >= 1")
    pad = step
    field = np.pad(mask.bits, pad).astype(np.float32)
    spacing = np.asarray(mask.geometry.spacing)
    verts, faces, _, _ = measure.marching_cubes(
        field, level=0.5, spacing=tuple(spacing), step_size=step,
        allow_degenerate=False, method="lewiner")
    verts = verts.astype(np.float64) + np.asarray(mask.geometry.origin) - pad * spacing
    mesh = clean(TriMesh(verts, faces, mask.label))
    if signed_volume(mesh.vertices, mesh.faces) < 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, ::-1], mesh.label)
    return mesh


# ---------------------------------------------------------------------------
# smoothing

def _umbrella_operator(n_vertices: int, faces: np.ndarray) -> sparse.csr_matrix:
    e = unique_edges(faces)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sparse.diags(inv) @ adj


def umbrella_laplacian(mesh: TriMesh) -> np.ndarray:
    """Mean of neighbours minus the vertex, per vertex."""
    w = _umbrella_operator(mesh.n_vertices, mesh.faces)
    lap = w @ mesh.vertices - mesh.vertices
    isolated = np.asarray(w.sum(axis=1)).ravel() == 0
    lap[isolated] = 0.0
    return lap


def vertex_curvature(mesh: TriMesh) -> np.ndarray:
    """Mean-curvature proxy: umbrella magnitude scaled by local edge length squared."""
    lap = umbrella_laplacian(mesh)
    e = unique_edges(mesh.faces)
    lens2 = ((mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]]) ** 2).sum(axis=1)
    acc = np.bincount(e.ravel(), weights=np.repeat(lens2, 2), minlength=mesh.n_vertices)
    cnt = np.bincount(e.ravel(), minlength=mesh.n_vertices)
    mean_l2 = np.divide(acc, cnt, out=np.ones_like(acc), where=cnt > 0)
    return 2.0 * np.linalg.norm(lap, axis=1) / mean_l2


def taubin_smooth(mesh: TriMesh, lam: float = TAUBIN_LAMBDA, mu: float = TAUBIN_MU,
                  iterations: int = TAUBIN_ITERATIONS) -> TriMesh:
    """Taubin lambda/mu smoothing with uniform umbrella weights.

    ``mu = 0`` switches off the inflation step, leaving plain Laplacian
    smoothing (used for comparison only).
    """
    if iterations < 0:
        raise ContractError("iterations must be >= 0")
    if mu != 0 and not (0 < lam < -mu < 1):
        raise ContractError(f"need 0 < lambda < -mu < 1, got lambda={lam}, mu={mu}")
    if mu == 0 and not 0 < lam < 1:
        raise ContractError("need 0 < lambda < 1")
    if iterations == 0 or not len(mesh.faces):
        return mesh
    w = _umbrella_operator(mesh.n_vertices, mesh.faces)
    has_nb = (np.asarray(w.sum(axis=1)).ravel() > 0)[:, None]
    v = mesh.vertices.copy()
    for _ in range(iterations):
        v = v + lam * np.where(has_nb, w @ v - v, 0.0)
        if mu:
            v = v + mu * np.where(has_nb, w @ v - v, 0.0)
    return TriMesh(v, mesh.faces, mesh.label)


# ---------------------------------------------------------------------------
# decimation (quadric error metric edge collapse)

def _face_quadrics(v, f):
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    area2 = np.linalg.norm(n, axis=1)
    unit = n / np.where(area2 > 0, area2, 1.0)[:, None]
    d = -np.einsum("ij,ij->i", unit, v[f[:, 0]])
    p = np.concatenate([unit, d[:, None]], axis=1)
    # area-weighted plane quadrics
    return 0.5 * area2[:, None, None] * p[:, :, None] * p[:, None, :]


def _optimal_points(q, a, b):
    """Batched quadric minimiser per edge, restricted to the well-conditioned
    eigen-directions and anchored at the edge midpoint."""
    mid = 0.5 * (a + b)
    A = q[:, :3, :3]
    rhs = -q[:, :3, 3]
    w, U = np.linalg.eigh(A)
    keep = w > 1e-6 * np.maximum(w[:, -1:], 1e-300)
    r = rhs - np.einsum("nij,nj->ni", A, mid)
    coef = np.einsum("nji,nj->ni", U, r)
    coef = np.where(keep, coef / np.where(keep, w, 1.0), 0.0)
    p = mid + np.einsum("nij,nj->ni", U, coef)
    far = np.linalg.norm(p - mid, axis=1) > 2.0 * np.linalg.norm(b - a, axis=1) + 1e-12
    p[far] = mid[far]
    h = np.concatenate([p, np.ones((len(p), 1))], axis=1)
    cost = np.maximum(np.einsum("ni,nij,nj->n", h, q, h), 0.0)
    return p, cost


def _cross_rows(x, y):
    out = np.empty_like(x)
    out[:, 0] = x[:, 1] * y[:, 2] - x[:, 2] * y[:, 1]
    out[:, 1] = x[:, 2] * y[:, 0] - x[:, 0] * y[:, 2]
    out[:, 2] = x[:, 0] * y[:, 1] - x[:, 1] * y[:, 0]
    return out


def decimate(mesh: TriMesh, target_faces: int = DECIMATE_TARGET) -> TriMesh:
    """Quadric-error edge-collapse decimation down to at most ``target_faces``.

    Collapses that would break manifoldness (link condition), drop a vertex
    below valence 3, or turn any surviving face by more than 90 degrees are
    skipped.  If no valid collapse remains before the target is reached the
    best mesh so far is returned.
    """
    if target_faces < 4:
        raise ContractError("target_faces must be >= 4 (smallest closed surface)")
    if mesh.n_faces <= target_faces:
        return mesh
    v = mesh.vertices.copy()
    f = mesh.faces.copy()
    nv = len(v)
    alive_f = np.ones(len(f), dtype=bool)
    alive_v = np.zeros(nv, dtype=bool)
    alive_v[f.ravel()] = True
    vf: list[set[int]] = [set() for _ in range(nv)]
    for fi, (a, b, c) in enumerate(f.tolist()):
        vf[a].add(fi)
        vf[b].add(fi)
        vf[c].add(fi)
    fq = _face_quadrics(v, f)
    Q = np.zeros((nv, 4, 4))
    for k in range(3):
        np.add.at(Q, f[:, k], fq)
    stamp = np.zeros(nv, dtype=np.int64)

    heap: list = []

    def neighbours(u):
        out = set()
        for fi in vf[u]:
            out.update(f[fi].tolist())
        out.discard(u)
        return out

    def push(edges):
        edges = np.sort(np.asarray(edges, dtype=np.int64).reshape(-1, 2), axis=1)
        ea, eb = edges[:, 0], edges[:, 1]
        pts, costs = _optimal_points(Q[ea] + Q[eb], v[ea], v[eb])
        for (a, b), c, pt in zip(edges.tolist(), costs.tolist(), pts):
            heapq.heappush(heap, (c, a, b, int(stamp[a]), int(stamp[b]), pt))

    push(unique_edges(f))

    n_faces = len(f)
    while n_faces > target_faces and heap:
        cost, a, b, sa, sb, p = heapq.heappop(heap)
        if not (alive_v[a] and alive_v[b]) or stamp[a] != sa or stamp[b] != sb:
            continue
        shared = vf[a] & vf[b]
        if len(shared) != 2 or n_faces - 2 < 4:
            continue
        na, nb = neighbours(a), neighbours(b)
        opposite = set()
        for fi in shared:
            opposite.update(f[fi].tolist())
        opposite -= {a, b}
        if (na & nb) != opposite:
            continue  # link condition
        if any(len(vf[o]) <= 3 for o in opposite):
            continue
        moved = [fi for fi in (vf[a] | vf[b]) if fi not in shared]
        tri = f[moved]
        old_pts = v[tri]
        new_pts = old_pts.copy()
        new_pts[(tri == a) | (tri == b)] = p
        old = _cross_rows(old_pts[:, 1] - old_pts[:, 0], old_pts[:, 2] - old_pts[:, 0])
        new = _cross_rows(new_pts[:, 1] - new_pts[:, 0], new_pts[:, 2] - new_pts[:, 0])
        new_len2 = (new * new).sum(axis=1)
        old_len2 = (old * old).sum(axis=1)
        if np.any(new_len2 <= 1e-24 * np.maximum(old_len2, 1e-300)):
            continue
        if np.any((old * new).sum(axis=1) <= 0):
            continue
        # collapse b into a
        for fi in shared:
            alive_f[fi] = False
            for w in f[fi].tolist():
                vf[w].discard(fi)
        for fi in vf[b]:
            row = f[fi]
            row[row == b] = a
            vf[a].add(fi)
        vf[b] = set()
        alive_v[b] = False
        v[a] = p
        Q[a] += Q[b]
        stamp[a] += 1
        n_faces -= 2
        push([(a, w) for w in sorted(neighbours(a))])

    keep = np.flatnonzero(alive_f)
    f = f[keep]
    used = np.zeros(nv, dtype=bool)
    used[f.ravel()] = True
    remap = np.cumsum(used) - 1
    return TriMesh(v[used], remap[f], mesh.label)


# ---------------------------------------------------------------------------
# conditioning

def condition(mask: Mask, lam: float = TAUBIN_LAMBDA, mu: float = TAUBIN_MU,
              iterations: int = TAUBIN_ITERATIONS, target_faces: int | None = DECIMATE_TARGET,
              max_raw_factor: float | None = 8.0) -> TriMesh:
    """Mask -> marching cubes -> Taubin -> decimation -> cleanup.

    Large masks are meshed with a coarser marching-cubes step so the raw mesh
    holds at most ``max_raw_factor * target_faces`` faces (approximately).
    """
    step = 1
    if target_faces and max_raw_factor:
        # each exposed voxel face yields about two triangles
        b = np.pad(mask.bits, 1)
        exposed = sum(int((b & ~np.roll(b, s, axis=a)).sum()) for a in range(3) for s in (1, -1))
        est = 2 * exposed
        limit = max_raw_factor * target_faces
        if est > limit:
            step = int(np.ceil(np.sqrt(est / limit)))
    m = marching_cubes(mask, step=step)
    m = taubin_smooth(m, lam, mu, iterations)
    if target_faces:
        m = decimate(m, target_faces)
    return clean(m)


# ---------------------------------------------------------------------------
# PLY

def write_ply(mesh: TriMesh, path) -> None:
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment label {mesh.label}" if mesh.label else "comment label",
        f"element vertex {mesh.n_vertices}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces.tolist()]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path, label: str | None = None) -> TriMesh:
    path = Path(path)
    lines = path.read_text(encoding="ascii").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n_v = n_f = None
    file_label = ""
    vprops: list[str] = []
    current = None
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "comment" and len(tok) >= 2 and tok[1] == "label":
            file_label = " ".join(tok[2:])
        elif tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                n_v = int(tok[2])
            elif current == "face":
                n_f = int(tok[2])
        elif tok[0] == "property" and current == "vertex":
            vprops.append(tok[-1])
        elif tok[0] == "end_header":
            break
    if n_v is None or n_f is None or vprops[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: missing vertex/face elements")
    try:
        verts = np.array([[float(t) for t in lines[i + k].split()[:3]] for k in range(n_v)])
        faces = []
        for k in range(n_f):
            tok = lines[i + n_v + k].split()
            if int(tok[0]) != 3:
                raise FormatError(f"{path}: only triangular faces are supported")
            faces.append([int(t) for t in tok[1:4]])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: truncated or malformed body") from exc
    return TriMesh(verts.reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3),
                   label if label is not None else (file_label or path.stem))
