"""Meshes to spherical distance signals, plus synthetic test signals."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .sphere import EquiangularGrid, SphericalSignal

PARALLEL_EPS = 1e-9
DIAG_SCHEMA = "ingest_diag_v1"


class MeshFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonStarShapedWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (M, 3) int
    filtered_faces: int = 0

    @classmethod
    def build(cls, vertices, faces) -> "TriMesh":
        """Validate indices and drop zero-area triangles (count kept)."""
        v = np.asarray(vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(faces, dtype=np.intp).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if f.size:
            area2 = np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
            keep = area2 > 1e-14 * max(1.0, float(np.abs(v).max()) ** 2)
        else:
            keep = np.zeros(0, dtype=bool)
        return cls(v, f[keep], int((~keep).sum()))

    def transformed(self, matrix) -> "TriMesh":
        return TriMesh(self.vertices @ np.asarray(matrix, dtype=float).T, self.faces, self.filtered_faces)

    def scaled(self, s: float) -> "TriMesh":
        return TriMesh(self.vertices * s, self.faces, self.filtered_faces)


def load_off(path) -> TriMesh:
    """ASCII OFF reader.  Polygons are fan-triangulated; errors name the line."""
    with open(path) as fh:
        lines = [(n, ln.split("#", 1)[0].split()) for n, ln in enumerate(fh, start=1)]
    lines = [(n, toks) for n, toks in lines if toks]
    if not lines:
        raise MeshFormatError(1, "empty file")
    n, toks = lines[0]
    if not toks[0].upper().endswith("OFF"):
        raise MeshFormatError(n, f"expected OFF header, found {toks[0]!r}")
    rest = toks[1:]
    pos = 1
    if not rest:
        if len(lines) < 2:
            raise MeshFormatError(n, "missing counts line")
        n, rest = lines[1]
        pos = 2
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (IndexError, ValueError):
        raise MeshFormatError(n, "counts line must start with vertex and face counts") from None
    if nv < 0 or nf < 0:
        raise MeshFormatError(n, "negative counts")

    body = lines[pos:]
    if len(body) < nv + nf:
        last = body[-1][0] if body else n
        raise MeshFormatError(last, f"expected {nv} vertices and {nf} faces, file has {len(body)} data lines")

    verts = np.empty((nv, 3))
    for k in range(nv):
        ln, t = body[k]
        if len(t) < 3:
            raise MeshFormatError(ln, "vertex needs 3 coordinates")
        try:
            verts[k] = [float(c) for c in t[:3]]
        except ValueError:
            raise MeshFormatError(ln, "non-numeric vertex coordinate") from None

    tris = []
    for k in range(nf):
        ln, t = body[nv + k]
        try:
            cnt = int(t[0])
            idx = [int(c) for c in t[1 : 1 + cnt]]
        except ValueError:
            raise MeshFormatError(ln, "non-integer face entry") from None
        if cnt < 3 or len(idx) != cnt:
            raise MeshFormatError(ln, f"face declares {cnt} vertices, lists {len(idx)}")
        if min(idx) < 0 or max(idx) >= nv:
            raise MeshFormatError(ln, "face index out of range")
        tris.extend((idx[0], idx[m], idx[m + 1]) for m in range(1, cnt - 1))
    if len(body) > nv + nf:
        # trailing data is almost always a wrong vertex count
        raise MeshFormatError(body[nv + nf][0], f"unexpected data after {nv} vertices and {nf} faces")
    return TriMesh.build(verts, np.array(tris, dtype=np.intp).reshape(-1, 3))


# ---------------------------------------------------------------------------
# shapes


def tetrahedron() -> TriMesh:
    """Regular tetrahedron with circumradius 1, centred at the origin."""
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / math.sqrt(3.0)
    f = [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]
    return TriMesh.build(v, f)


def cube(half: float = 1.0) -> TriMesh:
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float) * half
    quads = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]]
    f = [(q[0], q[m], q[m + 1]) for q in quads for m in (1, 2)]
    return TriMesh.build(v, f)


def icosphere(subdivisions: int = 3) -> TriMesh:
    p = (1.0 + math.sqrt(5.0)) / 2.0
    v = [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p],
         [0, -1, -p], [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(a, dtype=float) / np.linalg.norm(a) for a in v]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return TriMesh.build(np.array(verts), f)


# ---------------------------------------------------------------------------
# ray casting


@dataclass
class CastDiagnostics:
    n_rays: int = 0
    n_hit: int = 0
    n_missed: int = 0
    parallel_rejections: int = 0
    filtered_faces: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema": DIAG_SCHEMA,
            "n_rays": self.n_rays,
            "n_hit": self.n_hit,
            "n_missed": self.n_missed,
            "parallel_rejections": self.parallel_rejections,
            "filtered_faces": self.filtered_faces,
            "warnings": list(self.warnings),
        }


def cast_rays(mesh: TriMesh, center, directions, chunk: int = 512) -> tuple[np.ndarray, CastDiagnostics]:
    """Farthest hit distance along each unit direction (0 where nothing is hit).

    Möller-Trumbore per (ray, triangle) pair, vectorised over chunks of rays.
    """
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no faces")
    o = np.asarray(center, dtype=float)
    dirs = np.asarray(directions, dtype=float).reshape(-1, 3)
    v0 = mesh.vertices[mesh.faces[:, 0]]
    e1 = mesh.vertices[mesh.faces[:, 1]] - v0
    e2 = mesh.vertices[mesh.faces[:, 2]] - v0
    tvec = o - v0  # (M, 3)
    qvec = np.cross(tvec, e1)  # (M, 3)
    out = np.zeros(len(dirs))
    diag = CastDiagnostics(n_rays=len(dirs), filtered_faces=mesh.filtered_faces)
    tol = 1e-12
    for s in range(0, len(dirs), chunk):
        d = dirs[s : s + chunk]
        pvec = np.cross(d[:, None, :], e2[None, :, :])  # (N, M, 3)
        det = np.einsum("mk,nmk->nm", e1, pvec)
        par = np.abs(det) < PARALLEL_EPS
        diag.parallel_rejections += int(par.sum())
        inv = np.where(par, 0.0, 1.0 / np.where(par, 1.0, det))
        u = np.einsum("mk,nmk->nm", tvec, pvec) * inv
        v = (d @ qvec.T) * inv
        t = (e2 * qvec).sum(axis=1)[None, :] * inv
        hit = ~par & (u >= -tol) & (v >= -tol) & (u + v <= 1.0 + tol) & (t > PARALLEL_EPS)
        out[s : s + chunk] = np.where(hit, t, 0.0).max(axis=1)
    missed = out == 0.0
    diag.n_missed = int(missed.sum())
    diag.n_hit = diag.n_rays - diag.n_missed
    if diag.n_missed:
        diag.warnings.append(f"{diag.n_missed} rays missed the mesh; the shape is not star-shaped about the centre")
    return out, diag


def ray_cast_signal(
    mesh: TriMesh, center, grid: EquiangularGrid, return_diagnostics: bool = False
):
    """Spherical signal of farthest-intersection distances from ``center``."""
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no faces")
    c = np.asarray(center, dtype=float)
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    if not np.all((c > lo) & (c < hi)):
        raise ValueError(f"centre {c.tolist()} is not strictly inside the bounding box")
    vals, diag = cast_rays(mesh, c, grid.xyz().reshape(-1, 3))
    for w in diag.warnings:
        warnings.warn(w, NonStarShapedWarning, stacklevel=2)
    sig = SphericalSignal(grid, vals.reshape(grid.shape))
    return (sig, diag) if return_diagnostics else sig


# ---------------------------------------------------------------------------
# synthetic signals


def _tetra_distance(xyz: np.ndarray) -> np.ndarray:
    m = tetrahedron()
    v = m.vertices[m.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    h = np.einsum("mk,mk->m", n, v[:, 0])
    nd = xyz @ n.T
    with np.errstate(divide="ignore"):
        t = np.where(nd > 0.0, h / np.where(nd > 0.0, nd, 1.0), np.inf)
    return t.min(axis=-1)


SYNTH_KINDS = ("constant", "zonal_gaussian", "gaussian_mixture", "tetra_distance")


def synth_signal(kind: str, grid: EquiangularGrid, **params) -> SphericalSignal:
    """Synthetic inputs.

    constant(c=1.0); zonal_gaussian(width=0.5), centred on the north pole;
    gaussian_mixture(n=4, seed=0, features=1), random bumps of width
    0.5 to 1 with a constant offset; tetra_distance, the exact ray-cast
    signal of :func:`tetrahedron`.
    """
    xyz = grid.xyz()
    th, _ = grid.mesh()
    if kind == "constant":
        return SphericalSignal(grid, np.full(grid.shape, float(params.get("c", 1.0))))
    if kind == "zonal_gaussian":
        w = float(params.get("width", 0.5))
        if not w > 0:
            raise ValueError("width must be positive")
        return SphericalSignal(grid, np.exp(-(th**2) / (2 * w * w)))
    if kind == "gaussian_mixture":
        n = int(params.get("n", 4))
        F = int(params.get("features", 1))
        rng = np.random.default_rng(params.get("seed", 0))
        out = np.empty((F,) + grid.shape)
        for f in range(F):
            c = rng.standard_normal((n, 3))
            c /= np.linalg.norm(c, axis=1, keepdims=True)
            s = rng.uniform(0.5, 1.0, size=n)
            a = rng.standard_normal(n)
            out[f] = rng.uniform(0.5, 1.0) + np.exp((xyz @ c.T - 1.0) / s**2) @ a
        return SphericalSignal(grid, out)
    if kind == "tetra_distance":
        return SphericalSignal(grid, _tetra_distance(xyz))
    raise ValueError(f"unknown synthetic signal {kind!r}; choose from {SYNTH_KINDS}")
