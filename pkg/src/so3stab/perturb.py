"""Rotation diffeomorphisms on the equiangular grid.

A :class:`DiffeoField` stores per-node angle displacements ``(tau_theta,
tau_phi)``; the perturbed point is ``tau o u = (theta + tau_theta, phi +
tau_phi)``.  Its local rotation at ``u`` is
``r_{tau o u} o r_u^{-1}`` with ``r_v`` the shortest-arc rotation from the
north pole to ``v``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sphere import (
    EquiangularGrid,
    SphericalSignal,
    angles_to_xyz,
    encode_signal,
    decode_signal,
    atomic_write_bytes,
    sample,
    xyz_to_angles,
)
from .so3 import (
    Rotation,
    quat_angle,
    quat_conj,
    quat_from_euler,
    quat_from_rotvec,
    quat_mul,
    quat_to_matrix,
    shortest_arc_quats,
)

DEG = math.pi / 180.0


class RescaleError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DiffeoField:
    grid: EquiangularGrid
    tau_theta: np.ndarray
    tau_phi: np.ndarray

    def __post_init__(self):
        tt = np.array(self.tau_theta, dtype=float)
        tp = np.array(self.tau_phi, dtype=float)
        for name, a in (("tau_theta", tt), ("tau_phi", tp)):
            if a.shape != self.grid.shape:
                raise ValueError(f"{name} has shape {a.shape}, grid is {self.grid.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite entries")
            a.setflags(write=False)
        object.__setattr__(self, "tau_theta", tt)
        object.__setattr__(self, "tau_phi", tp)

    @classmethod
    def zero(cls, grid: EquiangularGrid) -> "DiffeoField":
        return cls(grid, np.zeros(grid.shape), np.zeros(grid.shape))

    def scaled(self, c: float) -> "DiffeoField":
        return DiffeoField(self.grid, c * self.tau_theta, c * self.tau_phi)

    def targets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Target angles and a mask of nodes whose polar angle was clamped."""
        th, ph = self.grid.mesh()
        t = th + self.tau_theta
        clamped = (t < 0.0) | (t > math.pi)
        return np.clip(t, 0.0, math.pi), np.mod(ph + self.tau_phi, 2 * math.pi), clamped

    def target_xyz(self) -> np.ndarray:
        t, p, _ = self.targets()
        return angles_to_xyz(t, p)

    def as_signal(self) -> SphericalSignal:
        return SphericalSignal(self.grid, np.stack([self.tau_theta, self.tau_phi]))

    @classmethod
    def from_signal(cls, x: SphericalSignal) -> "DiffeoField":
        if x.n_features != 2:
            raise ValueError(f"a displacement field has 2 channels, got {x.n_features}")
        return cls(x.grid, x.values[0], x.values[1])


def write_field(t: DiffeoField, path) -> None:
    atomic_write_bytes(path, encode_signal(t.as_signal()))


def read_field(path) -> DiffeoField:
    with open(path, "rb") as fh:
        return DiffeoField.from_signal(decode_signal(fh.read()))


def rotation_field(grid: EquiangularGrid, r: Rotation) -> DiffeoField:
    """The field whose target points are ``r o u``."""
    th, ph = grid.mesh()
    t2, p2 = xyz_to_angles(grid.xyz() @ r.matrix.T)
    return DiffeoField(grid, t2 - th, _wrap_pi(p2 - ph))


def _wrap_pi(a):
    return np.mod(a + math.pi, 2 * math.pi) - math.pi


def apply_diffeo(x: SphericalSignal, t: DiffeoField) -> SphericalSignal:
    """``x_tau(u) = x(tau o u)`` on the grid."""
    if x.grid != t.grid:
        raise ValueError(f"signal grid {x.grid} differs from field grid {t.grid}")
    if not (np.any(t.tau_theta) or np.any(t.tau_phi)):
        return x.with_values(x.values)
    th, ph, _ = t.targets()
    return x.with_values(sample(x, th, ph))


# ---------------------------------------------------------------------------
# sizes


def _local_quats(grid: EquiangularGrid, target_xyz) -> np.ndarray:
    qu = shortest_arc_quats(grid.xyz())
    qt = shortest_arc_quats(target_xyz)
    return quat_mul(qt, quat_conj(qu))


def local_rotation(t: DiffeoField, i: int, j: int) -> Rotation:
    """``r_{tau o u} o r_u^{-1}`` at grid node (i, j)."""
    u = t.grid.xyz()[i, j]
    v = t.target_xyz()[i, j]
    q = quat_mul(shortest_arc_quats(v), quat_conj(shortest_arc_quats(u)))
    return Rotation(tuple(q))


def local_rotation_angles(t: DiffeoField) -> np.ndarray:
    return quat_angle(_local_quats(t.grid, t.target_xyz()))


def tau_norm(t: DiffeoField) -> float:
    """Largest local rotation angle over the grid."""
    return float(np.max(local_rotation_angles(t)))


def _grad_norms(grid: EquiangularGrid, tt, tp) -> np.ndarray:
    """max(|d tau_theta / d theta|, |d tau_phi / d phi|) over the last two axes."""
    if grid.n_theta > 1:
        dth = np.gradient(tt, grid.dtheta, axis=-2)
    else:
        dth = np.zeros_like(tt)
    dph = (np.roll(tp, -1, axis=-1) - np.roll(tp, 1, axis=-1)) / (2.0 * grid.dphi)
    return np.maximum(np.abs(dth).max(axis=(-2, -1)), np.abs(dph).max(axis=(-2, -1)))


def tau_grad_norm(t: DiffeoField) -> float:
    """Central differences (one-sided at the first/last rows, wrapping in phi)."""
    return float(_grad_norms(t.grid, t.tau_theta, t.tau_phi))


def _composite_sizes(grid: EquiangularGrid, targets, quats) -> tuple[np.ndarray, np.ndarray]:
    """Sizes of the fields u -> r^-1 (tau o u) for a stack of rotations r."""
    m = quat_to_matrix(quat_conj(quats))  # r^-1
    pts = np.matmul(targets.reshape(-1, 3), np.swapaxes(m, -1, -2)).reshape(m.shape[:-2] + targets.shape)
    th, ph = grid.mesh()
    t2, p2 = xyz_to_angles(pts)
    grads = _grad_norms(grid, t2 - th, _wrap_pi(p2 - ph))
    ang = quat_angle(_local_quats(grid, pts))
    return ang.max(axis=(-2, -1)), grads


@dataclass(frozen=True)
class ModuloRotationSize:
    tau_norm: float
    tau_grad_norm: float
    rotation: Rotation

    @property
    def objective(self) -> float:
        return max(self.tau_norm, self.tau_grad_norm)


def _euler_grid_quats(n_phi: int, n_theta: int, n_rho: int) -> np.ndarray:
    """Lexicographic (phi, theta, rho) grid of rotations as quaternions."""
    ph = np.arange(n_phi) * 2 * math.pi / n_phi
    th = (np.arange(n_theta) + 0.5) * math.pi / n_theta
    rh = np.arange(n_rho) * 2 * math.pi / n_rho
    P, T, R = np.meshgrid(ph, th, rh, indexing="ij")
    return quat_from_euler(P, T, R).reshape(-1, 4)


def _stencil(h: float) -> np.ndarray:
    s = np.array([-h, 0.0, h])
    return np.stack(np.meshgrid(s, s, s, indexing="ij"), axis=-1).reshape(-1, 3)


def procrustes_rotation(t: DiffeoField) -> Rotation:
    """Least-squares rotation taking grid points to their targets (Kabsch)."""
    u = t.grid.xyz().reshape(-1, 3)
    v = t.target_xyz().reshape(-1, 3)
    U, _, Vt = np.linalg.svd(v.T @ u)
    d = np.sign(np.linalg.det(U @ Vt))
    m = U @ np.diag([1.0, 1.0, d]) @ Vt
    return Rotation.from_matrix(m)


def size_modulo_rotations(
    t: DiffeoField,
    coarse: int = 16,
    min_step: float = 1e-7,
    max_iter: int = 400,
    chunk: int = 256,
) -> ModuloRotationSize:
    """Search for the rotation closest to ``t`` and measure what is left.

    Candidates: identity, the Procrustes fit of targets to grid points and a
    ``coarse``^3 ZYZ grid.  The best one seeds a pattern search over a 3x3x3
    rotation-vector stencil whose step halves whenever the centre stays best.
    Only candidates whose two sizes both stay within those of the unmodified
    field are admissible, so the returned sizes never exceed
    ``(tau_norm(t), tau_grad_norm(t))``.  The result is an upper bound on the
    true infimum.
    """
    grid = t.grid
    targets = t.target_xyz()
    n0 = tau_norm(t)
    g0 = tau_grad_norm(t)
    tol = 1e-12

    def evaluate(quats):
        ns, gs = [], []
        for start in range(0, len(quats), chunk):
            a, b = _composite_sizes(grid, targets, quats[start : start + chunk])
            ns.append(a)
            gs.append(b)
        ns, gs = np.concatenate(ns), np.concatenate(gs)
        obj = np.maximum(ns, gs)
        obj = np.where((ns <= n0 + tol) & (gs <= g0 + tol), obj, np.inf)
        return ns, gs, obj

    best_q = np.array([1.0, 0.0, 0.0, 0.0])
    best = (n0, g0, max(n0, g0))
    if best[2] == 0.0:
        return ModuloRotationSize(n0, g0, Rotation.identity())

    cand = np.concatenate([procrustes_rotation(t).q[None], _euler_grid_quats(coarse, coarse, coarse)])
    ns, gs, obj = evaluate(cand)
    k = int(np.argmin(obj))
    if obj[k] < best[2]:
        best_q, best = cand[k], (ns[k], gs[k], obj[k])

    h = math.pi / coarse
    for _ in range(max_iter):
        if h < min_step:
            break
        cand = quat_mul(best_q, quat_from_rotvec(_stencil(h)))
        ns, gs, obj = evaluate(cand)
        k = int(np.argmin(obj))
        if obj[k] < best[2]:
            best_q, best = cand[k], (ns[k], gs[k], obj[k])
        else:
            h *= 0.5
    return ModuloRotationSize(float(best[0]), float(best[1]), Rotation(tuple(best_q)))


# ---------------------------------------------------------------------------
# generators


def _bumps(rng: np.random.Generator, xyz: np.ndarray, n: int) -> np.ndarray:
    c = rng.standard_normal((n, 3))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    s = rng.uniform(0.4, 0.8, size=n)
    a = rng.standard_normal(n)
    dots = xyz @ c.T
    return np.exp((dots - 1.0) / s**2) @ a


def smooth_base_field(grid: EquiangularGrid, seed) -> DiffeoField:
    """Unscaled random field: up to four Gaussian bumps per channel.

    The polar channel is tapered by sin(theta) so targets never cross a pole
    once the field is scaled below 1.
    """
    rng = np.random.default_rng(seed)
    xyz = grid.xyz()
    th, _ = grid.mesh()
    n_t, n_p = rng.integers(1, 5, size=2)
    tt = np.sin(th) * _bumps(rng, xyz, int(n_t))
    tp = _bumps(rng, xyz, int(n_p))
    peak = max(np.abs(tt).max(), np.abs(tp).max())
    if peak == 0.0:
        raise RescaleError("degenerate random field")
    return DiffeoField(grid, tt / peak, tp / peak)


def make_smooth_diffeo(eps: float, seed, grid: EquiangularGrid | None = None) -> DiffeoField:
    """Random smooth field scaled so that tau_norm <= eps and tau_grad_norm <= eps.

    The field is ``(eps / K) * base`` with one constant K per seed, taken at
    log-spaced probes across the admissible range, so fields for different eps are
    exact multiples of each other.  tau_norm is not linear in the scale, so
    the result is re-checked and shrunk further only if a probe missed the
    worst case.
    """
    if not 0.0 < eps <= 0.5:
        raise ValueError(f"eps must lie in (0, 0.5], got {eps}")
    grid = grid or EquiangularGrid(32, 32)
    base = smooth_base_field(grid, seed)
    g1 = tau_grad_norm(base)
    if g1 == 0.0:
        raise RescaleError("random field has zero gradient")
    # worst ratio tau_norm / scale over the admissible range, probed at both ends
    probes = np.geomspace(1e-4, 0.5, 24) / g1
    K = max([g1] + [tau_norm(base.scaled(c)) / c for c in probes])
    K *= 1.0 + 1e-9  # headroom: keeps both checks strict after rounding
    t = base.scaled(eps / K)
    for _ in range(60):
        n = tau_norm(t)
        if n <= eps:
            break
        t = t.scaled(eps / n * (1.0 - 1e-9))
    if not (tau_norm(t) <= eps and tau_grad_norm(t) <= eps):
        raise RescaleError(f"could not rescale seed {seed} below eps={eps}")
    return t


@dataclass(frozen=True)
class TypeFourOptions:
    """Knobs for the block perturbation: block length, random block phase per
    latitude, random direction per block."""

    block: int = 3
    random_offset: bool = True
    random_sign: bool = True


def make_type(k: int, seed, grid: EquiangularGrid | None = None, options: TypeFourOptions | None = None) -> DiffeoField:
    """Latitude-wise azimuthal perturbations of four increasing severities.

    1: every other azimuth sample shifted by U[-3, 3] degrees
    2: every other sample by U[-6, 6] degrees
    3: every sample by U[-3, 3] degrees
    4: blocks of consecutive samples; the second sample's value moves onto
       the third, the one between is interpolated, max shift one grid step
    """
    grid = grid or EquiangularGrid(64, 64)
    rng = np.random.default_rng(seed)
    nt, nphi = grid.shape
    tp = np.zeros(grid.shape)
    if k in (1, 2):
        amp = 3.0 if k == 1 else 6.0
        cols = np.arange(0, nphi, 2)
        tp[:, cols] = rng.uniform(-amp, amp, size=(nt, len(cols))) * DEG
    elif k == 3:
        tp[:] = rng.uniform(-3.0, 3.0, size=grid.shape) * DEG
    elif k == 4:
        opt = options or TypeFourOptions()
        b = opt.block
        if b < 2:
            raise ValueError("block length must be at least 2")
        # read positions inside a block: first stays, last reads one step back
        ramp = -np.arange(b) / (b - 1) * grid.dphi
        for i in range(nt):
            off = int(rng.integers(0, b)) if opt.random_offset else 0
            for blk in range(nphi // b):
                sign = 1.0 if (not opt.random_sign or rng.random() < 0.5) else -1.0
                idx = (off + blk * b + np.arange(b)) % nphi
                tp[i, idx] = ramp if sign > 0 else ramp[::-1] * -1.0
    else:
        raise ValueError(f"unknown diffeomorphism type {k}")
    return DiffeoField(grid, np.zeros(grid.shape), tp)
