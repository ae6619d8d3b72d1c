"""The rotation group SO(3).

Rotations are stored as unit quaternions ``(w, x, y, z)`` with ``w >= 0``.
Euler angles follow the ZYZ convention ``r = Rz(phi) Ry(theta) Rz(rho)``
(rightmost factor applied first).  ``compose(a, b)`` is ``a after b``.

Besides the scalar :class:`Rotation` type this module keeps a handful of
array helpers (``quat_*``) that act on stacks of quaternions, used by the
convolution and perturbation kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sphere import (
    TWO_PI,
    SphericalPoint,
    SphericalSignal,
    angles_to_xyz,
    from_cartesian,
    sample,
    xyz_to_angles,
)

# ---------------------------------------------------------------------------
# quaternion arrays, shape (..., 4)


def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_angle(q):
    """Rotation angle in [0, pi] of each quaternion."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_from_axis_angle(axis, beta):
    axis = np.asarray(axis, dtype=float)
    beta = np.asarray(beta, dtype=float)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("rotation axis must be nonzero")
    axis = axis / n
    half = 0.5 * beta[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_from_rotvec(v):
    """Quaternion of the rotation ``exp([v]_x)`` (axis v/|v|, angle |v|)."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a with its limit 1/2 at a = 0
    scale = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 0, angle, 1.0), 0.5)
    return np.concatenate([np.cos(half), scale * v], axis=-1)


def quat_from_euler(phi, theta, rho):
    """ZYZ Euler angles to quaternions (broadcasts)."""
    phi, theta, rho = np.broadcast_arrays(
        np.asarray(phi, float), np.asarray(theta, float), np.asarray(rho, float)
    )
    # Rz(a) Ry(b) Rz(c) in closed form
    cb, sb = np.cos(0.5 * theta), np.sin(0.5 * theta)
    s, d = 0.5 * (phi + rho), 0.5 * (phi - rho)
    return np.stack([cb * np.cos(s), -sb * np.sin(d), sb * np.cos(d), cb * np.sin(s)], axis=-1)


def shortest_arc_quats(xyz):
    """Quaternions of the rotations carrying the north pole to each point.

    Axis ``z x u`` normalised, angle ``angle(z, u)``; the antipode uses the
    x-axis.
    """
    u = np.asarray(xyz, dtype=float)
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    cross = np.stack([-u[..., 1], u[..., 0], np.zeros(u.shape[:-1])], axis=-1)
    s = np.linalg.norm(cross, axis=-1)
    angle = np.arctan2(s, u[..., 2])
    degenerate = s < 1e-15
    axis = np.where(
        degenerate[..., None],
        np.array([1.0, 0.0, 0.0]),
        cross / np.where(degenerate, 1.0, s)[..., None],
    )
    angle = np.where(degenerate, np.where(u[..., 2] > 0, 0.0, math.pi), angle)
    return quat_from_axis_angle(axis, angle)


def apply_quats(q, xyz):
    """Rotate points ``xyz`` (..., 3) by quaternions q (..., 4); broadcasts."""
    m = quat_to_matrix(q)
    return np.einsum("...ij,...j->...i", m, np.asarray(xyz, dtype=float))


# ---------------------------------------------------------------------------
# scalar rotation


@dataclass(frozen=True, eq=False)
class Rotation:
    quat: tuple[float, float, float, float]

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.quat, dtype=float))
        object.__setattr__(self, "quat", tuple(float(c) for c in q))

    # construction -----------------------------------------------------
    @classmethod
    def identity(cls) -> "Rotation":
        return cls((1.0, 0.0, 0.0, 0.0))

    @classmethod
    def from_axis_angle(cls, axis, beta: float) -> "Rotation":
        return cls(tuple(quat_from_axis_angle(axis, beta)))

    @classmethod
    def from_euler(cls, phi: float, theta: float, rho: float) -> "Rotation":
        return cls(tuple(quat_from_euler(phi, theta, rho)))

    @classmethod
    def from_rotvec(cls, v) -> "Rotation":
        return cls(tuple(quat_from_rotvec(v)))

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        """Quaternion of a proper orthogonal matrix (largest-pivot branch)."""
        m = np.asarray(m, dtype=float)
        tr = np.trace(m)
        k = int(np.argmax([tr, m[0, 0], m[1, 1], m[2, 2]]))
        if k == 0:
            w = 0.5 * np.sqrt(1.0 + tr)
            q = (w, (m[2, 1] - m[1, 2]) / (4 * w), (m[0, 2] - m[2, 0]) / (4 * w), (m[1, 0] - m[0, 1]) / (4 * w))
        else:
            i, j, l = (k - 1), k % 3, (k + 1) % 3
            v = np.zeros(3)
            v[i] = 0.5 * np.sqrt(1.0 + 2 * m[i, i] - tr)
            v[j] = (m[j, i] + m[i, j]) / (4 * v[i])
            v[l] = (m[l, i] + m[i, l]) / (4 * v[i])
            q = ((m[l, j] - m[j, l]) / (4 * v[i]), *v)
        return cls(q)

    @classmethod
    def about_z(cls, beta: float) -> "Rotation":
        return cls.from_axis_angle([0.0, 0.0, 1.0], beta)

    # group operations -------------------------------------------------
    def compose(self, other: "Rotation") -> "Rotation":
        """``self o other``: apply ``other`` first."""
        return Rotation(tuple(quat_mul(self.q, other.q)))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return self.compose(other)

    def inverse(self) -> "Rotation":
        return Rotation(tuple(quat_conj(self.q)))

    # views --------------------------------------------------------------
    @property
    def q(self) -> np.ndarray:
        return np.array(self.quat)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def angle(self) -> float:
        return float(quat_angle(self.q))

    def axis_angle(self) -> tuple[np.ndarray, float]:
        """Unit axis and angle in [0, pi]; the identity reports axis +z."""
        v = self.q[1:]
        s = np.linalg.norm(v)
        if s < 1e-300:
            return np.array([0.0, 0.0, 1.0]), 0.0
        return v / s, self.angle

    def euler_angles(self) -> tuple[float, float, float]:
        """ZYZ angles ``(phi, theta, rho)`` in [0,2pi) x [0,pi] x [0,2pi).

        At gimbal lock (theta = 0 or pi) rho is set to 0.
        """
        m = self.matrix
        st = math.hypot(m[2, 0], m[2, 1])
        theta = math.atan2(st, m[2, 2])
        if st < 1e-12:
            rho = 0.0
            if m[2, 2] > 0:
                theta = 0.0
                phi = math.atan2(m[1, 0], m[0, 0])
            else:
                theta = math.pi
                phi = math.atan2(-m[0, 1], m[1, 1])
        else:
            phi = math.atan2(m[1, 2], m[0, 2])
            rho = math.atan2(m[2, 1], -m[2, 0])
        return (_wrap(phi), theta, _wrap(rho))

    def distance(self, other: "Rotation") -> float:
        """Quaternion distance ``min(|q1 - q2|, |q1 + q2|)``."""
        a, b = self.q, other.q
        return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))

    # action -------------------------------------------------------------
    def apply_xyz(self, xyz) -> np.ndarray:
        return np.asarray(xyz, dtype=float) @ self.matrix.T

    def apply(self, p: SphericalPoint) -> SphericalPoint:
        return from_cartesian(self.matrix @ p.to_cartesian())

    def to_json(self) -> dict:
        axis, beta = self.axis_angle()
        return {
            "axis": [float(c) for c in axis],
            "beta": float(beta),
            "euler_zyz": list(self.euler_angles()),
        }

    def __repr__(self) -> str:
        phi, theta, rho = self.euler_angles()
        return f"Rotation(euler_zyz=({phi:.6g}, {theta:.6g}, {rho:.6g}))"


def _wrap(a: float) -> float:
    a = math.fmod(a, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    return 0.0 if a >= TWO_PI else a


def identity() -> Rotation:
    return Rotation.identity()


def compose(r1: Rotation, r2: Rotation) -> Rotation:
    return r1.compose(r2)


def inverse(r: Rotation) -> Rotation:
    return r.inverse()


def from_axis_angle(axis, beta: float) -> Rotation:
    return Rotation.from_axis_angle(axis, beta)


def from_euler(phi: float, theta: float, rho: float) -> Rotation:
    return Rotation.from_euler(phi, theta, rho)


def apply(r: Rotation, p: SphericalPoint) -> SphericalPoint:
    return r.apply(p)


def shortest_arc(u: SphericalPoint) -> Rotation:
    """Rotation carrying the north pole to ``u`` along the great circle."""
    return Rotation(tuple(shortest_arc_quats(u.to_cartesian())))


def random_rotations(n: int, seed) -> list[Rotation]:
    """Uniformly distributed rotations from normalised Gaussian 4-vectors."""
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, 4))
    return [Rotation(tuple(row)) for row in q]


def azimuthal_grid_shift(r: Rotation, dphi: float) -> int | None:
    """Index shift k if ``r`` is a z-rotation by k*dphi, else None."""
    m = r.matrix
    if abs(m[2, 2] - 1.0) > 1e-14:
        return None
    a = math.atan2(m[1, 0], m[0, 0])
    k = a / dphi
    kr = round(k)
    if abs(k - kr) > 1e-9:
        return None
    return int(kr)


def rotate_signal(x: SphericalSignal, r: Rotation) -> SphericalSignal:
    """``x_r(u) = x(r o u)`` resampled on the same grid.

    Azimuthal rotations by whole grid steps are exact index rolls; anything
    else goes through bilinear interpolation.
    """
    k = azimuthal_grid_shift(r, x.grid.dphi)
    if k is not None:
        return x.with_values(np.roll(x.values, -k, axis=2))
    th, ph = xyz_to_angles(x.grid.xyz() @ r.matrix.T)
    return x.with_values(sample(x, th, ph))


def rotate_signal_batch(x: SphericalSignal, quats) -> np.ndarray:
    """Values of ``rotate_signal(x, r)`` for a stack of quaternions.

    Returns shape (B, F, n_theta, n_phi).  Always interpolates.
    """
    m = quat_to_matrix(np.asarray(quats, dtype=float))
    g = x.grid
    pts = np.matmul(g.xyz().reshape(-1, 3), np.swapaxes(m, -1, -2)).reshape(m.shape[:-2] + g.shape + (3,))
    th, ph = xyz_to_angles(pts)
    out = sample(x, th, ph)  # (F, B, nt, np)
    return np.moveaxis(out, 0, 1)


# ---------------------------------------------------------------------------
# Haar quadrature


@dataclass(frozen=True)
class SO3Quadrature:
    """Product rule for the normalised Haar measure in ZYZ coordinates.

    theta nodes are midpoints ``(i + 1/2) pi / n_theta``; the periodic phi
    and rho nodes are ``j 2pi / n``.  ``weights[i, j, k]`` is proportional to
    ``sin(theta_i)`` and the whole array sums to one.
    """

    n_theta: int
    n_phi: int
    n_rho: int

    def __post_init__(self):
        for name in ("n_theta", "n_phi", "n_rho"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be at least 2")

    @property
    def thetas(self) -> np.ndarray:
        return (np.arange(self.n_theta) + 0.5) * math.pi / self.n_theta

    @property
    def phis(self) -> np.ndarray:
        return np.arange(self.n_phi) * TWO_PI / self.n_phi

    @property
    def rhos(self) -> np.ndarray:
        return np.arange(self.n_rho) * TWO_PI / self.n_rho

    @property
    def theta_weights(self) -> np.ndarray:
        s = np.sin(self.thetas)
        return s / s.sum()

    @property
    def weights(self) -> np.ndarray:
        w = self.theta_weights / (self.n_phi * self.n_rho)
        return np.broadcast_to(w[:, None, None], (self.n_theta, self.n_phi, self.n_rho)).copy()

    def euler_nodes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(phi, theta, rho) arrays of shape (n_theta, n_phi, n_rho)."""
        th, ph, rh = np.meshgrid(self.thetas, self.phis, self.rhos, indexing="ij")
        return ph, th, rh

    def quats(self) -> np.ndarray:
        ph, th, rh = self.euler_nodes()
        return quat_from_euler(ph, th, rh)

    def nodes(self) -> list[tuple[Rotation, float]]:
        q = self.quats().reshape(-1, 4)
        w = self.weights.reshape(-1)
        return [(Rotation(tuple(qi)), float(wi)) for qi, wi in zip(q, w)]

    def integrate(self, fn) -> float:
        """Approximate the Haar integral of ``fn(phi, theta, rho)``."""
        ph, th, rh = self.euler_nodes()
        return float(np.sum(self.weights * fn(ph, th, rh)))

    def matches(self, grid) -> bool:
        """True when the (theta, phi) nodes coincide with the grid samples."""
        return self.n_theta == grid.n_theta and self.n_phi == grid.n_phi


def haar_quadrature(n_theta_r: int, n_phi_r: int, n_rho_r: int) -> SO3Quadrature:
    return SO3Quadrature(n_theta_r, n_phi_r, n_rho_r)


def default_quadrature(grid) -> SO3Quadrature:
    return SO3Quadrature(grid.n_theta, grid.n_phi, max(16, grid.n_theta // 2))


__all__ = [
    "Rotation",
    "SO3Quadrature",
    "angles_to_xyz",
    "apply",
    "compose",
    "default_quadrature",
    "from_axis_angle",
    "from_euler",
    "haar_quadrature",
    "identity",
    "inverse",
    "random_rotations",
    "rotate_signal",
    "shortest_arc",
]
