"""Spherical coordinates, equiangular grids and sampled spherical signals.

A point on the unit sphere is written ``(theta, phi)`` with ``theta`` the
polar angle measured from +z and ``phi`` the azimuth in the xy-plane.  At the
two poles the azimuth is set to zero.

Signals live on a cell-centred equiangular grid::

    theta_i = (i + 1/2) * pi / n_theta      i = 0 .. n_theta - 1
    phi_j   = j * 2 pi / n_phi              j = 0 .. n_phi - 1

so no sample sits on a pole and every cell has the same ``dtheta * dphi``
area in angle space.
"""

from __future__ import annotations

import csv
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi

# fractional grid indices closer than this to an integer are snapped to it
_SNAP = 1e-9


class SignalFormatError(ValueError):
    """Base class for SSIG1 decoding failures."""


class BadMagicError(SignalFormatError):
    pass


class TruncatedPayloadError(SignalFormatError):
    pass


class DimensionOverflowError(SignalFormatError):
    pass


# ---------------------------------------------------------------------------
# points


def angles_to_xyz(theta, phi):
    """Unit vectors ``[sin t cos p, sin t sin p, cos t]``; broadcasts."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def xyz_to_angles(xyz):
    """Inverse of :func:`angles_to_xyz` for arrays of shape ``(..., 3)``.

    Vectors are renormalised.  Zero vectors raise ``ValueError``.  Points on
    the z-axis get ``phi = 0``.
    """
    v = np.asarray(xyz, dtype=float)
    r = np.linalg.norm(v, axis=-1)
    if np.any(r == 0.0):
        raise ValueError("zero vector has no direction on the sphere")
    rho = np.hypot(v[..., 0], v[..., 1])
    theta = np.arctan2(rho, v[..., 2])
    phi = np.arctan2(v[..., 1], v[..., 0])
    phi = np.where(phi < 0.0, phi + TWO_PI, phi)
    phi = np.where(phi >= TWO_PI, phi - TWO_PI, phi)
    phi = np.where(rho == 0.0, 0.0, phi)
    return theta, phi


@dataclass(frozen=True)
class SphericalPoint:
    theta: float
    phi: float

    @classmethod
    def canonical(cls, theta: float, phi: float) -> "SphericalPoint":
        if not 0.0 <= theta <= math.pi:
            raise ValueError(f"theta={theta} outside [0, pi]")
        phi = math.fmod(phi, TWO_PI)
        if phi < 0.0:
            phi += TWO_PI
        if phi >= TWO_PI:
            phi = 0.0
        if theta == 0.0 or theta == math.pi:
            phi = 0.0
        return cls(float(theta), float(phi))

    def to_cartesian(self) -> np.ndarray:
        return angles_to_xyz(self.theta, self.phi)


def to_cartesian(p: SphericalPoint) -> np.ndarray:
    return p.to_cartesian()


def from_cartesian(v) -> SphericalPoint:
    v = np.asarray(v, dtype=float)
    if v.shape != (3,):
        raise ValueError("expected a 3-vector")
    theta, phi = xyz_to_angles(v)
    return SphericalPoint.canonical(float(theta), float(phi))


NORTH = SphericalPoint(0.0, 0.0)


# ---------------------------------------------------------------------------
# grid and signal


@dataclass(frozen=True)
class EquiangularGrid:
    n_theta: int
    n_phi: int

    def __post_init__(self):
        if int(self.n_theta) != self.n_theta or self.n_theta < 1:
            raise ValueError(f"n_theta must be a positive integer, got {self.n_theta}")
        if int(self.n_phi) != self.n_phi or self.n_phi < 1:
            raise ValueError(f"n_phi must be a positive integer, got {self.n_phi}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_theta, self.n_phi)

    @property
    def dtheta(self) -> float:
        return math.pi / self.n_theta

    @property
    def dphi(self) -> float:
        return TWO_PI / self.n_phi

    @property
    def theta(self) -> np.ndarray:
        return (np.arange(self.n_theta) + 0.5) * self.dtheta

    @property
    def phi(self) -> np.ndarray:
        return np.arange(self.n_phi) * self.dphi

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """``(theta, phi)`` arrays of shape ``(n_theta, n_phi)``."""
        return np.meshgrid(self.theta, self.phi, indexing="ij")

    def xyz(self) -> np.ndarray:
        th, ph = self.mesh()
        return angles_to_xyz(th, ph)


@dataclass(frozen=True, eq=False)
class SphericalSignal:
    """F-feature field sampled on ``grid``; ``values`` has shape (F, n_theta, n_phi)."""

    grid: EquiangularGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[1:] != self.grid.shape:
            raise ValueError(
                f"values of shape {np.shape(self.values)} do not fit grid {self.grid.shape}"
            )
        if v.shape[0] < 1:
            raise ValueError("a signal needs at least one feature")
        if not np.all(np.isfinite(v)):
            raise ValueError("signal values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    def feature(self, f: int) -> "SphericalSignal":
        return SphericalSignal(self.grid, self.values[f : f + 1])

    def with_values(self, values) -> "SphericalSignal":
        return SphericalSignal(self.grid, values)

    def __add__(self, other: "SphericalSignal") -> "SphericalSignal":
        _check_same_shape(self, other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "SphericalSignal") -> "SphericalSignal":
        _check_same_shape(self, other)
        return self.with_values(self.values - other.values)

    def __mul__(self, alpha: float) -> "SphericalSignal":
        return self.with_values(alpha * self.values)

    __rmul__ = __mul__


def _check_same_shape(a: SphericalSignal, b: SphericalSignal) -> None:
    if a.grid != b.grid or a.n_features != b.n_features:
        raise ValueError(
            f"signal shapes differ: {a.values.shape} on {a.grid} vs {b.values.shape} on {b.grid}"
        )


def from_function(grid: EquiangularGrid, fn) -> SphericalSignal:
    """Sample ``fn(theta, phi)`` on the grid; ``fn`` may return (F, nt, np)."""
    th, ph = grid.mesh()
    return SphericalSignal(grid, fn(th, ph))


# ---------------------------------------------------------------------------
# interpolation


def _fractional_index(value, step, offset):
    f = value / step - offset
    r = np.rint(f)
    return np.where(np.abs(f - r) < _SNAP, r, f)


def sample(x: SphericalSignal, theta, phi, f: int | None = None) -> np.ndarray:
    """Bilinear interpolation of ``x`` at arbitrary angles.

    Azimuth wraps around.  Polar angles outside the first/last sample rows
    take the boundary row's value (no interpolation across the pole).
    Returns an array of shape ``(F,) + theta.shape``, or ``theta.shape`` when a
    single feature ``f`` is requested.
    """
    grid = x.grid
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    theta, phi = np.broadcast_arrays(theta, phi)
    vals = x.values if f is None else x.values[f : f + 1]

    nt, nphi = grid.n_theta, grid.n_phi
    fi = np.clip(_fractional_index(theta, grid.dtheta, 0.5), 0.0, nt - 1)
    if nt > 1:
        i0 = np.minimum(np.floor(fi).astype(np.intp), nt - 2)
    else:
        i0 = np.zeros(fi.shape, dtype=np.intp)
    wi = fi - i0
    i1 = np.minimum(i0 + 1, nt - 1)

    fj = np.mod(_fractional_index(phi, grid.dphi, 0.0), nphi)
    j0 = np.floor(fj).astype(np.intp)
    wj = fj - j0
    j0 = np.mod(j0, nphi)
    j1 = np.mod(j0 + 1, nphi)

    out = (
        (1.0 - wi) * ((1.0 - wj) * vals[:, i0, j0] + wj * vals[:, i0, j1])
        + wi * ((1.0 - wj) * vals[:, i1, j0] + wj * vals[:, i1, j1])
    )
    return out[0] if f is not None else out


def sample_xyz(x: SphericalSignal, xyz, f: int | None = None) -> np.ndarray:
    theta, phi = xyz_to_angles(xyz)
    return sample(x, theta, phi, f)


# ---------------------------------------------------------------------------
# norm


def feature_norms(x: SphericalSignal) -> np.ndarray:
    """Per-feature normalised norm: sqrt(1/(2 pi^2) * sum x^2 dtheta dphi)."""
    g = x.grid
    cell = g.dtheta * g.dphi / (2.0 * math.pi**2)
    # scale by the peak first so tiny or huge values neither underflow nor overflow
    peak = np.max(np.abs(x.values), axis=(1, 2))
    safe = np.where(peak > 0.0, peak, 1.0)
    r = x.values / safe[:, None, None]
    return peak * np.sqrt(np.sum(r * r, axis=(1, 2)) * cell)


def norm(x: SphericalSignal) -> float:
    """Sum of per-feature norms.  Angle-space measure, no sin(theta) weight."""
    return float(np.sum(feature_norms(x)))


# ---------------------------------------------------------------------------
# SSIG1 container

MAGIC = b"SSIG\x01\x00\x00\x00"
_HEADER = struct.Struct("<III")
MAX_ELEMENTS = 2**32 - 1


def encode_signal(x: SphericalSignal) -> bytes:
    F, nt, nphi = x.values.shape
    head = MAGIC + _HEADER.pack(F, nt, nphi)
    return head + x.values.astype("<f8").tobytes(order="C")


def decode_signal(data: bytes) -> SphericalSignal:
    if len(data) < len(MAGIC):
        raise TruncatedPayloadError(f"file holds {len(data)} bytes, magic needs {len(MAGIC)}")
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {data[:len(MAGIC)]!r}")
    end = len(MAGIC) + _HEADER.size
    if len(data) < end:
        raise TruncatedPayloadError("header truncated")
    F, nt, nphi = _HEADER.unpack_from(data, len(MAGIC))
    count = F * nt * nphi
    if count > MAX_ELEMENTS:
        raise DimensionOverflowError(f"header declares {F}x{nt}x{nphi} = {count} values")
    if count == 0:
        raise SignalFormatError(f"header declares an empty signal {F}x{nt}x{nphi}")
    need = end + 8 * count
    if len(data) < need:
        raise TruncatedPayloadError(f"payload holds {len(data) - end} bytes, expected {8 * count}")
    if len(data) > need:
        raise SignalFormatError(f"{len(data) - need} trailing bytes after payload")
    vals = np.frombuffer(data, dtype="<f8", count=count, offset=end).reshape(F, nt, nphi)
    return SphericalSignal(EquiangularGrid(nt, nphi), vals.astype(np.float64))


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_signal(x: SphericalSignal, path) -> None:
    atomic_write_bytes(path, encode_signal(x))


def read_signal(path) -> SphericalSignal:
    return decode_signal(Path(path).read_bytes())


def write_csv(x: SphericalSignal, path) -> None:
    th, ph = x.grid.theta, x.grid.phi
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["f", "i", "j", "theta", "phi", "value"])
        for f in range(x.n_features):
            for i in range(x.grid.n_theta):
                for j in range(x.grid.n_phi):
                    w.writerow([f, i, j, repr(th[i]), repr(ph[j]), repr(float(x.values[f, i, j]))])
