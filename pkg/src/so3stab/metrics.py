"""Distances, equivariance checks and the stability bound evaluators."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .conv import Filter, conv, lipschitz_constant
from .errors import NumericError
from .perturb import DiffeoField, apply_diffeo, tau_grad_norm, tau_norm
from .scnn import NetworkSpec, forward
from .so3 import (
    Rotation,
    SO3Quadrature,
    azimuthal_grid_shift,
    quat_from_euler,
    quat_from_rotvec,
    quat_mul,
    rotate_signal,
    rotate_signal_batch,
)
from .sphere import SphericalSignal, _check_same_shape, norm

EXACT_TOL = 1e-10


class PreconditionError(ValueError):
    pass


def relative_rmse(a: SphericalSignal, b: SphericalSignal) -> float:
    """Node-wise RMS of ``a - b`` relative to that of the reference ``a``."""
    _check_same_shape(a, b)
    num = float(np.sqrt(np.sum((a.values - b.values) ** 2)))
    den = float(np.sqrt(np.sum(a.values**2)))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


# ---------------------------------------------------------------------------
# rotation distance


def _batch_norms(x: SphericalSignal, ys: np.ndarray) -> np.ndarray:
    """Norms of ``x - y_b`` for a stack (B, F, nt, np), same weighting as :func:`norm`."""
    g = x.grid
    d = x.values[None] - ys
    return np.sqrt(np.sum(d * d, axis=(1, 2, 3)) * g.dtheta * g.dphi / (2 * math.pi**2))


def _stencil(h: float) -> np.ndarray:
    s = np.array([-h, 0.0, h])
    return np.stack(np.meshgrid(s, s, s, indexing="ij"), axis=-1).reshape(-1, 3)


@dataclass(frozen=True)
class DistanceResult:
    distance: float
    rotation: Rotation

    def __iter__(self):  # allows ``d, r = rotation_distance(...)``
        yield self.distance
        yield self.rotation


def rotation_distance(
    x: SphericalSignal,
    y: SphericalSignal,
    coarse: tuple[int, int, int] = (24, 12, 24),
    min_step: float = 1e-6,
    max_iter: int = 200,
    chunk: int = 128,
) -> DistanceResult:
    """Upper bound on ``min_r ||x - y_r||`` and the rotation attaining it.

    Candidates are tried in this order: identity, every exact azimuthal grid
    roll, a ZYZ grid of ``coarse`` = (n_phi, n_theta, n_rho) nodes in
    lexicographic order.  A rotation-vector pattern search then polishes the
    incumbent (step halves whenever the centre stays best).  Ties keep the
    earlier candidate.
    """
    _check_same_shape(x, y)
    g = x.grid

    best_d = norm(x - y)
    best_q = np.array([1.0, 0.0, 0.0, 0.0])
    if best_d == 0.0:
        return DistanceResult(0.0, Rotation.identity())

    for k in range(1, g.n_phi):
        d = norm(x - y.with_values(np.roll(y.values, -k, axis=2)))
        if d < best_d:
            best_d = d
            best_q = Rotation.about_z(k * g.dphi).q

    def scan(quats):
        ds = np.concatenate(
            [_batch_norms(x, rotate_signal_batch(y, quats[s : s + chunk])) for s in range(0, len(quats), chunk)]
        )
        k = int(np.argmin(ds))
        return ds[k], quats[k]

    n_ph, n_th, n_rh = coarse
    ph = np.arange(n_ph) * 2 * math.pi / n_ph
    th = (np.arange(n_th) + 0.5) * math.pi / n_th
    rh = np.arange(n_rh) * 2 * math.pi / n_rh
    P, T, R = np.meshgrid(ph, th, rh, indexing="ij")
    d, q = scan(quat_from_euler(P, T, R).reshape(-1, 4))
    if d < best_d:
        best_d, best_q = d, q

    h = math.pi / max(coarse)
    for _ in range(max_iter):
        if h < min_step:
            break
        d, q = scan(quat_mul(best_q, quat_from_rotvec(_stencil(h))))
        if d < best_d:
            best_d, best_q = d, q
        else:
            h *= 0.5
    return DistanceResult(float(best_d), Rotation(tuple(best_q)))


# ---------------------------------------------------------------------------
# operators under test


@dataclass(frozen=True, eq=False)
class FilterOperator:
    h: Filter
    q: SO3Quadrature
    kernel: str = "zonal"

    kind = "filter"

    def __call__(self, x: SphericalSignal) -> SphericalSignal:
        return conv(self.h, x, self.q, self.kernel)

    def constants(self) -> dict:
        return {"C_h": lipschitz_constant(self.h), "C_sigma": 1.0, "L": 1, "F": 1}


@dataclass(frozen=True, eq=False)
class NetworkOperator:
    net: NetworkSpec
    q: SO3Quadrature
    kernel: str = "zonal"

    kind = "network"

    def __call__(self, x: SphericalSignal) -> SphericalSignal:
        return forward(self.net, x, self.q, self.kernel)

    def constants(self) -> dict:
        return {
            "C_h": self.net.filter_constant,
            "C_sigma": self.net.sigma_constant,
            "L": self.net.depth,
            "F": self.net.width,
        }


# ---------------------------------------------------------------------------
# equivariance


@dataclass(frozen=True)
class EquivarianceReport:
    rotation: Rotation
    relative_rmse: float
    rotation_distance: float | None
    exact: bool  # azimuthal grid multiple, equality asserted

    def to_json(self) -> dict:
        return {
            "rotation": self.rotation.to_json(),
            "relative_rmse": self.relative_rmse,
            "rotation_distance": self.rotation_distance,
            "exact_regime": self.exact,
        }


def equivariance_report(op, x: SphericalSignal, r: Rotation, with_distance: bool = False) -> EquivarianceReport:
    """Compare ``rotate(op(x), r)`` with ``op(rotate(x, r))``."""
    a = rotate_signal(op(x), r)
    b = op(rotate_signal(x, r))
    err = relative_rmse(a, b)
    exact = azimuthal_grid_shift(r, x.grid.dphi) is not None
    if exact and not err <= EXACT_TOL:
        raise NumericError(f"grid-multiple rotation broke exact equivariance: relative RMSE {err:.3e}")
    dist = rotation_distance(a, b).distance if with_distance else None
    return EquivarianceReport(r, err, dist, exact)


# ---------------------------------------------------------------------------
# bounds


def _check_eps(eps: float) -> None:
    if not 0.0 <= eps <= 0.5:
        raise PreconditionError(f"eps must lie in [0, 1/2], got {eps}")


def bound_thm1(C_h: float, eps: float, norm_x: float) -> float:
    """First-order filter bound ``8 C_h eps ||x||``."""
    _check_eps(eps)
    return 8.0 * C_h * eps * norm_x


def bound_thm2(C_h: float, C_sigma: float, L: int, F: int, eps: float, norm_x: float) -> float:
    """First-order network bound ``8 (C_sigma C_h)^L F^(L-1) eps ||x||``."""
    _check_eps(eps)
    return 8.0 * (C_sigma * C_h) ** L * F ** (L - 1) * eps * norm_x


@dataclass(frozen=True)
class StabilityReport:
    epsilon: float
    measured_distance: float
    analytic_bound: float
    bound_kind: str
    margin: float
    C_h: float
    C_sigma: float
    L: int
    F: int
    norm_x: float
    tau_norm: float
    tau_grad_norm: float

    @property
    def slack_factor(self) -> float:
        if self.measured_distance == 0.0:
            return math.inf
        return self.analytic_bound / self.measured_distance

    @property
    def passed(self) -> bool:
        return self.measured_distance <= self.analytic_bound * (1.0 + self.margin)

    def to_json(self) -> dict:
        out = asdict(self)
        out["slack_factor"] = self.slack_factor
        out["pass"] = self.passed
        out["distance_is_upper_bound"] = True
        return out


def stability_report(
    op,
    x: SphericalSignal,
    t: DiffeoField,
    eps: float,
    margin: float = 0.25,
    **distance_kw,
) -> StabilityReport:
    """Measure the output rotation distance under ``t`` and compare to the bound.

    ``t`` must satisfy ``tau_norm <= eps`` and ``tau_grad_norm <= eps``; those
    dominate the modulo-rotation sizes because the identity is admissible.
    """
    _check_eps(eps)
    n, gn = tau_norm(t), tau_grad_norm(t)
    slack = eps * 1e-12
    if n > eps + slack or gn > eps + slack:
        raise PreconditionError(f"field sizes ({n:.4g}, {gn:.4g}) exceed eps={eps}")
    c = op.constants()
    nx = norm(x)
    if op.kind == "filter":
        bound = bound_thm1(c["C_h"], eps, nx)
    else:
        bound = bound_thm2(c["C_h"], c["C_sigma"], c["L"], c["F"], eps, nx)
    measured = rotation_distance(op(x), op(apply_diffeo(x, t)), **distance_kw).distance
    return StabilityReport(
        epsilon=eps,
        measured_distance=measured,
        analytic_bound=bound,
        bound_kind=op.kind,
        margin=margin,
        C_h=c["C_h"],
        C_sigma=c["C_sigma"],
        L=c["L"],
        F=c["F"],
        norm_x=nx,
        tau_norm=n,
        tau_grad_norm=gn,
    )


def superlinearity(eps, measured) -> float:
    """Quadratic share of a least-squares fit ``m = a eps + b eps^2``.

    Returns ``max(b, 0) eps_max^2 / |fit(eps_max)|``: zero for linear or
    sublinear growth, large when the curvature term dominates.
    """
    e = np.asarray(eps, dtype=float)
    m = np.asarray(measured, dtype=float)
    A = np.stack([e, e * e], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, m, rcond=None)
    em = e.max()
    fit = abs(a * em + b * em * em)
    if fit == 0.0:
        return 0.0
    return max(b, 0.0) * em * em / fit
