"""Spherical convolution over SO(3) and Lipschitz filters.

For a filter ``h`` and a single-feature signal ``x`` the output at a grid
point ``u`` is the Haar-quadrature sum::

    y(u) = sum_r  w_r * h(r^-1 u) * x(r u0)

over ZYZ nodes ``r = Rz(phi) Ry(theta) Rz(rho)``.  ``conv_direct`` evaluates
this sum literally.  ``conv_zonal`` uses the fact that ``r^-1 u`` sweeps a
latitude circle of polar angle ``angle(u, r u0)`` as ``rho`` varies: the rho
sum becomes the filter's azimuthal average (its zonal profile) at that angle.
With continuous rho the two are identical; with ``n_rho`` discrete nodes they
differ by the periodic-trapezoid aliasing error in rho, which decays like
``I_{n_rho}(1/s^2)`` for a Gaussian component of width ``s``.

When the quadrature's (theta, phi) nodes coincide with the signal grid the
zonal kernel depends on the azimuth difference only, and the phi sum is a
circular convolution done with real FFTs.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Union

import numpy as np

from .sphere import EquiangularGrid, SphericalSignal, angles_to_xyz, sample, sample_xyz
from .so3 import SO3Quadrature, quat_to_matrix

_INV_SQRT_E = 1.0 / math.sqrt(math.e)


# ---------------------------------------------------------------------------
# filters


@dataclass(frozen=True)
class ParametricFilter:
    """Gaussian mixture ``h(u) = sum_k a_k exp(-|u - c_k|^2 / (2 s_k^2))``.

    Distances are Euclidean in R^3; centres are stored normalised.
    """

    amplitudes: tuple[float, ...]
    centers: tuple[tuple[float, float, float], ...]
    widths: tuple[float, ...]

    def __post_init__(self):
        a = tuple(float(v) for v in self.amplitudes)
        s = tuple(float(v) for v in self.widths)
        c = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        if not (len(a) == len(s) == len(c)):
            raise ValueError("amplitudes, centers and widths must have equal length")
        if any(not (w > 0.0) or not math.isfinite(w) for w in s):
            raise ValueError(f"widths must be positive and finite, got {s}")
        if not all(math.isfinite(v) for v in a):
            raise ValueError("amplitudes must be finite")
        n = np.linalg.norm(c, axis=1)
        if np.any(n == 0.0):
            raise ValueError("filter centres must be nonzero vectors")
        c = c / n[:, None]
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "widths", s)
        object.__setattr__(self, "centers", tuple(tuple(float(v) for v in row) for row in c))

    @classmethod
    def single(cls, a: float, center, s: float) -> "ParametricFilter":
        return cls((a,), (tuple(center),), (s,))

    @classmethod
    def zero(cls) -> "ParametricFilter":
        return cls((), (), ())

    @property
    def n_components(self) -> int:
        return len(self.amplitudes)

    def _arrays(self):
        return (
            np.asarray(self.amplitudes, dtype=float),
            np.asarray(self.centers, dtype=float).reshape(-1, 3),
            np.asarray(self.widths, dtype=float),
        )

    def evaluate_dots(self, dots) -> np.ndarray:
        """``h`` from the inner products ``<u, c_k>`` stacked on the last axis."""
        a, _, s = self._arrays()
        if len(a) == 0:
            return np.zeros(np.shape(dots)[:-1])
        # |u - c|^2 = 2 - 2 <u, c> on the unit sphere
        return np.exp((np.asarray(dots) - 1.0) / s**2) @ a

    def evaluate(self, xyz) -> np.ndarray:
        _, c, _ = self._arrays()
        xyz = np.asarray(xyz, dtype=float)
        return self.evaluate_dots(xyz @ c.T)

    def lipschitz_constant(self) -> float:
        a, _, s = self._arrays()
        if len(a) == 0:
            return 0.0
        # Gaussian a exp(-t^2/2s^2) has maximal slope |a| / (s sqrt(e))
        return float(max(np.sum(np.abs(a)), np.sum(np.abs(a) / s) * _INV_SQRT_E))

    def scaled(self, factor: float) -> "ParametricFilter":
        return ParametricFilter(
            tuple(factor * v for v in self.amplitudes), self.centers, self.widths
        )

    def to_json(self) -> dict:
        return {
            "type": "parametric",
            "components": [
                {"a": a, "c": list(c), "s": s}
                for a, c, s in zip(self.amplitudes, self.centers, self.widths)
            ],
        }


@dataclass(frozen=True, eq=False)
class GriddedFilter:
    """Filter given by samples on an equiangular grid, read by interpolation."""

    signal: SphericalSignal

    def __post_init__(self):
        if self.signal.n_features != 1:
            raise ValueError("a gridded filter must be single-feature")

    @classmethod
    def constant(cls, c: float, grid: EquiangularGrid | None = None) -> "GriddedFilter":
        grid = grid or EquiangularGrid(2, 2)
        return cls(SphericalSignal(grid, np.full(grid.shape, float(c))))

    def evaluate(self, xyz) -> np.ndarray:
        return sample_xyz(self.signal, xyz, f=0)

    def lipschitz_constant(self, safety: float = 1.5) -> float:
        """Estimate, not a certificate: node magnitudes and adjacent quotients."""
        v = self.signal.values[0]
        p = self.signal.grid.xyz()
        bound = float(np.max(np.abs(v)))
        if v.shape[0] > 1:
            d = np.linalg.norm(p[1:] - p[:-1], axis=-1)
            bound = max(bound, float(np.max(np.abs(v[1:] - v[:-1]) / d)))
        if v.shape[1] > 1:
            pr = np.roll(p, -1, axis=1)
            d = np.linalg.norm(pr - p, axis=-1)
            q = np.abs(np.roll(v, -1, axis=1) - v) / np.where(d > 0, d, np.inf)
            bound = max(bound, float(np.max(q)))
        return safety * bound

    def to_json(self) -> dict:
        g = self.signal.grid
        return {
            "type": "gridded",
            "n_theta": g.n_theta,
            "n_phi": g.n_phi,
            "values": self.signal.values[0].reshape(-1).tolist(),
        }


Filter = Union[ParametricFilter, GriddedFilter]


def lipschitz_constant(h: Filter) -> float:
    return h.lipschitz_constant()


def filter_from_json(obj: dict, path: str = "$") -> Filter:
    from .errors import SchemaError

    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    kind = obj.get("type")
    if kind == "parametric":
        comps = obj.get("components")
        if not isinstance(comps, list):
            raise SchemaError(f"{path}.components", "missing or not a list")
        a, c, s = [], [], []
        for k, comp in enumerate(comps):
            cp = f"{path}.components[{k}]"
            if not isinstance(comp, dict):
                raise SchemaError(cp, "expected an object")
            for key in ("a", "c", "s"):
                if key not in comp:
                    raise SchemaError(f"{cp}.{key}", "missing key")
            if not isinstance(comp["c"], list) or len(comp["c"]) != 3:
                raise SchemaError(f"{cp}.c", "expected a list of 3 numbers")
            a.append(comp["a"])
            c.append(tuple(comp["c"]))
            s.append(comp["s"])
        try:
            return ParametricFilter(tuple(a), tuple(c), tuple(s))
        except (TypeError, ValueError) as exc:
            raise SchemaError(path, str(exc)) from None
    if kind == "gridded":
        for key in ("n_theta", "n_phi", "values"):
            if key not in obj:
                raise SchemaError(f"{path}.{key}", "missing key")
        try:
            grid = EquiangularGrid(int(obj["n_theta"]), int(obj["n_phi"]))
            vals = np.asarray(obj["values"], dtype=float).reshape(grid.shape)
            return GriddedFilter(SphericalSignal(grid, vals))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}.values", str(exc)) from None
    raise SchemaError(f"{path}.type", f"unknown filter type {kind!r}")


@dataclass(frozen=True, eq=False)
class FilterBank:
    """``filters[f][g]`` maps input feature f to output feature g."""

    filters: tuple[tuple[Filter, ...], ...]

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.filters)
        if not rows or not rows[0]:
            raise ValueError("a filter bank needs at least one filter")
        if any(len(r) != len(rows[0]) for r in rows):
            raise ValueError("filter bank rows must all have G filters")
        object.__setattr__(self, "filters", rows)

    @classmethod
    def single(cls, h: Filter) -> "FilterBank":
        return cls(((h,),))

    @property
    def in_features(self) -> int:
        return len(self.filters)

    @property
    def out_features(self) -> int:
        return len(self.filters[0])

    def lipschitz_constant(self) -> float:
        return max(h.lipschitz_constant() for row in self.filters for h in row)

    def to_json(self) -> dict:
        return {
            "F": self.in_features,
            "G": self.out_features,
            "filters": [[h.to_json() for h in row] for row in self.filters],
        }

    @classmethod
    def from_json(cls, obj: dict, path: str = "$") -> "FilterBank":
        from .errors import SchemaError

        if not isinstance(obj, dict):
            raise SchemaError(path, "expected an object")
        for key in ("F", "G", "filters"):
            if key not in obj:
                raise SchemaError(f"{path}.{key}", "missing key")
        F, G, rows = obj["F"], obj["G"], obj["filters"]
        if not isinstance(rows, list) or len(rows) != F:
            raise SchemaError(f"{path}.filters", f"expected {F} rows")
        out = []
        for f, row in enumerate(rows):
            if not isinstance(row, list) or len(row) != G:
                raise SchemaError(f"{path}.filters[{f}]", f"expected {G} filters")
            out.append(
                tuple(filter_from_json(h, f"{path}.filters[{f}][{g}]") for g, h in enumerate(row))
            )
        return cls(tuple(out))


def save_bank(bank: FilterBank, path) -> None:
    from .sphere import atomic_write_bytes

    atomic_write_bytes(path, json.dumps(bank.to_json(), indent=1).encode())


def load_bank(path) -> FilterBank:
    with open(path) as fh:
        return FilterBank.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# direct kernel


def _check_single(x: SphericalSignal) -> None:
    if x.n_features != 1:
        raise ValueError(f"expected a single-feature signal, got F={x.n_features}")


def _node_values(x: SphericalSignal, q: SO3Quadrature) -> np.ndarray:
    """x(r u0) = x(theta_r, phi_r) for every (theta_r, phi_r) node."""
    th, ph = np.meshgrid(q.thetas, q.phis, indexing="ij")
    return sample(x, th, ph, f=0)


def conv_direct(h: Filter, x: SphericalSignal, q: SO3Quadrature, chunk: int = 64) -> SphericalSignal:
    """Reference kernel: the full SO(3) quadrature sum at every output point."""
    _check_single(x)
    m = quat_to_matrix(q.quats()).reshape(-1, 3, 3)  # (N, 3, 3)
    xn = _node_values(x, q)  # (n_theta_r, n_phi_r)
    wx = (q.weights * xn[:, :, None]).reshape(-1)
    u = x.grid.xyz().reshape(-1, 3)
    y = np.empty(len(u))
    if isinstance(h, ParametricFilter):
        _, c, _ = h._arrays()
        # <r^-1 u, c> = <u, r c>
        rc = np.einsum("nij,kj->nki", m, c)  # (N, K, 3)
        for start in range(0, len(u), chunk):
            dots = np.einsum("pj,nkj->pnk", u[start : start + chunk], rc)
            y[start : start + chunk] = h.evaluate_dots(dots) @ wx
    else:
        for start in range(0, len(u), chunk):
            pts = np.einsum("nji,pj->pni", m, u[start : start + chunk])  # r^T u
            y[start : start + chunk] = h.evaluate(pts) @ wx
    return x.with_values(y.reshape(x.grid.shape))


# ---------------------------------------------------------------------------
# zonal kernel


def _profile_from_cos(h: Filter, cos_gamma, rhos) -> np.ndarray:
    """Azimuthal average over ``rhos`` of h at polar angle arccos(cos_gamma)."""
    cg = np.clip(np.asarray(cos_gamma, dtype=float), -1.0, 1.0)
    sg = np.sqrt(1.0 - cg * cg)
    cr, sr = np.cos(rhos), np.sin(rhos)
    if isinstance(h, ParametricFilter):
        _, c, _ = h._arrays()
        # <(sg cr, sg sr, cg), c_k>
        horiz = cr[:, None] * c[None, :, 0] + sr[:, None] * c[None, :, 1]  # (R, K)
        dots = sg[..., None, None] * horiz + cg[..., None, None] * c[:, 2]
        return h.evaluate_dots(dots).mean(axis=-1)
    pts = np.stack(
        [sg[..., None] * cr, sg[..., None] * sr, np.broadcast_to(cg[..., None], sg.shape + cr.shape)],
        axis=-1,
    )
    return h.evaluate(pts).mean(axis=-1)


def zonal_profile(h: Filter, q: SO3Quadrature, gammas=None, n_gamma: int = 181):
    """Filter averaged over the quadrature's rho nodes, as a function of polar angle.

    Returns ``(gammas, values)``; ``gammas`` defaults to ``n_gamma`` evenly
    spaced angles in [0, pi].
    """
    if gammas is None:
        gammas = np.linspace(0.0, math.pi, n_gamma)
    gammas = np.asarray(gammas, dtype=float)
    return gammas, _profile_from_cos(h, np.cos(gammas), q.rhos)


class _KernelCache:
    def __init__(self, maxsize: int = 64):
        self.maxsize = maxsize
        self._data: OrderedDict = OrderedDict()

    def get(self, key, build):
        try:
            self._data.move_to_end(key)
            return self._data[key]
        except KeyError:
            val = build()
            self._data[key] = val
            if len(self._data) > self.maxsize:
                self._data.popitem(last=False)
            return val

    def clear(self):
        self._data.clear()


_kernel_cache = _KernelCache()


def clear_kernel_cache() -> None:
    _kernel_cache.clear()


def _filter_key(h: Filter):
    return h if isinstance(h, ParametricFilter) else id(h)


def zonal_kernel(h: Filter, grid: EquiangularGrid, q: SO3Quadrature) -> np.ndarray:
    """K[i, i', d] = profile at the angle between (theta_i, 0) and (theta_i', d dphi)."""
    th = grid.theta
    ct, st = np.cos(th), np.sin(th)
    cd = np.cos(np.arange(grid.n_phi) * grid.dphi)
    cosg = ct[:, None, None] * ct[None, :, None] + st[:, None, None] * st[None, :, None] * cd
    return _profile_from_cos(h, cosg, q.rhos)


def _kernel_spectrum(h: Filter, grid: EquiangularGrid, q: SO3Quadrature) -> np.ndarray:
    """rfft of the zonal kernel along azimuth, with the theta weights folded in."""

    def build():
        k = zonal_kernel(h, grid, q)
        return np.fft.rfft(k, axis=2) * q.theta_weights[None, :, None] / grid.n_phi

    return _kernel_cache.get((_filter_key(h), grid, q), build)


def _conv_zonal_general(h: Filter, x: SphericalSignal, q: SO3Quadrature, chunk: int = 64) -> np.ndarray:
    xn = _node_values(x, q)
    wmarg = q.weights.sum(axis=2)  # sin-theta weights marginalised over rho
    th, ph = np.meshgrid(q.thetas, q.phis, indexing="ij")
    v = angles_to_xyz(th, ph).reshape(-1, 3)
    wx = (wmarg * xn).reshape(-1)
    u = x.grid.xyz().reshape(-1, 3)
    y = np.empty(len(u))
    for start in range(0, len(u), chunk):
        cosg = u[start : start + chunk] @ v.T
        y[start : start + chunk] = _profile_from_cos(h, cosg, q.rhos) @ wx
    return y.reshape(x.grid.shape)


def conv_zonal(h: Filter, x: SphericalSignal, q: SO3Quadrature) -> SphericalSignal:
    """Fast path: zonal profile plus an FFT over azimuth when nodes match the grid."""
    _check_single(x)
    if not q.matches(x.grid):
        return x.with_values(_conv_zonal_general(h, x, q))
    spec = _kernel_spectrum(h, x.grid, q)
    xf = np.fft.rfft(x.values[0], axis=1)
    y = np.fft.irfft(np.einsum("ijm,jm->im", spec, xf), n=x.grid.n_phi, axis=1)
    return x.with_values(y)


KERNELS = ("direct", "zonal")


def conv(h: Filter, x: SphericalSignal, q: SO3Quadrature, kernel: str = "zonal") -> SphericalSignal:
    if kernel == "direct":
        return conv_direct(h, x, q)
    if kernel == "zonal":
        return conv_zonal(h, x, q)
    raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")


def conv_bank_values(
    bank: FilterBank, x: SphericalSignal, q: SO3Quadrature, kernel: str = "zonal"
) -> np.ndarray:
    """Raw (G, n_theta, n_phi) output of :func:`conv_bank`, not checked for finiteness."""
    if x.n_features != bank.in_features:
        raise ValueError(
            f"signal has {x.n_features} features, filter bank expects {bank.in_features}"
        )
    F, G = bank.in_features, bank.out_features
    grid = x.grid
    if kernel == "zonal" and q.matches(grid):
        xf = np.fft.rfft(x.values, axis=2)  # (F, nt, m)
        yf = np.zeros((G, grid.n_theta, xf.shape[2]), dtype=complex)
        for f in range(F):
            for g in range(G):
                yf[g] += np.einsum("ijm,jm->im", _kernel_spectrum(bank.filters[f][g], grid, q), xf[f])
        return np.fft.irfft(yf, n=grid.n_phi, axis=2)
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")
    out = np.zeros((G,) + grid.shape)
    for f in range(F):
        xf1 = x.feature(f)
        for g in range(G):
            out[g] += conv(bank.filters[f][g], xf1, q, kernel).values[0]
    return out


def conv_bank(
    bank: FilterBank, x: SphericalSignal, q: SO3Quadrature, kernel: str = "zonal"
) -> SphericalSignal:
    """``y^g = sum_f conv(h^{fg}, x^f)`` for every output feature g."""
    return x.with_values(conv_bank_values(bank, x, q, kernel))
