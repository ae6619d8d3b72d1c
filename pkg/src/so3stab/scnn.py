"""Forward-only Spherical CNN: filter banks interleaved with pointwise
Lipschitz nonlinearities, plus a pooled linear readout."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .conv import FilterBank, ParametricFilter, conv_bank_values
from .errors import NumericError, SchemaError
from .sphere import SphericalSignal, atomic_write_bytes
from .so3 import SO3Quadrature

SCHEMA = "scnn_spec_v1"

NONLINEARITIES = ("relu", "abs", "leaky_relu", "scaled_tanh", "identity")


@dataclass(frozen=True)
class Nonlinearity:
    kind: str = "relu"
    param: float | None = None  # slope for leaky_relu, gain for scaled_tanh

    def __post_init__(self):
        if self.kind not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.kind!r}")
        if self.kind in ("leaky_relu", "scaled_tanh") and self.param is None:
            raise ValueError(f"{self.kind} needs a parameter")
        if self.kind == "scaled_tanh" and not self.param > 0:
            raise ValueError("scaled_tanh gain must be positive")

    @property
    def lipschitz_constant(self) -> float:
        if self.kind == "leaky_relu":
            return max(1.0, abs(self.param))
        if self.kind == "scaled_tanh":
            return float(self.param)
        return 1.0

    def __call__(self, a: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return np.maximum(a, 0.0)
        if self.kind == "abs":
            return np.abs(a)
        if self.kind == "leaky_relu":
            return np.where(a >= 0.0, a, self.param * a)
        if self.kind == "scaled_tanh":
            return self.param * np.tanh(a)
        return np.array(a, copy=True)

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.param is not None:
            out["param"] = self.param
        return out


@dataclass(frozen=True, eq=False)
class Layer:
    bank: FilterBank
    sigma: Nonlinearity = field(default_factory=Nonlinearity)


@dataclass(frozen=True, eq=False)
class Readout:
    """Weighted global pooling followed by a linear map to class scores.

    ``pool`` has the grid shape (None means uniform weights summing to 1);
    ``matrix`` has shape (n_classes, n_features).
    """

    matrix: np.ndarray
    pool: np.ndarray | None = None

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        object.__setattr__(self, "matrix", m)
        if self.pool is not None:
            object.__setattr__(self, "pool", np.asarray(self.pool, dtype=float))

    def descriptor(self, x: SphericalSignal) -> np.ndarray:
        if self.pool is None:
            w = np.full(x.grid.shape, 1.0 / (x.grid.n_theta * x.grid.n_phi))
        else:
            if self.pool.shape != x.grid.shape:
                raise ValueError(f"pooling weights {self.pool.shape} vs grid {x.grid.shape}")
            w = self.pool
        return np.einsum("fij,ij->f", x.values, w)

    def to_json(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "pool": None if self.pool is None else self.pool.tolist(),
        }


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    layers: tuple[Layer, ...]
    readout: Readout | None = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a network needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].bank.in_features != layers[k - 1].bank.out_features:
                raise ValueError(
                    f"layer {k} expects {layers[k].bank.in_features} features, "
                    f"layer {k - 1} produces {layers[k - 1].bank.out_features}"
                )
        if self.readout is not None and self.readout.matrix.shape[1] != layers[-1].bank.out_features:
            raise ValueError("readout matrix width must match the last layer's features")
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def features(self) -> list[int]:
        """Feature counts ``[F_0, F_1, ..., F_L]`` including the input."""
        return [self.layers[0].bank.in_features] + [l.bank.out_features for l in self.layers]

    @property
    def filter_constant(self) -> float:
        return max(l.bank.lipschitz_constant() for l in self.layers)

    @property
    def sigma_constant(self) -> float:
        return max(l.sigma.lipschitz_constant for l in self.layers)

    @property
    def width(self) -> int:
        """Largest feature count, used as F in the network stability bound."""
        return max(self.features)

    def gain_bound(self) -> float:
        """Product over layers of C_sigma * C_h * out_features: bounds ||Phi(x)|| / ||x||."""
        out = 1.0
        for l in self.layers:
            out *= l.sigma.lipschitz_constant * l.bank.lipschitz_constant() * l.bank.out_features
        return out

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA,
            "layers": [{"bank": l.bank.to_json(), "sigma": l.sigma.to_json()} for l in self.layers],
            "readout": None if self.readout is None else self.readout.to_json(),
        }

    @classmethod
    def from_json(cls, obj) -> "NetworkSpec":
        if not isinstance(obj, dict):
            raise SchemaError("$", "expected an object")
        if obj.get("schema") != SCHEMA:
            raise SchemaError("$.schema", f"expected {SCHEMA!r}, got {obj.get('schema')!r}")
        if "layers" not in obj:
            raise SchemaError("$.layers", "missing key")
        if not isinstance(obj["layers"], list) or not obj["layers"]:
            raise SchemaError("$.layers", "expected a non-empty list")
        layers = []
        for k, lobj in enumerate(obj["layers"]):
            p = f"$.layers[{k}]"
            if not isinstance(lobj, dict):
                raise SchemaError(p, "expected an object")
            if "bank" not in lobj:
                raise SchemaError(f"{p}.bank", "missing key")
            bank = FilterBank.from_json(lobj["bank"], f"{p}.bank")
            sobj = lobj.get("sigma", {"kind": "relu"})
            if not isinstance(sobj, dict) or "kind" not in sobj:
                raise SchemaError(f"{p}.sigma.kind", "missing key")
            try:
                sigma = Nonlinearity(sobj["kind"], sobj.get("param"))
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{p}.sigma", str(exc)) from None
            layers.append(Layer(bank, sigma))
        readout = None
        robj = obj.get("readout")
        if robj is not None:
            if not isinstance(robj, dict) or "matrix" not in robj:
                raise SchemaError("$.readout.matrix", "missing key")
            readout = Readout(np.asarray(robj["matrix"], dtype=float), robj.get("pool"))
        try:
            return cls(tuple(layers), readout)
        except ValueError as exc:
            raise SchemaError("$.layers", str(exc)) from None


def forward(
    net: NetworkSpec,
    x: SphericalSignal,
    q: SO3Quadrature,
    kernel: str = "zonal",
    return_all: bool = False,
):
    """``x_l = sigma_l(H_l(x_{l-1}))`` for l = 1..L; returns x_L (or every x_l)."""
    if x.n_features != net.layers[0].bank.in_features:
        raise ValueError(
            f"input has {x.n_features} features, network expects {net.layers[0].bank.in_features}"
        )
    outs = []
    for k, layer in enumerate(net.layers):
        v = layer.sigma(conv_bank_values(layer.bank, x, q, kernel))
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite values after layer {k}")
        x = x.with_values(v)
        outs.append(x)
    return outs if return_all else x


def readout(net_output: SphericalSignal, r: Readout) -> np.ndarray:
    d = r.descriptor(net_output)
    if r.matrix.shape[1] != d.shape[0]:
        raise ValueError(f"readout expects {r.matrix.shape[1]} features, got {d.shape[0]}")
    return r.matrix @ d


def random_filter(
    rng: np.random.Generator,
    target: float,
    n_components: tuple[int, int] = (1, 3),
    width_range: tuple[float, float] = (0.5, 1.0),
) -> ParametricFilter:
    """Gaussian mixture with random centres, rescaled to certified constant ``target``."""
    k = int(rng.integers(n_components[0], n_components[1] + 1))
    a = rng.standard_normal(k)
    c = rng.standard_normal((k, 3))
    s = rng.uniform(*width_range, size=k)
    h = ParametricFilter(tuple(a), tuple(map(tuple, c)), tuple(s))
    return h.scaled(target / h.lipschitz_constant())


def random_bank(rng, F: int, G: int, target: float, **kw) -> FilterBank:
    return FilterBank(tuple(tuple(random_filter(rng, target, **kw) for _ in range(G)) for _ in range(F)))


def random_network(
    features=(1, 4, 4, 8),
    target_ch: float = 1.0,
    seed: int = 0,
    sigma: Nonlinearity | None = None,
    n_classes: int | None = None,
    **filter_kw,
) -> NetworkSpec:
    """Seeded stand-in for a trained network: every filter has C_h = target_ch."""
    features = list(features)
    if len(features) < 2:
        raise ValueError("need at least an input and one output feature count")
    rng = np.random.default_rng(seed)
    sigma = sigma or Nonlinearity("relu")
    layers = tuple(
        Layer(random_bank(rng, features[k], features[k + 1], target_ch, **filter_kw), sigma)
        for k in range(len(features) - 1)
    )
    readout_ = None
    if n_classes:
        readout_ = Readout(rng.standard_normal((n_classes, features[-1])))
    return NetworkSpec(layers, readout_)


def dumps_network(net: NetworkSpec) -> str:
    return json.dumps(net.to_json(), indent=1)


def save_network(net: NetworkSpec, path) -> None:
    atomic_write_bytes(path, dumps_network(net).encode())


def load_network(path) -> NetworkSpec:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc}") from None
    return NetworkSpec.from_json(obj)


def cascade_bound(net: NetworkSpec, norm_x: float) -> float:
    """(C_sigma C_h)^L F^(L-1) ||x|| with F the widest layer."""
    L = net.depth
    return (net.sigma_constant * net.filter_constant) ** L * net.width ** (L - 1) * norm_x


def proof_topology(depth: int, width: int) -> list[int]:
    """Feature counts 1 -> F -> ... -> F -> 1 of the network stability argument."""
    if depth == 1:
        return [1, 1]
    return [1] + [width] * (depth - 1) + [1]


__all__ = [
    "Layer",
    "NetworkSpec",
    "Nonlinearity",
    "Readout",
    "cascade_bound",
    "forward",
    "load_network",
    "proof_topology",
    "random_network",
    "readout",
    "save_network",
]
