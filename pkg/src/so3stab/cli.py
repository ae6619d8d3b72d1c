"""Command-line experiment harness.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric failure.
Outputs are written to a temporary file and renamed, so a failed run never
leaves a partial file behind.  ``SO3STAB_WORKERS`` sets the process-pool size
for trial loops (default 1, run in-process).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .conv import clear_kernel_cache, conv_bank, conv_direct, conv_zonal, load_bank
from .errors import NumericError, SchemaError
from .ingest import MeshFormatError, load_off, ray_cast_signal, synth_signal
from .metrics import (
    FilterOperator,
    NetworkOperator,
    PreconditionError,
    equivariance_report,
    relative_rmse,
    stability_report,
)
from .perturb import RescaleError, apply_diffeo, make_smooth_diffeo, make_type, write_field
from .scnn import NetworkSpec, forward, load_network, random_filter, random_network, save_network
from .so3 import Rotation, SO3Quadrature, default_quadrature, rotate_signal
from .sphere import EquiangularGrid, SignalFormatError, atomic_write_bytes, read_signal, write_signal

CONFIG_SCHEMA = "experiment_config_v1"
STABILITY_SCHEMA = "stability_report_v1"
EQUIVARIANCE_SCHEMA = "equivariance_report_v1"
WORKERS_ENV = "SO3STAB_WORKERS"
NO_ACCURACY = "training out of scope"


@dataclass
class ExperimentConfig:
    resolution: int = 32
    n_rho: int | None = None
    kernel: str = "zonal"
    seeds: list = field(default_factory=lambda: list(range(20)))
    eps: list = field(default_factory=lambda: [0.025, 0.05, 0.1])
    types: list = field(default_factory=lambda: [1, 2, 3, 4])
    type_seeds: list = field(default_factory=lambda: list(range(10)))
    network: str | None = None
    network_features: list = field(default_factory=lambda: [1, 4, 4, 8])
    network_seed: int = 0
    target_ch: float = 1.0
    filter_seed: int = 0
    signal_seed: int = 0
    margin: float = 0.25
    distance_grid: list = field(default_factory=lambda: [24, 12, 24])
    out_json: str | None = None
    out_csv: str | None = None

    @classmethod
    def from_json(cls, obj) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise SchemaError("$", "expected an object")
        obj = dict(obj)
        schema = obj.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise SchemaError("$.schema", f"expected {CONFIG_SCHEMA!r}, got {schema!r}")
        names = {f.name for f in fields(cls)}
        for k in obj:
            if k not in names:
                raise SchemaError(f"$.{k}", "unknown key")
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    def to_json(self) -> dict:
        return {"schema": CONFIG_SCHEMA, **asdict(self)}

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise SchemaError(f"$.{key}", msg)

        def ints(v):
            return isinstance(v, list) and all(isinstance(a, int) and not isinstance(a, bool) for a in v)

        need(isinstance(self.resolution, int) and self.resolution >= 2, "resolution", "integer >= 2")
        need(self.n_rho is None or (isinstance(self.n_rho, int) and self.n_rho >= 2), "n_rho", "integer >= 2 or null")
        need(self.kernel in ("zonal", "direct"), "kernel", "'zonal' or 'direct'")
        need(ints(self.seeds) and self.seeds, "seeds", "non-empty list of integers")
        need(ints(self.type_seeds), "type_seeds", "list of integers")
        need(ints(self.types) and set(self.types) <= {1, 2, 3, 4}, "types", "subset of [1, 2, 3, 4]")
        need(isinstance(self.eps, list) and self.eps and all(isinstance(e, (int, float)) for e in self.eps), "eps", "non-empty list of numbers")
        for e in self.eps:
            need(0 < e <= 0.5, "eps", f"{e} outside (0, 1/2]")
        need(ints(self.network_features) and len(self.network_features) >= 2 and min(self.network_features) >= 1,
             "network_features", "at least two positive integers")
        need(isinstance(self.target_ch, (int, float)) and self.target_ch > 0, "target_ch", "positive number")
        need(isinstance(self.margin, (int, float)) and self.margin >= 0, "margin", "non-negative number")
        need(ints(self.distance_grid) and len(self.distance_grid) == 3 and min(self.distance_grid) >= 1,
             "distance_grid", "three positive integers")
        for key in ("network_seed", "filter_seed", "signal_seed"):
            need(isinstance(getattr(self, key), int), key, "integer")

    # derived objects
    def grid(self) -> EquiangularGrid:
        return EquiangularGrid(self.resolution, self.resolution)

    def quadrature(self) -> SO3Quadrature:
        g = self.grid()
        if self.n_rho is None:
            return default_quadrature(g)
        return SO3Quadrature(g.n_theta, g.n_phi, self.n_rho)

    def build_network(self) -> NetworkSpec:
        if self.network:
            return load_network(self.network)
        return random_network(self.network_features, self.target_ch, self.network_seed)

    def build_filter(self):
        return random_filter(np.random.default_rng(self.filter_seed), self.target_ch)


def load_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    obj = {}
    if path:
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError("$", f"invalid JSON in {path}: {exc}") from None
        if not isinstance(obj, dict):
            raise SchemaError("$", "expected an object")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise SchemaError("--set", f"expected key=value, got {item!r}")
        try:
            obj[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            obj[key.strip()] = raw
    return ExperimentConfig.from_json(obj)


# ---------------------------------------------------------------------------
# helpers


def _floats(text: str, n: int | None = None, what: str = "value") -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise SchemaError(what, f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise SchemaError(what, f"expected {n} numbers, got {len(vals)}")
    return vals


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _csv_bytes(header: list[str], rows: list[dict]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r.get(h)) for h in header])
    return buf.getvalue().encode()


def _jsonable(o):
    """Strict JSON: non-finite floats become strings, numpy scalars plain numbers."""
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        o = o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    return o


def _write_json(path, obj) -> None:
    text = json.dumps(_jsonable(obj), indent=1, sort_keys=True, allow_nan=False)
    atomic_write_bytes(path, (text + "\n").encode())


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise SchemaError(WORKERS_ENV, f"expected an integer, got {raw!r}") from None
    if n < 1:
        raise SchemaError(WORKERS_ENV, "must be at least 1")
    return n


def _pmap(fn, items):
    items = list(items)
    n = _workers()
    if n == 1 or len(items) < 2:
        return [fn(a) for a in items]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _input_signal(path: str | None, cfg: ExperimentConfig):
    if path:
        return read_signal(path)
    return synth_signal("gaussian_mixture", cfg.grid(), seed=cfg.signal_seed)


def _warn_if_dead(net: NetworkSpec, x, q, kernel: str) -> None:
    # an all-zero output makes every equivariance/stability check pass vacuously
    if not np.any(forward(net, x, q, kernel).values):
        print("warning: network output is identically zero on the input; checks are vacuous", file=sys.stderr)


# ---------------------------------------------------------------------------
# data commands


def cmd_ingest(a) -> int:
    grid = EquiangularGrid(a.resolution, a.resolution)
    if a.synth:
        params = {}
        for item in a.param:
            k, _, v = item.partition("=")
            params[k] = json.loads(v)
        sig = synth_signal(a.synth, grid, **params)
        diag = None
    else:
        if not a.mesh:
            raise SchemaError("mesh", "give an OFF file or --synth")
        mesh = load_off(a.mesh)
        center = _floats(a.center, 3, "--center")
        sig, diag = ray_cast_signal(mesh, center, grid, return_diagnostics=True)
        for w in diag.warnings:
            print(f"warning: {w}", file=sys.stderr)
    write_signal(sig, a.output)
    if a.diagnostics and diag is not None:
        _write_json(a.diagnostics, diag.to_json())
    return 0


def _parse_rotation(a) -> Rotation:
    if a.euler and a.axis_angle:
        raise SchemaError("--euler", "give either --euler or --axis-angle")
    if a.euler:
        r = Rotation.from_euler(*_floats(a.euler, 3, "--euler"))
    elif a.axis_angle:
        v = _floats(a.axis_angle, 4, "--axis-angle")
        if not any(v[:3]):
            raise SchemaError("--axis-angle", "axis must be non-zero")
        r = Rotation.from_axis_angle(v[:3], v[3])
    else:
        raise SchemaError("--euler", "a rotation is required")
    return r.inverse() if a.inverse else r


def cmd_rotate(a) -> int:
    x = read_signal(a.input)
    write_signal(rotate_signal(x, _parse_rotation(a)), a.output)
    return 0


def cmd_perturb(a) -> int:
    x = read_signal(a.input)
    if (a.type is None) == (a.smooth is None):
        raise SchemaError("--type", "give exactly one of --type or --smooth")
    if a.type is not None:
        if a.type not in (1, 2, 3, 4):
            raise SchemaError("--type", "must be 1, 2, 3 or 4")
        t = make_type(a.type, a.seed, x.grid)
    else:
        if not 0 < a.smooth <= 0.5:
            raise SchemaError("--smooth", f"eps must lie in (0, 1/2], got {a.smooth}")
        t = make_smooth_diffeo(a.smooth, a.seed, x.grid)
    write_signal(apply_diffeo(x, t), a.output)
    if a.field_out:
        write_field(t, a.field_out)
    return 0


def _quad_for(grid: EquiangularGrid, n_rho: int | None) -> SO3Quadrature:
    if n_rho is None:
        return default_quadrature(grid)
    return SO3Quadrature(grid.n_theta, grid.n_phi, n_rho)


def cmd_conv(a) -> int:
    x = read_signal(a.input)
    bank = load_bank(a.filter)
    if x.n_features != bank.in_features:
        raise SchemaError("--filter", f"bank expects F={bank.in_features}, signal has F={x.n_features}")
    y = conv_bank(bank, x, _quad_for(x.grid, a.n_rho), a.kernel)
    if not np.all(np.isfinite(y.values)):
        raise NumericError("convolution produced non-finite values")
    write_signal(y, a.output)
    return 0


def cmd_forward(a) -> int:
    x = read_signal(a.input)
    if a.network:
        net = load_network(a.network)
    else:
        feats = [int(v) for v in _floats(a.features, None, "--features")]
        net = random_network(feats, a.target_ch, a.seed)
    if a.save_network:
        save_network(net, a.save_network)
    if x.n_features != net.layers[0].bank.in_features:
        raise SchemaError("--network", f"network expects F={net.layers[0].bank.in_features}, signal has F={x.n_features}")
    write_signal(forward(net, x, _quad_for(x.grid, a.n_rho), a.kernel), a.output)
    return 0


# ---------------------------------------------------------------------------
# experiments


def _rotation_list(a) -> list[tuple[str, Rotation]]:
    out = []
    axis = _floats(a.axis, 3, "--axis")
    if not any(axis):
        raise SchemaError("--axis", "axis must be non-zero")
    for deg in _floats(a.degrees, None, "--degrees") if a.degrees else []:
        out.append((f"axis={a.axis};deg={deg!r}", Rotation.from_axis_angle(axis, math.radians(deg))))
    for spec in a.euler or []:
        e = _floats(spec, 3, "--euler")
        out.append((f"euler={spec}", Rotation.from_euler(*e)))
    if not out:
        raise SchemaError("--degrees", "no rotations requested")
    return out


def cmd_check_equivariance(a) -> int:
    cfg = load_config(a.config, a.set)
    x = _input_signal(a.input, cfg)
    q = _quad_for(x.grid, cfg.n_rho)
    net = cfg.build_network()
    _warn_if_dead(net, x, q, cfg.kernel)
    op = NetworkOperator(net, q, cfg.kernel)
    rows = []
    for label, r in _rotation_list(a):
        rep = equivariance_report(op, x, r, with_distance=not a.no_distance)
        rows.append(
            {
                "rotation": label,
                "resolution": f"{x.grid.n_theta}x{x.grid.n_phi}",
                "relative_rmse": rep.relative_rmse,
                "rotation_distance": rep.rotation_distance,
                "exact_regime": rep.exact,
                "accuracy": None,
                "accuracy_note": NO_ACCURACY,
            }
        )
        print(f"{label}: relative RMSE {rep.relative_rmse:.3e}")
    header = ["rotation", "resolution", "relative_rmse", "rotation_distance", "exact_regime", "accuracy", "accuracy_note"]
    out_csv = a.out_csv or cfg.out_csv
    out_json = a.out_json or cfg.out_json
    if out_csv:
        atomic_write_bytes(out_csv, _csv_bytes(header, rows))
    if out_json:
        _write_json(out_json, {"schema": EQUIVARIANCE_SCHEMA, "config": cfg.to_json(), "rows": rows})
    return 0


def _stability_trial(job):
    cfg_json, kind, eps, seed = job
    cfg = ExperimentConfig.from_json(cfg_json)
    grid, q = cfg.grid(), cfg.quadrature()
    x = synth_signal("gaussian_mixture", grid, seed=cfg.signal_seed)
    t = make_smooth_diffeo(eps, seed, grid)
    if kind == "filter":
        op = FilterOperator(cfg.build_filter(), q, cfg.kernel)
    else:
        op = NetworkOperator(cfg.build_network(), q, cfg.kernel)
    rep = stability_report(op, x, t, eps, margin=cfg.margin, coarse=tuple(cfg.distance_grid))
    return {"kind": kind, "seed": seed, "eps": eps, **rep.to_json()}


def _type_trial(job):
    cfg_json, k, seed = job
    cfg = ExperimentConfig.from_json(cfg_json)
    grid, q = cfg.grid(), cfg.quadrature()
    x = synth_signal("gaussian_mixture", grid, seed=cfg.signal_seed)
    net = cfg.build_network()
    y = forward(net, x, q, cfg.kernel)
    yt = forward(net, apply_diffeo(x, make_type(k, seed, grid)), q, cfg.kernel)
    return {"kind": f"type{k}", "seed": seed, "type": k, "relative_rmse": relative_rmse(y, yt)}


STABILITY_CSV = ["kind", "seed", "eps", "type", "measured_distance", "analytic_bound", "slack_factor", "relative_rmse", "pass"]


def run_types(cfg: ExperimentConfig) -> list[dict]:
    """Output relative RMSE of the configured network under each typed field."""
    cj = cfg.to_json()
    return _pmap(_type_trial, [(cj, k, s) for k in cfg.types for s in cfg.type_seeds])


def run_stability(cfg: ExperimentConfig) -> dict:
    cj = cfg.to_json()
    jobs = [(cj, kind, e, s) for kind in ("filter", "network") for e in cfg.eps for s in cfg.seeds]
    trials = _pmap(_stability_trial, jobs)
    type_rows = run_types(cfg)
    summary = {}
    for kind in ("filter", "network"):
        sel = [t for t in trials if t["kind"] == kind]
        summary[kind] = {
            "trials": len(sel),
            "passed": sum(t["pass"] for t in sel),
            "median_slack": statistics.median(t["slack_factor"] for t in sel) if sel else None,
        }
    for k in cfg.types:
        sel = [t["relative_rmse"] for t in type_rows if t["type"] == k]
        summary[f"type{k}"] = {"trials": len(sel), "mean_relative_rmse": statistics.fmean(sel) if sel else None,
                               "accuracy": None, "accuracy_note": NO_ACCURACY}
    return {"schema": STABILITY_SCHEMA, "config": cj, "trials": trials, "types": type_rows, "summary": summary}


def cmd_check_stability(a) -> int:
    cfg = load_config(a.config, a.set)
    _warn_if_dead(cfg.build_network(), _input_signal(None, cfg), cfg.quadrature(), cfg.kernel)
    report = run_stability(cfg)
    out_csv = a.out_csv or cfg.out_csv
    out_json = a.out_json or cfg.out_json
    if out_csv:
        atomic_write_bytes(out_csv, _csv_bytes(STABILITY_CSV, report["trials"] + report["types"]))
    if out_json:
        _write_json(out_json, report)
    for key, s in report["summary"].items():
        if "passed" in s:
            print(f"{key}: {s['passed']}/{s['trials']} PASS, median slack {s['median_slack']:.3g}")
        else:
            print(f"{key}: mean relative RMSE {s['mean_relative_rmse']:.4g}")
    return 0


def bench_rows(resolutions, n_rho: int = 16, seed: int = 0, repeats: int = 1) -> list[dict]:
    """Time direct vs zonal kernels; the zonal time includes building its kernel."""
    rows = []
    for n in resolutions:
        grid = EquiangularGrid(n, n)
        q = SO3Quadrature(n, n, n_rho)
        h = random_filter(np.random.default_rng(seed), 1.0)
        x = synth_signal("gaussian_mixture", grid, seed=seed)
        times = {}
        for kernel, fn in (("direct", conv_direct), ("zonal", conv_zonal)):
            best = math.inf
            for _ in range(repeats):
                clear_kernel_cache()
                t0 = time.perf_counter()
                y = fn(h, x, q)
                best = min(best, time.perf_counter() - t0)
            times[kernel] = (best, y)
        ref = times["direct"][1].values
        for kernel in ("direct", "zonal"):
            rows.append(
                {
                    "resolution": f"{n}x{n}/({n},{n},{n_rho})",
                    "kernel": kernel,
                    "wall_time_s": times[kernel][0],
                    "max_abs_diff": float(np.max(np.abs(times[kernel][1].values - ref))),
                }
            )
    return rows


def cmd_bench(a) -> int:
    res = [int(v) for v in _floats(a.resolutions, None, "--resolutions")]
    rows = bench_rows(res, a.n_rho, a.seed, a.repeats)
    for r in rows:
        print(f"{r['resolution']:>18} {r['kernel']:>6} {r['wall_time_s']:.4f}s diff {r['max_abs_diff']:.2e}")
    if a.out_csv:
        atomic_write_bytes(a.out_csv, _csv_bytes(["resolution", "kernel", "wall_time_s", "max_abs_diff"], rows))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="so3stab", description="Spherical convolution and stability experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="ray-cast an OFF mesh or synthesise a signal")
    s.add_argument("mesh", nargs="?")
    s.add_argument("output")
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--center", default="0,0,0")
    s.add_argument("--synth", choices=["constant", "zonal_gaussian", "gaussian_mixture", "tetra_distance"])
    s.add_argument("--param", action="append", default=[], metavar="KEY=JSON")
    s.add_argument("--diagnostics")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("rotate", help="resample a signal under a rotation")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--euler", help="phi,theta,rho in radians (ZYZ)")
    s.add_argument("--axis-angle", help="x,y,z,beta with beta in radians")
    s.add_argument("--inverse", action="store_true")
    s.set_defaults(func=cmd_rotate)

    s = sub.add_parser("perturb", help="apply a rotation diffeomorphism")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--type", type=int)
    s.add_argument("--smooth", type=float, metavar="EPS")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--field-out")
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("conv", help="apply a filter bank")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--filter", required=True, help="filter bank JSON")
    s.add_argument("--kernel", choices=["zonal", "direct"], default="zonal")
    s.add_argument("--n-rho", type=int)
    s.set_defaults(func=cmd_conv)

    s = sub.add_parser("forward", help="run a spherical CNN")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--network")
    s.add_argument("--features", default="1,4,4,8")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--target-ch", type=float, default=1.0)
    s.add_argument("--save-network")
    s.add_argument("--kernel", choices=["zonal", "direct"], default="zonal")
    s.add_argument("--n-rho", type=int)
    s.set_defaults(func=cmd_forward)

    for name, fn, hlp in (
        ("check-equivariance", cmd_check_equivariance, "compare rotate-then-apply with apply-then-rotate"),
        ("check-stability", cmd_check_stability, "measure stability under smooth and typed diffeomorphisms"),
    ):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--config")
        s.add_argument("--set", action="append", default=[], metavar="KEY=JSON")
        s.add_argument("--out-csv")
        s.add_argument("--out-json")
        s.set_defaults(func=fn)
        if name == "check-equivariance":
            s.add_argument("--input")
            s.add_argument("--degrees", default="45,90,135")
            s.add_argument("--axis", default="0,0,1")
            s.add_argument("--euler", action="append", help="extra ZYZ rotation phi,theta,rho")
            s.add_argument("--no-distance", action="store_true")

    s = sub.add_parser("bench", help="time direct vs zonal convolution")
    s.add_argument("--resolutions", default="16,24,32")
    s.add_argument("--n-rho", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--out-csv")
    s.set_defaults(func=cmd_bench)
    return p


VALIDATION_ERRORS = (SchemaError, PreconditionError, SignalFormatError, MeshFormatError, ValueError, OSError, KeyError)
NUMERIC_ERRORS = (NumericError, RescaleError, FloatingPointError, ArithmeticError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        return a.func(a)
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
