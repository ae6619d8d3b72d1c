import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from so3stab.conv import (
    FilterBank,
    GriddedFilter,
    ParametricFilter,
    conv,
    conv_bank,
    conv_direct,
    conv_zonal,
    filter_from_json,
    lipschitz_constant,
    load_bank,
    save_bank,
    zonal_profile,
)
from so3stab.errors import SchemaError
from so3stab.metrics import relative_rmse
from so3stab.scnn import random_filter
from so3stab.so3 import SO3Quadrature, from_axis_angle, from_euler, random_rotations, rotate_signal
from so3stab.sphere import EquiangularGrid, SphericalSignal, from_function, norm

from conftest import smooth, unit_vectors


def rand_filter(seed, target=1.0):
    return random_filter(np.random.default_rng(seed), target)


# --- Lipschitz constants ----------------------------------------------------------


def test_single_unit_gaussian_constant():
    for c in ([0, 0, 1], [1, 2, 3]):
        assert lipschitz_constant(ParametricFilter.single(1.0, c, 1.0)) == pytest.approx(1.0)
    narrow = ParametricFilter.single(2.0, [0, 0, 1], 0.25)
    assert lipschitz_constant(narrow) == pytest.approx(2.0 / (0.25 * math.sqrt(math.e)))
    assert lipschitz_constant(ParametricFilter.zero()) == 0.0


def test_parametric_constant_bounds_monte_carlo_estimate():
    rng = np.random.default_rng(0)
    for seed in range(50):
        h = random_filter(np.random.default_rng(seed), 1.0, width_range=(0.2, 1.5))
        ch = lipschitz_constant(h)
        u, v = unit_vectors(rng, 10_000), unit_vectors(rng, 10_000)
        # also probe near-coincident pairs, where the quotient approaches the slope
        w = u + 1e-3 * unit_vectors(rng, 10_000)
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        hu = h.evaluate(u)
        assert np.abs(hu).max() <= ch
        for other in (v, w):
            q = np.abs(hu - h.evaluate(other)) / np.linalg.norm(u - other, axis=1)
            assert q.max() <= ch


def test_gridded_estimate_dominates_nodes_and_neighbours():
    g = EquiangularGrid(12, 12)
    x = smooth(g, seed=2)
    h = GriddedFilter(x)
    ch = lipschitz_constant(h)
    v = x.values[0]
    p = g.xyz()
    assert ch >= np.abs(v).max()
    dphi = np.abs(v - np.roll(v, 1, axis=1)) / np.linalg.norm(p - np.roll(p, 1, axis=1), axis=-1)
    dth = np.abs(np.diff(v, axis=0)) / np.linalg.norm(np.diff(p, axis=0), axis=-1)
    assert ch >= max(dphi.max(), dth.max())


def test_filter_validation():
    with pytest.raises(ValueError):
        ParametricFilter.single(1.0, [0, 0, 1], 0.0)
    with pytest.raises(ValueError):
        ParametricFilter.single(1.0, [0, 0, 0], 1.0)


# --- direct kernel ------------------------------------------------------------------


def test_constant_filter_constant_signal(grid16):
    q = SO3Quadrature(16, 16, 8)
    one = SphericalSignal(grid16, np.ones(grid16.shape))
    for h, c in ((GriddedFilter.constant(2.5), 2.5), (ParametricFilter.single(3.0, [0, 0, 1], 1e6), 3.0)):
        np.testing.assert_allclose(conv_direct(h, one, q).values, c, atol=1e-11)
    assert np.all(conv_direct(ParametricFilter.zero(), smooth(grid16), q).values == 0.0)


def test_zonal_filter_on_constant_signal():
    s = 0.7
    h = ParametricFilter.single(1.0, [0, 0, 1], s)
    # Haar mean of a north-pole Gaussian: (1/2) int exp((cos g - 1)/s^2) sin g dg
    oracle = s * s / 2 * (1 - math.exp(-2 / s**2))
    spread = []
    for n in (16, 32, 64):
        g = EquiangularGrid(n, n)
        y = conv_direct(h, SphericalSignal(g, np.ones(g.shape)), SO3Quadrature(n, n, 4)).values[0]
        assert np.ptp(y, axis=1).max() <= 1e-12  # exact along each latitude
        assert y.mean() == pytest.approx(oracle, rel=3e-3)
        spread.append(np.ptp(y))
    # across latitudes the product rule is only second-order accurate
    assert spread[1] <= 2e-4
    assert spread[0] / spread[1] >= 3.5 and spread[1] / spread[2] >= 3.5


def test_direct_matches_literal_definition(grid16):
    x = smooth(grid16, seed=1)
    h = rand_filter(3)
    q = SO3Quadrature(16, 16, 4)
    y = conv_direct(h, x, q).values[0]
    i, j = 4, 9
    u = grid16.xyz()[i, j]
    total = 0.0
    for r, w in q.nodes():
        v = r.apply_xyz([0, 0, 1.0])
        th, ph = math.acos(np.clip(v[2], -1, 1)), math.atan2(v[1], v[0]) % (2 * math.pi)
        from so3stab.sphere import sample

        total += w * h.evaluate(r.matrix.T @ u) * sample(x, th, ph, 0)
    assert y[i, j] == pytest.approx(total, abs=1e-12)


# --- zonal profile and fast kernel -----------------------------------------------------------


def test_profile_of_zonal_filter_is_the_filter():
    q = SO3Quadrature(8, 8, 16)
    h = ParametricFilter.single(1.3, [0, 0, 1], 0.6)
    gam, prof = zonal_profile(h, q)
    np.testing.assert_allclose(prof, 1.3 * np.exp((np.cos(gam) - 1) / 0.36), rtol=0, atol=1e-15)
    _, prof_c = zonal_profile(GriddedFilter.constant(0.4), q)
    np.testing.assert_allclose(prof_c, 0.4, atol=1e-15)


def test_profile_matches_rho_average():
    q = SO3Quadrature(8, 8, 12)
    h = rand_filter(5)
    rng = np.random.default_rng(1)
    gam = rng.uniform(0, math.pi, 100)
    _, prof = zonal_profile(h, q, gammas=gam)
    for g, p in zip(gam, prof):
        pts = [[math.sin(g) * math.cos(r), math.sin(g) * math.sin(r), math.cos(g)] for r in q.rhos]
        assert p == pytest.approx(np.mean(h.evaluate(np.array(pts))), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_zonal_agrees_with_direct_16(seed):
    g = EquiangularGrid(16, 16)
    q = SO3Quadrature(16, 16, 16)
    x, h = smooth(g, seed=seed), rand_filter(100 + seed)
    d = conv_direct(h, x, q).values
    z = conv_zonal(h, x, q).values
    assert np.max(np.abs(d - z)) <= 1e-9


def test_zonal_general_path_agrees_with_direct():
    g = EquiangularGrid(12, 16)
    q = SO3Quadrature(10, 14, 16)  # nodes off the grid
    x, h = smooth(g, seed=7), rand_filter(8)
    assert not q.matches(g)
    assert np.max(np.abs(conv_direct(h, x, q).values - conv_zonal(h, x, q).values)) <= 1e-9


def test_zonal_constants(grid16):
    q = SO3Quadrature(16, 16, 16)
    one = SphericalSignal(grid16, np.ones(grid16.shape))
    np.testing.assert_allclose(conv_zonal(GriddedFilter.constant(-1.5), one, q).values, -1.5, atol=1e-12)


def test_conv_rejects_multi_feature_and_unknown_kernel(grid16):
    q = SO3Quadrature(16, 16, 8)
    x2 = smooth(grid16, features=2)
    with pytest.raises(ValueError):
        conv(rand_filter(0), x2, q)
    with pytest.raises(ValueError):
        conv(rand_filter(0), x2.feature(0), q, kernel="spectral")


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 100))
def test_linearity(alpha, beta, seed):
    g = EquiangularGrid(12, 12)
    q = SO3Quadrature(12, 12, 16)
    x, z, h = smooth(g, seed=seed), smooth(g, seed=seed + 1), rand_filter(seed)
    lhs = conv(h, x * alpha + z * beta, q).values
    rhs = alpha * conv(h, x, q).values + beta * conv(h, z, q).values
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * (1 + abs(alpha) + abs(beta))


# --- banks --------------------------------------------------------------------------


def test_bank_reductions(grid16):
    q = SO3Quadrature(16, 16, 16)
    h = rand_filter(1)
    x = smooth(grid16, seed=2)
    np.testing.assert_array_equal(conv_bank(FilterBank.single(h), x, q).values, conv(h, x, q).values)

    x2 = SphericalSignal(grid16, np.stack([x.values[0], smooth(grid16, seed=3).values[0]]))
    hs = [rand_filter(10), rand_filter(11)]
    bank = FilterBank(((hs[0], hs[1]), (ParametricFilter.zero(), ParametricFilter.zero())))
    solo = FilterBank(((hs[0], hs[1]),))
    for kernel in ("zonal", "direct"):
        np.testing.assert_allclose(
            conv_bank(bank, x2, q, kernel).values, conv_bank(solo, x, q, kernel).values, atol=1e-14
        )
    with pytest.raises(ValueError):
        conv_bank(bank, x, q)


def test_bank_norm_bound_random_cases(grid16):
    q = SO3Quadrature(16, 16, 16)
    rng = np.random.default_rng(4)
    for case in range(100):
        F = int(rng.integers(1, 4))
        bank = FilterBank(tuple((random_filter(rng, float(rng.uniform(0.2, 2))),) for _ in range(F)))
        x = smooth(grid16, seed=case, features=F)
        assert norm(conv_bank(bank, x, q)) <= bank.lipschitz_constant() * norm(x)


def test_norm_bound_random_single_filters(grid16):
    q = SO3Quadrature(16, 16, 16)
    for seed in range(30):
        h = rand_filter(seed, target=float(np.random.default_rng(seed).uniform(0.1, 3)))
        x = smooth(grid16, seed=seed + 500)
        assert norm(conv(h, x, q)) <= lipschitz_constant(h) * norm(x)


def test_norm_bound_counterexample_under_angle_space_norm():
    # near-constant filter, C_h = 1; x = sin(theta) maximises the sin-weighted mean per unit norm
    g = EquiangularGrid(32, 32)
    q = SO3Quadrature(32, 32, 16)
    h = ParametricFilter.single(1.0, [0, 0, 1], 100.0)
    x = from_function(g, lambda th, ph: np.sin(th))
    ratio = norm(conv(h, x, q)) / norm(x)
    assert lipschitz_constant(h) == 1.0
    assert ratio == pytest.approx(math.pi * math.sqrt(2) / 4, abs=2e-3)
    assert ratio > 1.1


# --- equivariance -------------------------------------------------------------------------


def test_equivariance_random_rotations_32():
    g = EquiangularGrid(32, 32)
    q = SO3Quadrature(32, 32, 16)
    x, h = smooth(g, seed=9), rand_filter(9)
    hx = conv(h, x, q)
    errs = [relative_rmse(rotate_signal(hx, r), conv(h, rotate_signal(x, r), q)) for r in random_rotations(20, 2)]
    assert max(errs) <= 3e-2


@pytest.mark.parametrize("kernel", ["zonal", "direct"])
def test_equivariance_exact_for_grid_rolls(kernel):
    g = EquiangularGrid(16, 16)
    q = SO3Quadrature(16, 16, 8)
    x, h = smooth(g, seed=10), rand_filter(10)
    hx = conv(h, x, q, kernel)
    for k in (1, 4, 11):
        r = from_axis_angle([0, 0, 1], k * g.dphi)
        assert relative_rmse(rotate_signal(hx, r), conv(h, rotate_signal(x, r), q, kernel)) <= 1e-10


# --- serialisation ----------------------------------------------------------------------------


def test_bank_json_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    g = EquiangularGrid(4, 5)
    bank = FilterBank(
        ((random_filter(rng, 1.0), GriddedFilter(smooth(g))), (ParametricFilter.zero(), random_filter(rng, 2.0)))
    )
    save_bank(bank, tmp_path / "b.json")
    back = load_bank(tmp_path / "b.json")
    assert back.to_json() == bank.to_json()
    doc = json.loads((tmp_path / "b.json").read_text())
    assert doc["F"] == 2 and doc["G"] == 2 and doc["filters"][0][0]["type"] == "parametric"


@pytest.mark.parametrize(
    "doc,path",
    [
        ({"type": "parametric"}, "$.components"),
        ({"type": "parametric", "components": [{"a": 1, "c": [0, 0, 1]}]}, "$.components[0].s"),
        ({"type": "wavelet"}, "$.type"),
        ({"type": "gridded", "n_theta": 2, "n_phi": 2}, "$.values"),
    ],
)
def test_filter_schema_errors_name_the_path(doc, path):
    with pytest.raises(SchemaError) as err:
        filter_from_json(doc)
    assert err.value.path == path


def test_bank_schema_error_path():
    with pytest.raises(SchemaError) as err:
        FilterBank.from_json({"F": 1, "G": 2, "filters": [[{"type": "parametric", "components": []}]]})
    assert err.value.path == "$.filters[0]"
