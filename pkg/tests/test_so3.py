import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from so3stab.sphere import EquiangularGrid, SphericalPoint, from_cartesian, norm, to_cartesian
from so3stab.so3 import (
    Rotation,
    SO3Quadrature,
    apply,
    compose,
    default_quadrature,
    from_axis_angle,
    from_euler,
    haar_quadrature,
    identity,
    inverse,
    random_rotations,
    rotate_signal,
    rotate_signal_batch,
    shortest_arc,
)
from so3stab.metrics import relative_rmse

from conftest import smooth, unit_vectors

angles = st.floats(-10, 10, allow_nan=False)
quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3)


def rot(q):
    return Rotation(tuple(q))


def rz(b):
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def ry(b):
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


@given(angles, st.floats(0, math.pi), angles)
def test_euler_matches_matrix_product(phi, theta, rho):
    np.testing.assert_allclose(from_euler(phi, theta, rho).matrix, rz(phi) @ ry(theta) @ rz(rho), atol=1e-12)


def test_euler_example_moves_north_pole_to_equator():
    p = apply(from_euler(0, math.pi / 2, 0), SphericalPoint(0.0, 0.0))
    assert p.theta == pytest.approx(math.pi / 2, abs=1e-12)
    assert min(p.phi, 2 * math.pi - p.phi) < 1e-12


@given(quats)
def test_matrix_is_proper_orthogonal(q):
    m = rot(q).matrix
    np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(m) - 1.0) < 1e-10
    assert abs(np.linalg.norm(rot(q).q) - 1.0) < 1e-12


def test_group_axioms_on_random_rotations():
    rs = random_rotations(300, seed=5)
    e = identity()
    for a, b, c in zip(rs[:100], rs[100:200], rs[200:]):
        assert compose(a, e).distance(a) < 1e-12
        assert compose(e, a).distance(a) < 1e-12
        assert compose(a, inverse(a)).distance(e) < 1e-12
        assert compose(compose(a, b), c).distance(compose(a, compose(b, c))) < 1e-12
        # closure, and composition order: (a o b) acts as b first
        np.testing.assert_allclose(compose(a, b).matrix, a.matrix @ b.matrix, atol=1e-12)


def test_zero_axis_rejected():
    with pytest.raises(ValueError):
        from_axis_angle([0, 0, 0], 1.0)


@given(st.floats(0.01, math.pi - 0.01), st.floats(0, 2 * math.pi - 1e-9), st.floats(-7, 7))
def test_azimuthal_rotation_shifts_phi(theta, phi, beta):
    p = apply(from_axis_angle([0, 0, 1], beta), SphericalPoint.canonical(theta, phi))
    assert p.theta == pytest.approx(theta, abs=1e-12)
    d = (p.phi - phi - beta) % (2 * math.pi)
    assert min(d, 2 * math.pi - d) < 1e-10


@given(quats)
def test_axis_is_fixed_point(q):
    r = rot(q)
    axis, beta = r.axis_angle()
    np.testing.assert_allclose(r.apply_xyz(axis), axis, atol=1e-12)
    assert 0 <= beta <= math.pi


@given(st.floats(0, math.pi))
def test_rotation_about_x_moves_pole_by_beta(beta):
    u = to_cartesian(apply(from_axis_angle([1, 0, 0], beta), SphericalPoint(0.0, 0.0)))
    assert math.atan2(math.hypot(u[0], u[1]), u[2]) == pytest.approx(beta, abs=1e-12)


def test_apply_is_an_isometry():
    rng = np.random.default_rng(2)
    u, v = unit_vectors(rng, 200), unit_vectors(rng, 200)
    for r, a, b in zip(random_rotations(200, 3), u, v):
        ra, rb = r.apply_xyz(a), r.apply_xyz(b)
        ang = lambda x, y: math.atan2(np.linalg.norm(np.cross(x, y)), x @ y)
        assert ang(ra, rb) == pytest.approx(ang(a, b), abs=1e-12)


def test_apply_agrees_with_matrix():
    for r in random_rotations(50, 9):
        p = SphericalPoint.canonical(1.1, 4.0)
        expected = from_cartesian(r.matrix @ to_cartesian(p))
        assert apply(r, p) == expected


def test_euler_round_trip_away_from_gimbal_lock():
    rng = np.random.default_rng(11)
    for _ in range(300):
        phi, theta, rho = rng.uniform(0, 2 * math.pi), rng.uniform(0.1, math.pi - 0.1), rng.uniform(0, 2 * math.pi)
        r = from_euler(phi, theta, rho)
        assert from_euler(*r.euler_angles()).distance(r) < 1e-10
        np.testing.assert_allclose(r.euler_angles(), (phi, theta, rho), atol=1e-9)


@pytest.mark.parametrize("theta", [0.0, math.pi])
def test_gimbal_lock_convention(theta):
    r = from_euler(0.7, theta, 0.4)
    phi2, th2, rho2 = r.euler_angles()
    assert rho2 == 0.0 and th2 == theta
    assert from_euler(phi2, th2, rho2).distance(r) < 1e-12


def test_to_json_views():
    r = from_axis_angle([0, 0, 2], 0.5)
    j = r.to_json()
    np.testing.assert_allclose(j["axis"], [0, 0, 1])
    assert j["beta"] == pytest.approx(0.5)
    assert from_euler(*j["euler_zyz"]).distance(r) < 1e-12


def test_from_matrix_inverts_matrix_view():
    extra = [from_axis_angle(a, math.pi) for a in ([1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0])]
    for r in random_rotations(200, 4) + extra:
        assert Rotation.from_matrix(r.matrix).distance(r) < 1e-12


# --- shortest arc ------------------------------------------------------------


def test_shortest_arc_identity_and_antipode():
    assert shortest_arc(SphericalPoint(0.0, 0.0)).distance(identity()) < 1e-15
    s = shortest_arc(SphericalPoint(math.pi, 0.0))
    axis, beta = s.axis_angle()
    assert beta == pytest.approx(math.pi)
    np.testing.assert_allclose(np.abs(axis), [1, 0, 0], atol=1e-12)


def test_shortest_arc_to_equator():
    s = shortest_arc(SphericalPoint(math.pi / 2, 0.0))
    np.testing.assert_allclose(s.apply_xyz([0, 0, 1]), [1, 0, 0], atol=1e-12)
    axis, beta = s.axis_angle()
    np.testing.assert_allclose(axis, [0, 1, 0], atol=1e-12)  # z x x = +y
    assert beta == pytest.approx(math.pi / 2)


def test_shortest_arc_random_points():
    for u in unit_vectors(np.random.default_rng(6), 1000):
        s = shortest_arc(from_cartesian(u))
        np.testing.assert_allclose(s.apply_xyz([0, 0, 1]), u, atol=1e-12)
        assert s.angle == pytest.approx(math.atan2(math.hypot(u[0], u[1]), u[2]), abs=1e-12)
        axis, _ = s.axis_angle()
        assert abs(axis[2]) < 1e-12  # axis lies in the equatorial plane


# --- quadrature ----------------------------------------------------------------


@pytest.mark.parametrize("res", [(8, 8, 8), (32, 8, 8), (5, 7, 3)])
def test_haar_weights(res):
    q = haar_quadrature(*res)
    w = q.weights
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.all(w > 0)
    ratio = w[:, 0, 0] / np.sin(q.thetas)
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)
    assert q.integrate(lambda p, t, r: np.ones_like(t)) == pytest.approx(1.0, abs=1e-12)


def test_haar_cos_squared():
    q = haar_quadrature(32, 8, 8)
    assert abs(q.integrate(lambda p, t, r: np.cos(t) ** 2) - 1 / 3) <= 1e-3


def test_quadrature_rejects_small_resolution():
    with pytest.raises(ValueError):
        SO3Quadrature(1, 4, 4)


def test_quadrature_nodes_hit_grid_points():
    g = EquiangularGrid(6, 8)
    q = SO3Quadrature(6, 8, 4)
    pts = np.einsum("...ij,j->...i", np.stack([r.matrix for r, _ in q.nodes()]), [0, 0, 1.0]).reshape(6, 8, 4, 3)
    np.testing.assert_allclose(pts[:, :, 0], g.xyz(), atol=1e-12)
    assert q.matches(g) and default_quadrature(g).n_rho == 16


# --- signal rotation -------------------------------------------------------------


def test_rotate_identity_is_exact(grid32):
    x = smooth(grid32)
    assert np.array_equal(rotate_signal(x, identity()).values, x.values)


@given(st.integers(-40, 40))
def test_grid_multiple_rotation_is_a_roll(k):
    g = EquiangularGrid(8, 16)
    x = smooth(g, seed=1)
    y = rotate_signal(x, from_axis_angle([0, 0, 1], k * g.dphi))
    assert np.array_equal(y.values, np.roll(x.values, -k, axis=2))
    assert norm(y) == norm(x) or abs(norm(y) - norm(x)) < 1e-15


def test_rotate_matches_definition(grid16):
    x = smooth(grid16, seed=2)
    r = from_euler(0.3, 0.9, 1.7)
    y = rotate_signal(x, r)
    i, j = 5, 3
    p = apply(r, SphericalPoint(grid16.theta[i], grid16.phi[j]))
    from so3stab.sphere import sample

    assert y.values[0, i, j] == pytest.approx(sample(x, p.theta, p.phi, 0), abs=1e-12)


def test_rotate_inverse_round_trip(grid32):
    x = smooth(grid32, seed=3)
    for r in random_rotations(10, 8):
        back = rotate_signal(rotate_signal(x, r), inverse(r))
        assert relative_rmse(x, back) <= 2e-2


def _surface_norm(x):
    th, _ = x.grid.mesh()
    return float(np.sqrt(np.sum(x.values**2 * np.sin(th))))


def test_rotation_preserves_surface_measure_norm(grid32):
    x = smooth(grid32, seed=3)
    for r in random_rotations(10, 8):
        assert abs(_surface_norm(rotate_signal(x, r)) - _surface_norm(x)) <= 3e-2 * _surface_norm(x)


@pytest.mark.xfail(
    strict=True,
    reason="the angle-space measure dtheta dphi is not rotation invariant; the gap stays near 7% "
    "as the grid is refined, so it is not an interpolation error",
)
def test_rotation_preserves_angle_space_norm(grid32):
    x = smooth(grid32, seed=3)
    for r in random_rotations(10, 8):
        assert abs(norm(rotate_signal(x, r)) - norm(x)) <= 3e-2 * norm(x)


def test_angle_space_norm_gap_does_not_shrink_with_resolution():
    r = random_rotations(10, 8)[0]
    gaps = []
    for n in (32, 64):
        x = smooth(EquiangularGrid(n, n), seed=3)
        gaps.append(abs(norm(rotate_signal(x, r)) - norm(x)) / norm(x))
    assert gaps[1] > 0.5 * gaps[0] > 1e-3


def test_batch_rotation_matches_single(grid16):
    x = smooth(grid16, seed=4, features=2)
    rs = random_rotations(5, 1)
    batch = rotate_signal_batch(x, np.stack([r.q for r in rs]))
    for b, r in enumerate(rs):
        np.testing.assert_allclose(batch[b], rotate_signal(x, r).values, atol=1e-14)
