import numpy as np
import pytest
from numpy.testing import assert_allclose

from heatpath.errors import CutLocusError
from heatpath.geometry import Circle, FlatTorus, Sphere, parse_manifold

S1, T2, S2 = Circle(1.0), FlatTorus(1.0, 1.0), Sphere(1.0)
MODELS = [S1, T2, S2, Circle(2.5), FlatTorus(1.0, 2.0), Sphere(2.0)]


def test_distance_examples():
    assert_allclose(S1.distance([0.0], [np.pi]), np.pi)
    assert_allclose(T2.distance([0.0, 0.0], [0.75, 0.0]), 0.25)
    assert_allclose(S2.distance([0.0, 0.0], [np.pi / 2, 0.0]), np.pi / 2)


def test_sphere_distance_matches_arccos_of_unit_vectors():
    rng = np.random.default_rng(1)
    x, y = S2.sample_uniform(rng, 200), S2.sample_uniform(rng, 200)
    p = np.stack([np.sin(x[:, 0]) * np.cos(x[:, 1]), np.sin(x[:, 0]) * np.sin(x[:, 1]), np.cos(x[:, 0])], -1)
    q = np.stack([np.sin(y[:, 0]) * np.cos(y[:, 1]), np.sin(y[:, 0]) * np.sin(y[:, 1]), np.cos(y[:, 0])], -1)
    assert_allclose(S2.distance(x, y), np.arccos(np.clip(np.sum(p * q, -1), -1, 1)), atol=1e-7)


@pytest.mark.parametrize("M", MODELS, ids=lambda M: M.spec)
def test_geodesic_endpoints(M):
    rng = np.random.default_rng(2)
    x, y = M.sample_uniform(rng), M.sample_uniform(rng)
    assert_allclose(M.distance(M.geodesic_point(x, y, 0.0), x), 0.0, atol=1e-12)
    assert_allclose(M.distance(M.geodesic_point(x, y, 1.0), y), 0.0, atol=1e-12)


@pytest.mark.parametrize("M", MODELS, ids=lambda M: M.spec)
def test_geodesic_is_constant_speed_and_minimizing(M):
    rng = np.random.default_rng(3)
    x, y = M.sample_uniform(rng), M.sample_uniform(rng)
    d = M.distance(x, y)
    for s in (0.2, 0.5, 0.9):
        g = M.geodesic_point(x, y, s)
        assert_allclose(M.distance(x, g), s * d, atol=1e-10)
        assert_allclose(M.distance(g, y), (1 - s) * d, atol=1e-10)


def test_geodesic_midpoint_examples():
    assert_allclose(S1.geodesic_point([0.0], [np.pi / 2], 0.5), [np.pi / 4])
    assert_allclose(S2.geodesic_point([np.pi / 2, 0.0], [np.pi / 2, np.pi / 2], 0.5), [np.pi / 2, np.pi / 4],
                    atol=1e-14)


def test_geodesic_on_cut_locus_raises():
    with pytest.raises(CutLocusError):
        S2.geodesic_point([0.3, 0.2], [np.pi - 0.3, 0.2 + np.pi], 0.5)


def test_cut_locus_examples():
    assert S2.cut_locus_predicate(np.array([0.4, 1.0]), np.array([np.pi - 0.4, 1.0 + np.pi]))
    assert not S1.cut_locus_predicate(np.array([0.7]), np.array([0.7 + np.pi / 2]))
    assert T2.cut_locus_predicate(np.array([0.0, 0.0]), np.array([0.5, 0.3]))


def test_quadrature_examples():
    g = S1.quadrature_grid(8)
    assert len(g) == 8
    assert_allclose(g.weights, np.pi / 4)
    assert_allclose(g.total, 2 * np.pi)
    assert abs(S2.quadrature_grid(16).total - 4 * np.pi) <= 1e-12
    g = T2.quadrature_grid(10)
    assert len(g) == 100
    assert_allclose(g.total, 1.0)


def test_sphere_quadrature_integrates_spherical_polynomials():
    # int z^2 dA = 4 pi / 3, int x^2 y^2 dA = 4 pi / 15 on the unit sphere
    g = S2.quadrature_grid(12)
    th, ph = g.nodes[:, 0], g.nodes[:, 1]
    x, y, z = np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)
    assert_allclose(g.weights @ z**2, 4 * np.pi / 3, rtol=1e-13)
    assert_allclose(g.weights @ (x**2 * y**2), 4 * np.pi / 15, rtol=1e-13)


def test_scalar_curvature_examples():
    assert S1.scalar_curvature() == 0.0
    assert T2.scalar_curvature() == 0.0
    assert S2.scalar_curvature() == 2.0
    assert Sphere(2.0).scalar_curvature() == 0.5


def test_uniform_sampling_moments():
    rng = np.random.default_rng(0)
    th = S1.sample_uniform(rng, 10**6)[:, 0]
    assert abs(np.mean(np.exp(1j * th))) <= 3e-3
    z = np.cos(S2.sample_uniform(rng, 10**6)[:, 0])
    assert abs(np.mean(z)) <= 3e-3
    # z is uniform on [-1, 1] under area measure: second moment 1/3
    assert abs(np.mean(z**2) - 1.0 / 3.0) <= 3e-3


@pytest.mark.parametrize("M", [S1, T2, S2], ids=lambda M: M.spec)
def test_sampling_is_deterministic(M):
    a = M.sample_uniform(np.random.default_rng(42), 100)
    b = M.sample_uniform(np.random.default_rng(42), 100)
    assert np.array_equal(a, b)


def test_injectivity_radius_is_positive():
    for M in MODELS:
        assert M.injectivity_radius > 0


@pytest.mark.parametrize("spec,cls", [("s1:2", Circle), ("t2:1,2", FlatTorus), ("t2:3", FlatTorus),
                                      ("s2:1", Sphere)])
def test_parse_manifold(spec, cls):
    assert isinstance(parse_manifold(spec), cls)


@pytest.mark.parametrize("spec", ["s3:1", "s1:x", "s1:-1"])
def test_parse_manifold_rejects_bad_specs(spec):
    with pytest.raises(ValueError):
        parse_manifold(spec)


def test_point_rejects_wrong_dimension():
    with pytest.raises(ValueError):
        S2.point([0.1])
