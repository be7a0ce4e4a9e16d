import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate
from scipy.linalg import expm as scipy_expm

from heatpath.bundles import (
    GENERATOR,
    constant_field,
    line_bundle,
    ordered_exponential,
    parallel_transport,
    parse_bundle,
    rank2_bundle,
    segment_exp,
    tangent_s2_bundle,
    transport_ode_oracle,
    unordered_exponential,
)
from heatpath.errors import ConfigError, CutLocusError
from heatpath.geometry import Circle, Sphere
from heatpath.pathint import Partition

S1, S2 = Circle(1.0), Sphere(1.0)


def _bundles():
    return [line_bundle(S1, "cos"), rank2_bundle(S1, "half-skew", "a4"), rank2_bundle(S1, "cos-skew", "a4"),
            tangent_s2_bundle(S2)]


@pytest.mark.parametrize("B", _bundles(), ids=lambda B: f"{B.manifold.spec}-{B.spec}")
def test_transport_at_coincident_parameters_is_identity(B):
    x, y = B.manifold.point([0.3] * B.manifold.chart_dim), B.manifold.point([1.1] * B.manifold.chart_dim)
    T = parallel_transport(B, x, y, 0.4, 0.4).matrix
    assert_allclose(T, np.eye(B.rank), atol=1e-14)


@pytest.mark.parametrize("B", _bundles(), ids=lambda B: f"{B.manifold.spec}-{B.spec}")
def test_transport_is_unitary_and_matches_ode_oracle(B):
    x, y = B.manifold.point([0.3] * B.manifold.chart_dim), B.manifold.point([1.4] * B.manifold.chart_dim)
    T = parallel_transport(B, x, y).matrix
    assert_allclose(T.conj().T @ T, np.eye(B.rank), atol=1e-10)
    assert_allclose(T, transport_ode_oracle(B, x, y), atol=1e-8)


def test_constant_skew_connection_closed_form():
    B = rank2_bundle(S1, "half-skew", "zero")
    ell = 1.3
    T = parallel_transport(B, np.array([0.2]), np.array([0.2 + ell])).matrix
    assert_allclose(T, scipy_expm(-0.5 * ell * GENERATOR), atol=1e-12)


def test_equatorial_loop_holonomy_is_trivial():
    B = tangent_s2_bundle(S2)
    eq = [np.array([np.pi / 2, k * np.pi / 2]) for k in range(5)]
    H = np.eye(2)
    for a, b in zip(eq[:-1], eq[1:]):
        H = parallel_transport(B, a, b).matrix @ H
    assert_allclose(H, np.eye(2), atol=1e-8)


def test_triangle_holonomy_angle_is_enclosed_area():
    # octant triangle pole -> (pi/2, 0) -> (pi/2, pi/2) -> pole encloses area pi/2
    B = tangent_s2_bundle(S2)
    pts = [np.array([0.0, 0.0]), np.array([np.pi / 2, 0.0]), np.array([np.pi / 2, np.pi / 2]),
           np.array([0.0, 0.0])]
    H = np.eye(2)
    for a, b in zip(pts[:-1], pts[1:]):
        H = parallel_transport(B, a, b).matrix @ H
    assert_allclose(H.conj().T @ H, np.eye(2), atol=1e-10)
    assert_allclose(np.arccos(np.clip(np.trace(H).real / 2, -1, 1)), np.pi / 2, atol=1e-8)


def test_transport_on_cut_locus_raises():
    with pytest.raises(CutLocusError):
        parallel_transport(rank2_bundle(S1), np.array([0.0]), np.array([np.pi]))


def test_segment_exp_with_zero_field_is_transport():
    B = rank2_bundle(S1, "half-skew", "a4")
    x, y = np.array([0.1]), np.array([0.9])
    zero = lambda pts: np.zeros(pts.shape[:-1] + (2, 2))
    assert_allclose(segment_exp(B, x, y, zero), parallel_transport(B, x, y).matrix, atol=1e-12)


def test_segment_exp_of_scalar_field_matches_direct_quadrature():
    B = rank2_bundle(S1, "half-skew", "zero")
    x, y = np.array([0.1]), np.array([1.2])
    w = lambda th: np.sin(3 * th) + th**2
    W = lambda pts: w(pts[..., 0])[..., None, None] * np.eye(2)
    integral, _ = integrate.quad(lambda s: w(0.1 + s * 1.1), 0, 1, epsabs=1e-14)
    expected = parallel_transport(B, x, y).matrix * np.exp(integral)
    assert_allclose(segment_exp(B, x, y, W), expected, atol=1e-10)


def test_ordered_exponential_with_zero_field_is_polygon_transport():
    B = rank2_bundle(S1, "half-skew", "a4")
    P = Partition((0.0, 0.3, 1.0))
    v = np.array([[0.0], [0.8], [1.5]])
    zero = lambda pts: np.zeros(pts.shape[:-1] + (2, 2))
    total = parallel_transport(B, v[1], v[2]).matrix @ parallel_transport(B, v[0], v[1]).matrix
    assert_allclose(ordered_exponential(B, P, v, zero), total, atol=1e-12)


def test_scalar_field_ordered_exponential_is_partition_independent():
    B = rank2_bundle(S1, "half-skew", "zero")
    W = lambda pts: np.cos(pts[..., 0])[..., None, None] * np.eye(2)
    x, y = 0.2, 1.4
    results = []
    for P in (Partition.uniform(2), Partition((0.0, 0.15, 0.5, 1.0))):
        v = (x + (y - x) * np.asarray(P.breakpoints))[:, None]
        results.append(ordered_exponential(B, P, v, W, quad_nodes=16))
    assert_allclose(results[0], results[1], atol=1e-10)
    # and both equal tau * exp(int_0^1 w(gamma(s)) ds)
    integral = (np.sin(y) - np.sin(x)) / (y - x)
    expected = parallel_transport(B, np.array([x]), np.array([y])).matrix * np.exp(integral)
    assert_allclose(results[0], expected, atol=1e-10)


def test_noncommuting_piecewise_constant_fields_are_ordered():
    B = rank2_bundle(S1, "zero", "zero")
    W1 = np.array([[1.0, 0.0], [0.0, -1.0]])
    W2 = np.array([[0.0, 1.0], [1.0, 0.0]])
    W = lambda pts: np.where((pts[..., 0] < 0.4)[..., None, None], W1, W2)
    P = Partition((0.0, 0.4, 1.0))
    v = np.array([[0.0], [0.4], [1.0]])
    ordered = ordered_exponential(B, P, v, W)
    assert_allclose(ordered, scipy_expm(0.6 * W2) @ scipy_expm(0.4 * W1), atol=1e-12)
    unordered = unordered_exponential(B, P, v, W)
    assert_allclose(unordered, scipy_expm(0.4 * W1 + 0.6 * W2), atol=1e-12)
    assert np.linalg.norm(ordered - unordered) > 1e-2


def test_potentials_are_hermitian():
    g = S1.quadrature_grid(32).nodes
    for B in _bundles()[:3]:
        V = B.V(g)
        assert np.max(np.abs(V - np.conj(np.swapaxes(V, -1, -2)))) <= 1e-12


@pytest.mark.parametrize("spec,kind,rank", [("line", "line", 1), ("line:cos", "line", 1),
                                            ("rank2:half-skew:a4", "rank2", 2)])
def test_parse_bundle(spec, kind, rank):
    B = parse_bundle(spec, S1)
    assert (B.kind, B.rank, B.spec) == (kind, rank, spec)


def test_parse_bundle_errors():
    with pytest.raises(ValueError):
        parse_bundle("rank2:nope:a4", S1)
    with pytest.raises(ValueError):
        parse_bundle("mobius", S1)
    with pytest.raises(ConfigError):
        parse_bundle("rank2:half-skew:a4", S2)
    with pytest.raises(ConfigError):
        parse_bundle("tangent-s2", S1)


def test_constant_field_detects_scalars():
    assert constant_field("c", 2.0 * np.eye(2)).scalar
    assert not constant_field("d", np.diag([1.0, 2.0])).scalar
