import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import special

from heatpath import dirlim
from heatpath.dirlim import RefinementSchedule
from heatpath.errors import EvaluationError, NonPositiveOperatorError, ResolutionError

GROW = RefinementSchedule.geometric(1.0, 2.0, 64)
SHRINK = RefinementSchedule.geometric(0.5, 0.5, 40)


# --- schedules --------------------------------------------------------------

def test_schedule_parse_geometric_and_linear():
    s = RefinementSchedule.parse("geometric:1:2", 5)
    assert s.indices == (1.0, 2.0, 4.0, 8.0, 16.0)
    assert s.direction == "increasing"
    s = RefinementSchedule.parse("linear:10:-2", 4)
    assert s.indices == (10.0, 8.0, 6.0, 4.0)
    assert s.direction == "decreasing"


@pytest.mark.parametrize("text", ["geometric:1:1", "linear:1:0", "bogus:1:2", "geometric:1"])
def test_schedule_parse_rejects_non_cofinal_or_malformed(text):
    with pytest.raises(ValueError):
        RefinementSchedule.parse(text, 5)


def test_schedule_rejects_non_monotone_indices():
    with pytest.raises(ValueError):
        RefinementSchedule((1.0, 3.0, 2.0), "increasing")


# --- refine_until_converged -------------------------------------------------

def test_constant_net_converges_to_one():
    res = dirlim.refine_until_converged(lambda i: 1.0, GROW, tol=1e-8)
    assert res.converged
    assert res.limit == 1.0
    assert res.error_estimate <= res.tol
    assert len(res.values) == len(res.indices)


def test_growing_net_is_flagged_plus_infinity():
    a = 1.0

    def ev(T):
        return (1.0 / T) * ((T + 1) ** (a + 1) - 1) / (a + 1)

    res = dirlim.refine_until_converged(ev, GROW, tol=1e-6)
    assert not res.converged
    assert res.divergence_flag == "+infinity"


def test_alternating_net_is_oscillating():
    sched = RefinementSchedule.linear(1, 1, 30)
    res = dirlim.refine_until_converged(lambda k: 1.0 + (-1.0) ** k, sched, tol=1e-6)
    assert not res.converged
    assert res.divergence_flag == "oscillating"


def test_evaluator_failure_carries_index():
    def ev(i):
        if i >= 4:
            raise RuntimeError("boom")
        return 1.0 / i

    with pytest.raises(EvaluationError) as info:
        dirlim.refine_until_converged(ev, GROW, tol=1e-12)
    assert info.value.index == 4.0


def test_threaded_evaluation_matches_serial():
    f = lambda T: 1.0 + 1.0 / T
    a = dirlim.refine_until_converged(f, GROW, tol=1e-6)
    b = dirlim.refine_until_converged(f, GROW, tol=1e-6, workers=4)
    assert a.values[: len(b.values)] == b.values[: len(a.values)]
    assert a.converged and b.converged


def test_richardson_recovers_polynomial_limit():
    h = 1.0 / np.array([1, 2, 4, 8, 16.0])
    v = 3.0 + 2.0 * h - 5.0 * h**2
    lim, _ = dirlim.richardson(h, v, 2)
    assert_allclose(lim, 3.0, atol=1e-12)


def test_aitken_accelerates_geometric_sequence():
    n = np.arange(10)
    lim, _ = dirlim.aitken(list(2.0 + 0.5**n))
    assert_allclose(lim, 2.0, atol=1e-12)


# --- window averages ----------------------------------------------------------

def test_window_average_of_one_is_one():
    res = dirlim.window_average_integral(lambda x: np.ones_like(x), GROW)
    assert res.converged
    assert_allclose(res.limit, 1.0, atol=1e-12)


def test_window_average_of_decaying_power_is_zero():
    res = dirlim.window_average_integral(lambda x: (np.abs(x) + 1.0) ** -0.5, GROW)
    assert dirlim.limit_verdict(res) == "0"


def test_window_average_of_cos_shrinking_is_point_value():
    res = dirlim.window_average_integral(np.cos, SHRINK, tol=1e-9)
    assert res.converged
    assert_allclose(res.limit, 1.0, atol=1e-8)


@pytest.mark.parametrize("alpha,expected", [(-0.5, "0"), (0.0, "finite"), (1.0, "+infinity")])
def test_power_case_split(alpha, expected):
    res = dirlim.window_average_integral(lambda x: (np.abs(x) + 1.0) ** alpha, GROW)
    assert dirlim.limit_verdict(res) == expected


@pytest.mark.parametrize("T", [0.5, 3.0, 40.0])
def test_window_average_against_closed_form(T):
    # (1/2T) int_{-T}^{T} (|x|+1)^a = ((T+1)^(a+1) - 1) / (T (a+1))
    a = -0.3
    exact = ((T + 1) ** (a + 1) - 1) / (T * (a + 1))
    assert_allclose(dirlim.window_average(lambda x: (np.abs(x) + 1.0) ** a, T), exact, rtol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_dominated_convergence_counterexample(n):
    res = dirlim.window_average_integral(lambda x: (np.abs(x) + 1.0) ** (-1.0 / n), GROW)
    assert dirlim.limit_verdict(res) == "0"


def test_unresolvable_oscillation_stops_the_net_with_partial_values():
    res = dirlim.window_average_integral(np.cos, GROW, tol=1e-6)
    assert not res.converged
    assert res.stopped_by is not None and "quadrature failed" in res.stopped_by
    T = np.asarray(res.indices)
    assert_allclose(res.values, np.sin(T) / T, atol=1e-9)


# --- principal values ----------------------------------------------------------

def test_principal_value_of_odd_pole_is_zero():
    res = dirlim.principal_value(lambda x: 1.0 / x)
    assert res.converged
    assert abs(res.limit) <= 1e-10


def test_principal_value_with_even_part():
    res = dirlim.principal_value(lambda x: 1.0 / x + x**2, tol=1e-12)
    assert res.converged
    assert_allclose(res.limit, 2.0 / 3.0, atol=1e-10)


def test_principal_value_of_even_pole_diverges():
    res = dirlim.principal_value(lambda x: 1.0 / x**2, RefinementSchedule.geometric(0.5, 0.5, 60))
    assert res.divergence_flag == "+infinity"


def test_principal_value_schedule_must_shrink():
    with pytest.raises(ValueError):
        dirlim.principal_value(lambda x: 1.0 / x, GROW)


# --- Gaussian determinants ---------------------------------------------------

def test_zero_perturbation_has_unit_integral():
    assert dirlim.gaussian_determinant_integral(np.zeros(50)) == 1.0


def test_two_eigenvalue_product():
    val = dirlim.gaussian_determinant_integral([0.5, 0.25])
    assert_allclose(val, (15.0 / 8.0) ** -0.5, rtol=1e-13)


def test_quadrature_and_closed_form_routes_agree():
    d = dirlim.gaussian_determinant_integral(1.0 / np.arange(1, 2001) ** 2, details=True)
    assert d.relative_gap <= 1e-12


def test_inverse_square_eigenvalues_limit():
    exact = (np.sinh(np.pi) / np.pi) ** -0.5
    lim = dirlim.determinant_limit(lambda n: 1.0 / np.arange(1, n + 1) ** 2,
                                   RefinementSchedule.geometric(625, 2, 5, integer=True))
    assert_allclose(lim.extrapolated, exact, atol=1e-9)
    # truncation error at n behaves like exact / (2 n)
    n = lim.indices[-1]
    assert_allclose(lim.values[-1] - exact, exact / (2 * n), rtol=1e-2)


def test_non_positive_operator_is_rejected():
    with pytest.raises(NonPositiveOperatorError):
        dirlim.gaussian_determinant_integral([0.5, -1.0])


# --- truncated Fourier transforms ---------------------------------------------

def test_fourier_of_indicator_at_zero():
    ind = lambda y: (np.abs(y) <= 1.0).astype(float)
    val = dirlim.truncated_fourier(ind, 5.0, np.array([0.0]), breakpoints=(-1.0, 1.0))
    assert_allclose(val[0], 2.0 / np.sqrt(2 * np.pi), atol=1e-12)


def test_gaussian_is_its_own_transform():
    xs = np.linspace(-3, 3, 13)
    res = dirlim.fourier_limit(lambda y: np.exp(-y**2 / 2), RefinementSchedule.geometric(1, 2, 8), xs,
                               tol=1e-12)
    assert res.converged
    assert_allclose(res.limit, np.exp(-xs**2 / 2), atol=1e-12)


def test_fourier_of_slowly_decaying_function_against_sine_cosine_integrals():
    # (2 pi)^(-1/2) int_{-K}^{K} e^{-ixy} / (1+|y|) dy has a closed form via Ci and Si.
    K, x = 1.0e4, 1.0
    si_b, ci_b = special.sici(x * (1 + K))
    si_a, ci_a = special.sici(x)
    exact = 2 * (np.cos(x) * (ci_b - ci_a) + np.sin(x) * (si_b - si_a)) / np.sqrt(2 * np.pi)
    val = dirlim.truncated_fourier(lambda y: 1.0 / (1.0 + np.abs(y)), K, np.array([x]))
    assert_allclose(val[0].real, exact, atol=1e-10)
    assert abs(val[0].imag) <= 1e-10


def test_fourier_resolution_error_names_node_count():
    with pytest.raises(ResolutionError) as info:
        dirlim.truncated_fourier(lambda y: 1.0 / (1.0 + np.abs(y)), 1.0e4, np.array([50.0]), nodes=1024)
    assert info.value.required_nodes is not None and info.value.required_nodes > 1024
