"""Renormalized integrals as limits of nets of ordinary integrals.

A directed system is represented by a cofinal chain of indices
(:class:`RefinementSchedule`); the integral over each approximating
measure space is produced by a user evaluator and
:func:`refine_until_converged` decides convergence of the resulting net.
Concrete instances: window averages over ``[-T, T]``, Cauchy principal
values, Gaussian integrals with determinant renormalization and the
truncated Fourier transform.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .errors import EvaluationError, NonPositiveOperatorError, ResolutionError

QUAD_EPSABS = 1e-14
QUAD_EPSREL = 1e-12
QUAD_LIMIT = 500
QUAD_ACCEPT = 1e-9  # error estimate accepted when QUADPACK warns


# ---------------------------------------------------------------------------
# schedules and the generic driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RefinementSchedule:
    """Finite cofinal chain of directed-system indices.

    ``direction`` says whether refinement means increasing (``T -> inf``,
    ``n -> inf``) or decreasing (``T -> 0``) index values.
    """

    indices: tuple
    direction: str = "increasing"
    description: str = ""

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ValueError("schedule must be nonempty")
        if self.direction not in ("increasing", "decreasing"):
            raise ValueError("direction must be 'increasing' or 'decreasing'")
        a = np.asarray(self.indices, float)
        steps = np.diff(a)
        ok = steps > 0 if self.direction == "increasing" else steps < 0
        if not np.all(ok):
            raise ValueError(f"schedule indices are not strictly {self.direction}")

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    @classmethod
    def geometric(cls, start, factor, length, integer=False):
        if factor <= 0 or factor == 1:
            raise ValueError("geometric factor must be positive and != 1")
        vals = [start * factor**i for i in range(length)]
        if integer:
            vals = [int(round(v)) for v in vals]
        direction = "increasing" if factor > 1 else "decreasing"
        return cls(tuple(vals), direction, f"geometric:{start:g}:{factor:g}")

    @classmethod
    def linear(cls, start, step, length):
        if step == 0:
            raise ValueError("linear step must be nonzero")
        vals = tuple(start + step * i for i in range(length))
        direction = "increasing" if step > 0 else "decreasing"
        return cls(vals, direction, f"linear:{start:g}:{step:g}")

    @classmethod
    def parse(cls, text: str, max_steps: int):
        """Parse ``geometric:<start>:<factor>`` or ``linear:<start>:<step>``."""
        try:
            kind, start, param = text.split(":")
            start, param = float(start), float(param)
        except ValueError:
            raise ValueError(f"bad schedule {text!r}; expected kind:start:param") from None
        if max_steps < 1:
            raise ValueError("max_steps must be positive")
        if kind == "geometric":
            return cls.geometric(start, param, max_steps)
        if kind == "linear":
            return cls.linear(start, param, max_steps)
        raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass
class LimitResult:
    """Outcome of evaluating a net along a schedule.

    ``converged`` is an estimate: the last ``stall_window`` successive
    differences were below tolerance.  ``extrapolated`` holds an
    accelerated limit estimate when one was requested.
    """

    indices: list
    values: list
    converged: bool
    limit: object
    error_estimate: float
    divergence_flag: str = "none"
    tol: float = 0.0
    differences: list = field(default_factory=list)
    extrapolated: object = None
    extrapolation_error: Optional[float] = None
    stopped_by: Optional[str] = None

    def to_dict(self):
        def conv(v):
            a = np.asarray(v)
            if np.iscomplexobj(a):
                if np.all(a.imag == 0):
                    a = a.real
                else:
                    return {"re": a.real.tolist(), "im": a.imag.tolist()}
            return a.tolist()

        return {
            "indices": [float(i) for i in self.indices],
            "values": [conv(v) for v in self.values],
            "converged": self.converged,
            "limit": None if self.limit is None else conv(self.limit),
            "error_estimate": _json_float(self.error_estimate),
            "divergence_flag": self.divergence_flag,
            "tol": self.tol,
            "extrapolated": None if self.extrapolated is None else conv(self.extrapolated),
            "stopped_by": self.stopped_by,
        }


def _json_float(v):
    if v is None or not np.isfinite(v):
        return None
    return float(v)


def _default_norm(v):
    a = np.asarray(v)
    return float(np.max(np.abs(a))) if a.size else 0.0


def _evaluate_or_resolution(evaluator, idx):
    """Like ``_evaluate`` but returns resolution failures instead of raising."""
    try:
        return _evaluate(evaluator, idx)
    except EvaluationError as exc:
        if isinstance(exc.cause, ResolutionError):
            return exc
        raise


def _evaluate(evaluator, idx):
    try:
        return evaluator(idx)
    except EvaluationError:
        raise
    except Exception as exc:  # attach the offending index
        raise EvaluationError(idx, exc) from exc


def richardson(hs, values, order=None):
    """Polynomial extrapolation of ``values(h)`` to ``h = 0`` (Neville).

    Uses the last ``order + 1`` points (all points by default).  Returns the
    extrapolated value and the change relative to one order lower.
    """
    hs = np.asarray(hs, float)
    vals = [np.asarray(v, dtype=complex if np.iscomplexobj(v) else float) for v in values]
    n = len(vals) if order is None else min(order + 1, len(vals))
    hs, vals = hs[-n:], vals[-n:]
    table = list(vals)
    prev_best = table[-1]
    best = table[-1]
    for lvl in range(1, n):
        new = []
        for i in range(n - lvl):
            h0, h1 = hs[i], hs[i + lvl]
            new.append((h0 * table[i + 1] - h1 * table[i]) / (h0 - h1))
        prev_best, best = best, new[-1]
        table = new
    err = _default_norm(np.asarray(best) - np.asarray(prev_best)) if n > 1 else np.inf
    return best, err


def aitken(values):
    """Aitken delta-squared acceleration of the last three values."""
    if len(values) < 3:
        return values[-1], np.inf
    a, b, c = (np.asarray(v) for v in values[-3:])
    den = c - 2 * b + a
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(np.abs(den) > 0, c - (c - b) ** 2 / np.where(den == 0, 1, den), c)
    return acc, _default_norm(acc - c)


def refine_until_converged(evaluator: Callable, schedule: RefinementSchedule, tol=1e-8,
                           stall_window=3, *, atol=0.0, divergence_threshold=1e12,
                           norm: Optional[Callable] = None, extrapolation: Optional[str] = None,
                           extrapolation_order=None, workers=1, stop_on_convergence=True):
    """Evaluate a net along ``schedule`` until it stalls, diverges or ends.

    A step passes when ``norm(v_i - v_{i-1}) <= tol * norm(v_i) + atol``;
    ``stall_window`` consecutive passes declare convergence.  Values whose
    norm exceeds ``divergence_threshold`` (or are non-finite) stop the run
    with a ``+infinity`` / ``-infinity`` flag; a net that ends unconverged
    with non-decaying, sign-alternating differences is flagged
    ``oscillating``.

    ``extrapolation`` may be ``"richardson"`` (polynomial in ``h = 1/index``
    for increasing schedules, ``h = index`` for decreasing ones) or
    ``"aitken"``; the result goes to ``LimitResult.extrapolated``.
    Evaluations may run on ``workers`` threads; results are merged in
    schedule order.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if stall_window < 1:
        raise ValueError("stall_window must be >= 1")
    norm = norm or _default_norm
    idxs = list(schedule.indices)
    values, used, diffs, rel_ok = [], [], [], []
    flag = "none"
    stopped_by = None
    streak = 0
    converged = False
    pos = 0
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while pos < len(idxs):
            chunk = idxs[pos:pos + max(1, workers)]
            if pool is not None:
                results = list(pool.map(lambda i: _evaluate_or_resolution(evaluator, i), chunk))
            else:
                results = [_evaluate_or_resolution(evaluator, chunk[0])]
            pos += len(results)
            stop = False
            for idx, v in zip(chunk, results):
                if isinstance(v, EvaluationError):
                    # the net cannot be resolved further; keep what was computed
                    if not values:
                        raise v
                    stopped_by = str(v)
                    converged = False
                    stop = True
                    break
                a = np.asarray(v)
                used.append(idx)
                values.append(v)
                if not np.all(np.isfinite(a)) or norm(a) > divergence_threshold:
                    flag = _sign_flag(a)
                    stop = True
                    break
                if len(values) >= 2:
                    d = norm(a - np.asarray(values[-2]))
                    diffs.append(d)
                    ok = d <= tol * norm(a) + atol
                    rel_ok.append(ok)
                    streak = streak + 1 if ok else 0
                    if streak >= stall_window:
                        converged = True
                        if stop_on_convergence:
                            stop = True
                            break
                    elif converged and not ok:
                        converged = False
            if stop:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    if flag == "none" and not converged and len(values) >= 3:
        if _oscillating(values, diffs):
            flag = "oscillating"
    err = diffs[-1] if diffs else np.inf
    res = LimitResult(used, values, converged and flag == "none", values[-1], err, flag, tol, diffs,
                      stopped_by=stopped_by)
    if extrapolation and flag == "none" and len(values) >= 2:
        if extrapolation == "richardson":
            h = np.asarray(used, float)
            h = 1.0 / h if schedule.direction == "increasing" else h
            res.extrapolated, res.extrapolation_error = richardson(h, values, extrapolation_order)
        elif extrapolation == "aitken":
            res.extrapolated, res.extrapolation_error = aitken(values)
        else:
            raise ValueError(f"unknown extrapolation {extrapolation!r}")
    return res


def limit_verdict(res: LimitResult, zero_atol=1e-5):
    """Coarse classification of a scalar net: ``0``, ``finite``, ``+infinity``,
    ``-infinity``, ``oscillating`` or ``unconverged``."""
    if res.divergence_flag != "none":
        return res.divergence_flag
    if not res.converged:
        return "unconverged"
    return "0" if _default_norm(res.limit) <= zero_atol else "finite"


def _sign_flag(a):
    a = np.asarray(a)
    if np.any(np.isnan(a)):
        return "oscillating"
    if np.iscomplexobj(a) or a.size != 1:
        return "+infinity"
    return "+infinity" if float(a.ravel()[0]) > 0 else "-infinity"


def _oscillating(values, diffs):
    steps = [np.asarray(values[i + 1]) - np.asarray(values[i]) for i in range(len(values) - 1)]
    w = min(4, len(steps))
    tail = steps[-w:]
    alternating = all(np.real(np.vdot(tail[i], tail[i + 1])) < 0 for i in range(w - 1))
    half = max(1, len(diffs) // 2)
    nondecaying = np.mean(diffs[-half:]) >= 0.5 * np.mean(diffs[:half])
    return bool(alternating and nondecaying)


# ---------------------------------------------------------------------------
# one-dimensional quadrature helpers
# ---------------------------------------------------------------------------

def _geometric_panels(a, b):
    """Breakpoints on ``[a, b]`` (0 <= a < b) refining geometrically near 0."""
    pts = [a]
    if a == 0.0:
        x = min(1.0, b)
        pts.append(x)
    else:
        x = a
    while x < b:
        x = min(2.0 * x, b)
        pts.append(x)
    return np.unique(pts)


def _quad(f, a, b):
    """``int_a^b f`` over geometric panels with scipy's adaptive QUADPACK."""
    total = 0.0
    if a >= b:
        return 0.0
    if a >= 0:
        pts = _geometric_panels(a, b)
    else:
        return _quad(lambda x: f(-x), -b, -a) if b <= 0 else _quad(lambda x: f(-x), 0.0, -a) + _quad(f, 0.0, b)
    for lo, hi in zip(pts[:-1], pts[1:]):
        total += _quad_panel(f, lo, hi)
    return total


def _quad_panel(f, lo, hi):
    """QUADPACK on one panel; an unresolved panel raises ``ResolutionError``."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        out = integrate.quad(f, lo, hi, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=QUAD_LIMIT,
                             full_output=1)
    if len(out) > 3 and out[1] > QUAD_ACCEPT * max(1.0, abs(out[0])):
        raise ResolutionError(f"quadrature failed on [{lo:g}, {hi:g}]: {out[3].splitlines()[0].strip()}")
    return out[0]


# ---------------------------------------------------------------------------
# window averages and principal values
# ---------------------------------------------------------------------------

def window_average(f, T):
    """``(1/2T) int_{-T}^{T} f``."""
    if T <= 0:
        raise ValueError("window half-width must be positive")
    with np.errstate(all="ignore"):
        val = _quad(f, 0.0, T) + _quad(lambda x: f(-x), 0.0, T)
    return val / (2.0 * T)


def window_average_integral(f: Callable, schedule: RefinementSchedule, tol=1e-6, stall_window=3,
                            atol=None, **kw) -> LimitResult:
    """Renormalized integral of ``f`` for the measures ``dx / 2T`` on ``[-T, T]``.

    ``schedule`` runs over ``T``; increasing for ``T -> inf`` or decreasing
    for ``T -> 0``.  Differences are tested against ``tol * |v| + atol`` with
    ``atol = tol`` by default so that nets tending to 0 can converge.
    """
    atol = tol if atol is None else atol
    return refine_until_converged(lambda T: window_average(f, T), schedule, tol, stall_window,
                                  atol=atol, **kw)


def principal_value_at(f, T):
    """``int_{-1}^{-T} f + int_T^1 f`` computed as ``int_T^1 (f(x) + f(-x)) dx``."""
    if not 0 < T < 1:
        raise ValueError("principal-value cut must lie in (0, 1)")
    with np.errstate(all="ignore"):
        return _quad(lambda x: f(x) + f(-x), T, 1.0)


def principal_value(f: Callable, schedule: Optional[RefinementSchedule] = None, tol=1e-10,
                    stall_window=3, atol=None, **kw) -> LimitResult:
    """Cauchy principal value of ``int_{-1}^{1} f`` for a singularity at 0."""
    schedule = schedule or RefinementSchedule.geometric(0.5, 0.5, 60)
    if schedule.direction != "decreasing":
        raise ValueError("principal-value schedules must decrease to 0")
    atol = tol if atol is None else atol
    return refine_until_converged(lambda T: principal_value_at(f, T), schedule, tol, stall_window,
                                  atol=atol, **kw)


# ---------------------------------------------------------------------------
# Gaussian integrals and determinants
# ---------------------------------------------------------------------------

_GH_NODES = 80


def _log_gauss_factor_quadrature(mu):
    """``log(pi^(-1/2) int exp(-mu x^2) dx)`` by Gauss-Hermite quadrature.

    The variable is rescaled by a power of two (exact in floating point) so
    that the residual integrand ``exp(-(mu c^2 - 1) u^2)`` is mild; the
    Hermite weights are normalised by their own sum so that constants are
    integrated exactly.
    """
    mu = np.asarray(mu, float)
    x, w = np.polynomial.hermite.hermgauss(_GH_NODES)
    w = w / np.sum(w)
    e = np.round(np.log2(mu) / 2.0)
    c = np.exp2(-e)  # x = c u, c^2 mu in [1/sqrt2, sqrt2]
    nu = mu * c * c - 1.0
    dev = np.expm1(-np.multiply.outer(nu, x * x)) @ w
    return np.log(c) + np.log1p(dev)


@dataclass
class DeterminantResult:
    value: float
    product_route: float
    quadrature_route: float
    relative_gap: float


def gaussian_determinant_integral(eigenvalues: Sequence[float], n: Optional[int] = None,
                                  rtol=1e-12, details=False):
    """``prod_{j<=n} (1 + lambda_j)^(-1/2)``, the normalized Gaussian integral.

    Computed as a closed product and, independently, as a product of
    one-dimensional Gauss-Hermite integrals; the two must agree to ``rtol``.
    """
    lam = np.asarray(eigenvalues, float)
    if n is not None:
        if n > len(lam):
            raise ValueError("truncation dimension exceeds the number of eigenvalues")
        lam = lam[:n]
    mu = 1.0 + lam
    if np.any(mu <= 0):
        j = int(np.argmax(mu <= 0))
        raise NonPositiveOperatorError(f"1 + lambda_{j + 1} = {mu[j]:g} is not positive")
    prod = float(np.exp(-0.5 * np.sum(np.log1p(lam))))
    quad = float(np.exp(np.sum(_log_gauss_factor_quadrature(mu))))
    gap = abs(prod - quad) / abs(prod)
    if gap > rtol:
        raise ResolutionError(f"product and quadrature routes differ by {gap:.2e} relative")
    if details:
        return DeterminantResult(prod, prod, quad, gap)
    return prod


def determinant_limit(eigen_fn: Callable, schedule: RefinementSchedule, tol=1e-10, stall_window=3,
                      extrapolation="richardson", extrapolation_order=4, **kw) -> LimitResult:
    """Directed limit over truncation dimensions ``n`` of the Gaussian integral.

    ``eigen_fn(n)`` returns ``lambda_1 .. lambda_n``.
    """
    return refine_until_converged(
        lambda n: gaussian_determinant_integral(eigen_fn(int(n))), schedule, tol, stall_window,
        extrapolation=extrapolation, extrapolation_order=extrapolation_order, **kw)


# ---------------------------------------------------------------------------
# truncated Fourier transform
# ---------------------------------------------------------------------------

_GL_PER_PANEL = 16


def _fourier_sum(f, K, xs, panels, breakpoints):
    edges = np.linspace(-K, K, panels + 1)
    if breakpoints:
        extra = [b for b in breakpoints if -K < b < K]
        edges = np.unique(np.concatenate([edges, extra]))
    z, w = np.polynomial.legendre.leggauss(_GL_PER_PANEL)
    lo, hi = edges[:-1], edges[1:]
    half = 0.5 * (hi - lo)
    ys = (0.5 * (hi + lo))[:, None] + half[:, None] * z[None, :]
    ws = half[:, None] * w[None, :]
    ys, ws = ys.ravel(), ws.ravel()
    fy = np.asarray(f(ys), dtype=complex) * ws
    out = np.empty(len(xs), dtype=complex)
    for i in range(0, len(xs), 64):
        blk = xs[i:i + 64]
        out[i:i + 64] = np.exp(-1j * np.multiply.outer(blk, ys)) @ fy
    return out / np.sqrt(2 * np.pi), len(ys)


def truncated_fourier(f: Callable, K: float, xs, nodes: Optional[int] = None, rtol=1e-9,
                      breakpoints=(0.0,), max_nodes=2**22):
    """``(2 pi)^(-1/2) int_{-K}^{K} exp(-i x y) f(y) dy`` on the grid ``xs``.

    Composite 16-point Gauss-Legendre panels.  The result is accepted when
    doubling the panel count changes it by less than ``rtol`` (relative to
    its max); a fixed ``nodes`` budget that fails this raises
    :class:`ResolutionError` with the node count that would pass.
    ``breakpoints`` are added as panel edges (kinks or jumps of ``f``).
    """
    if K <= 0:
        raise ValueError("window radius must be positive")
    xs = np.atleast_1d(np.asarray(xs, float))
    if nodes is None:
        # roughly one oscillation per panel
        panels = max(4, int(np.ceil(K * max(1.0, np.max(np.abs(xs))) / np.pi)))
    else:
        panels = max(1, nodes // _GL_PER_PANEL)
    start = panels
    while True:
        a, used = _fourier_sum(f, K, xs, panels, breakpoints)
        b, _ = _fourier_sum(f, K, xs, 2 * panels, breakpoints)
        scale = max(np.max(np.abs(b)), 1e-300)
        if np.max(np.abs(a - b)) <= rtol * scale:
            if nodes is not None and panels != start:
                raise ResolutionError(
                    f"{nodes} nodes under-resolve the oscillation x*K = {K * np.max(np.abs(xs)):.3g}; "
                    f"need about {used} nodes", required_nodes=used)
            return a
        panels *= 2
        if panels * _GL_PER_PANEL > max_nodes:
            raise ResolutionError(
                f"Fourier quadrature did not stabilise below {max_nodes} nodes",
                required_nodes=2 * max_nodes)


def grid_lq_norm(xs, q=2.0):
    """Discrete ``L^q`` norm on a uniform sample grid ``xs``."""
    xs = np.asarray(xs, float)
    dx = float(xs[1] - xs[0]) if len(xs) > 1 else 1.0

    def norm(v):
        return float((np.sum(np.abs(np.asarray(v)) ** q) * dx) ** (1.0 / q))

    return norm


def fourier_limit(f: Callable, schedule: RefinementSchedule, xs, q=2.0, tol=1e-4, stall_window=3,
                  breakpoints=(0.0,), **kw) -> LimitResult:
    """Limit over ``K -> inf`` of :func:`truncated_fourier` in grid-``L^q``."""
    xs = np.atleast_1d(np.asarray(xs, float))
    return refine_until_converged(
        lambda K: truncated_fourier(f, K, xs, breakpoints=breakpoints), schedule, tol, stall_window,
        norm=grid_lq_norm(xs, q), **kw)
