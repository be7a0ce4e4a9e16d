"""Time-sliced path integrals over geodesic polygons.

A partition ``0 = s_0 < ... < s_r = 1`` together with vertices
``x = x_0, ..., x_r = y`` determines a geodesic polygon.  Integrating the
product of short-time kernels over the interior vertices gives a kernel
chain; its limit under refinement of the partition is the heat kernel
``k^H(t, y, x)``.  Chains are evaluated by deterministic quadrature
(FFT-accelerated for distance-only kernels) or by Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .bundles import BundleModel, dagger, expm, gauss_legendre01, ordered_exponential, transported_average, unordered_exponential
from .dirlim import RefinementSchedule, refine_until_converged
from .errors import ConfigError, CutLocusError
from .geometry import Circle, FlatTorus, ModelManifold, QuadratureGrid, Sphere
from .kernels import CutoffProfile, TimeKernel, default_profile, gauss_from_distance, make_kernel


# ---------------------------------------------------------------------------
# partitions and polygons
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Partition:
    """Strictly increasing breakpoints with ``s_0 = 0`` and ``s_r = 1``."""

    breakpoints: tuple

    def __post_init__(self):
        b = np.asarray(self.breakpoints, float)
        if b.ndim != 1 or len(b) < 2:
            raise ValueError("a partition needs at least two breakpoints")
        if b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError("partition must start at 0 and end at 1")
        if np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", tuple(float(v) for v in b))

    @classmethod
    def uniform(cls, r):
        if r < 1:
            raise ValueError("r must be positive")
        b = np.arange(r + 1) / r
        b[-1] = 1.0
        return cls(tuple(b))

    @classmethod
    def dyadic(cls, k):
        return cls.uniform(2**k)

    @property
    def r(self):
        return len(self.breakpoints) - 1

    @property
    def steps(self):
        return np.diff(np.asarray(self.breakpoints))

    @property
    def mesh(self):
        return float(np.max(self.steps))

    def subdivides(self, other: "Partition"):
        """True when every breakpoint of ``other`` is a breakpoint of ``self``."""
        mine = set(self.breakpoints)
        return all(b in mine for b in other.breakpoints)


@dataclass(frozen=True)
class GeodesicPolygon:
    partition: Partition
    vertices: np.ndarray

    @property
    def r(self):
        return self.partition.r


@dataclass(frozen=True)
class RejectedPolygon:
    """Vertex tuple with a consecutive pair on each other's cut locus."""

    partition: Partition
    vertices: np.ndarray
    segment: int


def make_polygon(M: ModelManifold, P: Partition, vertices, reject=False):
    """Validated :class:`GeodesicPolygon`.

    A cut-locus pair raises :class:`CutLocusError`, or yields a
    :class:`RejectedPolygon` when ``reject`` is true.
    """
    v = M.canonical(np.asarray(vertices, float))
    if v.shape != (P.r + 1, M.chart_dim):
        raise ValueError(f"expected {P.r + 1} vertices of dimension {M.chart_dim}")
    cut = M.cut_locus_predicate(v[:-1], v[1:])
    if np.any(cut):
        j = int(np.argmax(cut)) + 1
        if reject:
            return RejectedPolygon(P, v, j)
        raise CutLocusError(segment=j)
    return GeodesicPolygon(P, v)


def _verts(poly_or_vertices):
    if isinstance(poly_or_vertices, (GeodesicPolygon, RejectedPolygon)):
        return poly_or_vertices.partition, poly_or_vertices.vertices
    raise TypeError("expected a polygon")


# ---------------------------------------------------------------------------
# integrand pieces
# ---------------------------------------------------------------------------

def renorm_constant(P: Partition, m: int, t: float):
    """``Z(P, m, t) = prod_j (4 pi t (s_j - s_{j-1}))^(m/2)``."""
    if t <= 0:
        raise ValueError("t must be positive")
    return float(np.prod((4 * np.pi * t * P.steps) ** (m / 2)))


def polygon_energy(M: ModelManifold, P: Partition, vertices):
    """``(1/2) sum_j d(x_{j-1}, x_j)^2 / (s_j - s_{j-1})`` (batched)."""
    v = np.asarray(vertices, float)
    d = M.distance(v[..., :-1, :], v[..., 1:, :])
    return 0.5 * np.sum(d**2 / P.steps, axis=-1)


def cutoff_product(profile: CutoffProfile, M: ModelManifold, vertices):
    """``prod_j chi(d(x_{j-1}, x_j))`` (batched)."""
    v = np.asarray(vertices, float)
    d = M.distance(v[..., :-1, :], v[..., 1:, :])
    return np.prod(profile(d), axis=-1)


def _scal_integral(M, P, vertices, n=4):
    s, w = gauss_legendre01(n)
    v = np.asarray(vertices, float)
    total = 0.0
    for j, ds in enumerate(P.steps):
        pts = M.segment_points(v[..., j, :], v[..., j + 1, :], s)
        total = total + ds * (M.scalar_curvature(pts) * np.ones(pts.shape[:-1])) @ w
    return total


def theorem_integrand(B: BundleModel, profile: Optional[CutoffProfile], t, P: Partition, vertices,
                      ordered=True, quad_nodes=12):
    """``Xi exp(-E/2t + (t/3) int scal) Pexp(int -t V)`` for vertex tuples.

    ``vertices`` has shape ``batch + (r + 1, chart_dim)`` running from
    ``x = gamma(0)`` to ``y = gamma(1)``; the result maps ``E_x -> E_y``.
    Tuples killed by the cutoff (including all cut-locus tuples) give the
    zero matrix without evaluating transports.  ``ordered=False`` replaces
    the ordered exponential by the unordered one.
    """
    M = B.manifold
    profile = profile or default_profile(M)
    v = np.asarray(vertices, float)
    batch = v.shape[:-2]
    k = B.rank
    out = np.zeros(batch + (k, k), dtype=complex)
    xi = cutoff_product(profile, M, v)
    mask = xi > 0
    if not np.any(mask):
        return out
    vm = v[mask]
    scalar = xi[mask] * np.exp(-polygon_energy(M, P, vm) / (2 * t) + t / 3.0 * _scal_integral(M, P, vm))

    def W(pts):
        return -t * B.V(pts)

    fn = ordered_exponential if ordered else unordered_exponential
    out[mask] = scalar[:, None, None] * fn(B, P, vm, W, quad_nodes)
    return out


def theorem_segment_kernel(B: BundleModel, profile: Optional[CutoffProfile] = None, quad_nodes=12) -> TimeKernel:
    """One time slice of the theorem integrand as a kernel ``g(tau, a, b)``.

    ``g = (4 pi tau)^(-m/2) chi(d) exp(-d^2/4tau) exp(tau scal/3) T exp(-tau Vbar)``
    with ``T`` the transport ``b -> a`` and ``Vbar`` the transported average
    of ``V`` along that segment.  Chaining these over a partition with
    ``tau_j = t (s_j - s_{j-1})`` reproduces ``Z^-1`` times the theorem
    integrand, factor by factor.
    """
    M = B.manifold
    profile = profile or default_profile(M)
    m = M.dim
    k = B.rank

    def ev(tau, a, b):
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        batch = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
        ab = np.broadcast_to(a, batch + a.shape[-1:])
        bb = np.broadcast_to(b, batch + b.shape[-1:])
        out = np.zeros(batch + (k, k), dtype=complex)
        d = M.distance(ab, bb)
        mask = d < profile.support
        if not np.any(mask):
            return out
        dm = d[mask]
        T1, Vbar = transported_average(B, bb[mask], ab[mask], B.potential, quad_nodes)
        scal = M.scalar_curvature()
        pref = (4 * np.pi * tau) ** (-m / 2) * profile(dm) * np.exp(-dm**2 / (4 * tau) + tau * scal / 3.0)
        out[mask] = pref[:, None, None] * (T1 @ expm(-tau * Vbar))
        return out

    return TimeKernel("theorem", M, k, ev, 1.0, None, profile.support, B)


# ---------------------------------------------------------------------------
# kernel chains
# ---------------------------------------------------------------------------

class _DenseOperator:
    """Weighted kernel matrix on a grid, evaluated only on pairs inside the support."""

    def __init__(self, q: TimeKernel, tau, grid: QuadratureGrid):
        M = grid.manifold
        n = len(grid)
        k = q.rank
        z = grid.nodes
        mat = np.zeros((n, k, n, k), dtype=complex)
        D = M.distance(z[:, None, :], z[None, :, :])
        if q.support is not None:
            I, J = np.nonzero(D < q.support)
        else:
            I, J = np.nonzero(np.ones_like(D, dtype=bool))
        if len(I):
            vals = np.asarray(q(tau, z[I], z[J]))
            mat[I, :, J, :] = vals * grid.weights[J, None, None]
        self.mat = mat.reshape(n * k, n * k)
        self.n, self.k = n, k

    def apply(self, F):
        return self.mat @ F


class _RadialOperator:
    """Weighted application of a distance-only kernel by FFT."""

    def __init__(self, q: TimeKernel, tau, grid: QuadratureGrid):
        M = grid.manifold
        self.grid = grid
        self.k = q.rank
        if isinstance(M, Circle):
            d = M.distance(grid.nodes[:1], grid.nodes)
            self.hat = np.fft.fft(q.radial(tau, d) * grid.weights[0])
            self.mode = "circle"
        elif isinstance(M, FlatTorus):
            d = M.distance(grid.nodes[:1], grid.nodes).reshape(grid.shape)
            self.hat = np.fft.fft2(q.radial(tau, d) * grid.weights[0])
            self.mode = "torus"
        elif isinstance(M, Sphere):
            N = grid.N
            nodes = grid.nodes.reshape(N, 2 * N, 2)
            th = nodes[:, 0, 0]
            ph = nodes[0, :, 1]
            a = np.stack(np.broadcast_arrays(th[:, None, None], 0.0 * ph[None, None, :]), -1)
            b = np.stack(np.broadcast_arrays(th[None, :, None], ph[None, None, :]), -1)
            C = q.radial(tau, M.distance(a, b))  # C[i, j, delta]
            wj = grid.weights.reshape(N, 2 * N)[:, 0]
            self.hat = np.fft.fft(C * wj[None, :, None], axis=-1)
            self.mode = "sphere"
        else:
            raise ConfigError(f"no FFT path for {M!r}")

    def apply(self, F):
        # F has shape (n * k, k); the kernel is a scalar times the identity
        g = self.grid
        k = self.k
        Fr = F.reshape(len(g), k, k)
        if self.mode == "circle":
            out = np.fft.ifft(self.hat[:, None, None] * np.fft.fft(Fr, axis=0), axis=0)
        elif self.mode == "torus":
            G = Fr.reshape(g.shape + (k, k))
            out = np.fft.ifft2(self.hat[..., None, None] * np.fft.fft2(G, axes=(0, 1)), axes=(0, 1))
        else:
            N = g.N
            G = np.fft.fft(Fr.reshape(N, 2 * N, k, k), axis=1)
            out = np.fft.ifft(np.einsum("ijd,jdab->idab", self.hat, G), axis=1)
        return out.reshape(len(g) * k, k)


def _operator(q, tau, grid, use_fft):
    if use_fft and q.radial is not None:
        return _RadialOperator(q, tau, grid)
    return _DenseOperator(q, tau, grid)


def kernel_chain(q: TimeKernel, P: Partition, t, x, y, grid: Optional[QuadratureGrid] = None,
                 use_fft=True, real_if_close=True):
    """``int q(t ds_r, y, z_{r-1}) ... q(t ds_1, z_1, x) dz_1 ... dz_{r-1}``.

    The interior integrals use ``grid``; distance-only kernels are applied by
    FFT (circle, torus) or block-circulant FFT in longitude (sphere), other
    kernels by a dense weighted matrix restricted to pairs inside the
    cutoff support.  Returns a ``(k, k)`` matrix approximating ``k(t, y, x)``.
    """
    M = q.manifold
    x = M.point(x)
    y = M.point(y)
    steps = P.steps
    if P.r == 1:
        return np.asarray(q(t, y, x))
    if grid is None:
        raise ConfigError("a quadrature grid is needed for r > 1")
    if grid.manifold != M:
        raise ConfigError(f"grid was built on {grid.manifold.spec} but the kernel lives on {M.spec}")
    k = q.rank
    z = grid.nodes
    F = np.asarray(q(t * steps[0], z, x[None, :])).reshape(len(z) * k, k)
    cache = {}
    for j in range(1, P.r - 1):
        tau = t * steps[j]
        key = round(tau, 15)
        if key not in cache:
            cache[key] = _operator(q, tau, grid, use_fft)
        F = cache[key].apply(F)
    last = np.asarray(q(t * steps[-1], y[None, :], z))  # (n, k, k)
    w = grid.weights
    out = np.einsum("nab,n,nbc->ac", last, w, F.reshape(len(z), k, k))
    if real_if_close and np.all(np.abs(out.imag) <= 1e-13 * max(1.0, np.max(np.abs(out)))):
        out = out.real
    return out


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass
class MCResult:
    value: np.ndarray
    stderr: np.ndarray
    n_samples: int
    rejected: int


def mc_path_integral(B: BundleModel, profile: Optional[CutoffProfile], t, P: Partition, x, y,
                     n_samples=100_000, seed=0, kernel: Optional[TimeKernel] = None,
                     integrand: Optional[Callable] = None, block=10_000, ordered=True) -> MCResult:
    """Monte Carlo estimate of the polygon integral with uniform interior vertices.

    The default integrand is the theorem integrand; the estimate is
    ``vol^(r-1) / Z * mean(integrand)``.  With ``kernel`` the integrand is
    ``Z * q(t ds_r, y, z_{r-1}) ... q(t ds_1, z_1, x)``.  A custom
    ``integrand(vertices) -> batch + (k, k)`` may be supplied.  Each block of
    samples draws from its own stream spawned from ``seed``; tuples with a
    cut-locus pair score zero and are counted.
    """
    M = B.manifold
    if P.r < 2:
        raise ValueError("Monte Carlo needs interior vertices (r >= 2)")
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    profile = profile or default_profile(M)
    x, y = M.point(x), M.point(y)
    Z = renorm_constant(P, M.dim, t)
    k = B.rank
    nblocks = -(-n_samples // block)
    streams = np.random.SeedSequence(seed).spawn(nblocks)
    s1 = np.zeros((k, k), dtype=complex)
    s2 = np.zeros((k, k))
    rejected = 0
    done = 0
    for b, ss in enumerate(streams):
        m = min(block, n_samples - done)
        rng = np.random.default_rng(ss)
        inner = M.sample_uniform(rng, m * (P.r - 1)).reshape(m, P.r - 1, M.chart_dim)
        verts = np.concatenate([np.broadcast_to(x, (m, 1, M.chart_dim)), inner,
                                np.broadcast_to(y, (m, 1, M.chart_dim))], axis=1)
        cut = np.any(M.cut_locus_predicate(verts[:, :-1], verts[:, 1:]), axis=-1)
        rejected += int(np.count_nonzero(cut))
        vals = np.zeros((m, k, k), dtype=complex)
        ok = ~cut
        if integrand is not None:
            vals[ok] = np.asarray(integrand(verts[ok])).reshape(-1, k, k)
        elif kernel is not None:
            acc = None
            for j, ds in enumerate(P.steps):
                f = kernel(t * ds, verts[ok, j + 1], verts[ok, j])
                acc = f if acc is None else f @ acc
            vals[ok] = Z * acc
        else:
            vals[ok] = theorem_integrand(B, profile, t, P, verts[ok], ordered=ordered)
        s1 += vals.sum(axis=0)
        s2 += (np.abs(vals - vals.mean(axis=0)) ** 2).sum(axis=0) + m * np.abs(vals.mean(axis=0)) ** 2
        done += m
    scale = M.volume ** (P.r - 1) / Z
    mean = s1 / done
    var = np.maximum(s2 / done - np.abs(mean) ** 2, 0.0) * done / (done - 1)
    value = scale * mean
    stderr = scale * np.sqrt(var / done)
    if np.all(np.abs(value.imag) <= 1e-13 * max(1.0, np.max(np.abs(value)))):
        value = value.real
    return MCResult(value, stderr, done, rejected)


# ---------------------------------------------------------------------------
# the directed-limit driver
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    """Rows ``(r, mesh, resolution, value, successive difference, oracle error)``."""

    rows: list
    verdict: str
    limit: np.ndarray
    error_estimate: float
    fitted_exponent: Optional[float] = None
    oracle_value: Optional[np.ndarray] = None
    terminal_relative_error: Optional[float] = None
    config: dict = field(default_factory=dict)

    def to_dict(self):
        def mat(a):
            a = np.asarray(a)
            if np.iscomplexobj(a) and np.any(a.imag != 0):
                return {"re": a.real.tolist(), "im": a.imag.tolist()}
            return np.real(a).tolist()

        rows = []
        for row in self.rows:
            rr = dict(row)
            rr["value"] = mat(rr["value"])
            rows.append(rr)
        return {
            "rows": rows,
            "verdict": self.verdict,
            "limit": mat(self.limit),
            "error_estimate": self.error_estimate,
            "fitted_exponent": self.fitted_exponent,
            "oracle_value": None if self.oracle_value is None else mat(self.oracle_value),
            "terminal_relative_error": self.terminal_relative_error,
            "config": self.config,
        }


def _spectral_norm(a):
    a = np.atleast_2d(np.asarray(a))
    return float(np.linalg.norm(a, 2))


def fit_mesh_exponent(mesh, errors):
    """Least-squares slope of ``log(error)`` against ``log(mesh)``."""
    mesh = np.asarray(mesh, float)
    err = np.asarray(errors, float)
    ok = (err > 0) & np.isfinite(err)
    if np.count_nonzero(ok) < 2:
        return None
    return float(np.polyfit(np.log(mesh[ok]), np.log(err[ok]), 1)[0])


def resolve_source(source, B: BundleModel, profile: Optional[CutoffProfile]) -> TimeKernel:
    """Kernel for a source name: ``gauss``, ``k1`` .. ``k4`` or ``theorem``."""
    if isinstance(source, TimeKernel):
        return source
    if source == "theorem":
        return theorem_segment_kernel(B, profile)
    return make_kernel(source, B, profile)


def path_integral_limit(source, B: BundleModel, t, x, y, ladder: Sequence[int] = (1, 2, 3, 4),
                        grid_ladder: Optional[Sequence[int]] = None, N0=64, profile=None,
                        oracle=None, tol=1e-3, stall_window=2, mode="chain", samples=100_000,
                        seed=0, stop_on_convergence=False) -> ConvergenceReport:
    """Evaluate the polygon integral along uniform partitions ``r = 2^k``.

    ``grid_ladder`` gives the grid resolution per refinement; by default it
    doubles from ``N0`` whenever ``r`` doubles.  ``oracle`` is a matrix
    (the exact ``k(t, y, x)``) or a :class:`TimeKernel`.  The net is judged
    by :func:`refine_until_converged` with spectral-norm differences; the
    mesh exponent is fitted on oracle errors (or successive differences
    without an oracle) when at least four rows exist.
    """
    M = B.manifold
    ladder = list(ladder)
    if len(ladder) < 3:
        raise ValueError("refinement ladders need at least three levels")
    if grid_ladder is None:
        grid_ladder = [N0 * 2 ** (k - ladder[0]) for k in ladder]
    if len(grid_ladder) != len(ladder):
        raise ValueError("grid ladder and refinement ladder lengths differ")
    profile = profile or default_profile(M)
    x, y = M.point(x), M.point(y)
    q = resolve_source(source, B, profile) if mode == "chain" else None
    grids = {}
    res_by_k = {}

    def evaluate(k):
        P = Partition.dyadic(int(k))
        if mode == "chain":
            N = grid_ladder[ladder.index(k)]
            grid = grids.setdefault(N, M.quadrature_grid(N))
            res_by_k[k] = N
            return kernel_chain(q, P, t, x, y, grid)
        if mode == "mc":
            kern = None if source == "theorem" else resolve_source(source, B, profile)
            r = mc_path_integral(B, profile, t, P, x, y, samples, seed, kernel=kern)
            res_by_k[k] = samples
            return r.value
        raise ValueError(f"unknown mode {mode!r}")

    schedule = RefinementSchedule(tuple(ladder), "increasing", "dyadic")
    lim = refine_until_converged(evaluate, schedule, tol, stall_window, norm=_spectral_norm,
                                 stop_on_convergence=stop_on_convergence)
    oracle_val = None
    if oracle is not None:
        oracle_val = np.asarray(oracle(t, y, x) if isinstance(oracle, TimeKernel) else oracle)
        oracle_val = np.atleast_2d(oracle_val)
    rows = []
    for i, (k, v) in enumerate(zip(lim.indices, lim.values)):
        row = {
            "r": 2**k,
            "mesh": 2.0**-k,
            "resolution": res_by_k.get(k),
            "value": np.atleast_2d(v),
            "difference": lim.differences[i - 1] if i > 0 else None,
            "oracle_error": None,
        }
        if oracle_val is not None:
            row["oracle_error"] = _spectral_norm(np.atleast_2d(v) - oracle_val) / _spectral_norm(oracle_val)
        rows.append(row)
    if lim.divergence_flag not in ("none",):
        verdict = "diverged"
    else:
        verdict = "converged" if lim.converged else "not-converged"
    fitted = None
    if len(rows) >= 4:
        if oracle_val is not None:
            fitted = fit_mesh_exponent([r["mesh"] for r in rows], [r["oracle_error"] for r in rows])
        else:
            fitted = fit_mesh_exponent([r["mesh"] for r in rows[1:]], [r["difference"] for r in rows[1:]])
    term = rows[-1]["oracle_error"] if oracle_val is not None else None
    cfg = {"source": source if isinstance(source, str) else source.name, "manifold": M.spec,
           "bundle": B.spec, "t": t, "x": x.tolist(), "y": y.tolist(), "ladder": ladder,
           "grid_ladder": list(grid_ladder), "eta": profile.eta, "mode": mode, "tol": tol,
           "stall_window": stall_window}
    return ConvergenceReport(rows, verdict, np.atleast_2d(lim.limit), float(lim.error_estimate),
                             fitted, oracle_val, term, cfg)
