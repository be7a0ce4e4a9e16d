"""Model compact Riemannian manifolds with closed-form geometry.

Three models are provided: the circle ``S1(R)``, the flat torus
``T2(L1, L2)`` and the round sphere ``S2(R)``.  Points are numpy arrays of
chart coordinates with a trailing axis of length ``chart_dim``; every method
broadcasts over leading axes.

* circle: ``theta`` in ``[0, 2 pi)``
* torus: ``(u, v)`` in ``[0, L1) x [0, L2)``
* sphere: ``(theta, phi)`` colatitude/longitude; computations go through
  embedded unit vectors, charts are only used for input and output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CutLocusError, ConfigError

TWO_PI = 2.0 * np.pi
CUT_TOL = 1e-12


def _wrap(delta, period):
    """Wrap ``delta`` into ``(-period/2, period/2]``."""
    w = np.mod(delta + 0.5 * period, period) - 0.5 * period
    return np.where(w <= -0.5 * period, w + period, w)


@dataclass(frozen=True)
class QuadratureGrid:
    """Quadrature rule on a model manifold.

    ``shape`` records the tensor structure of the node ordering so that
    translation/rotation invariant kernels can be applied by FFT:
    ``(N,)`` on the circle, ``(N, N)`` on the torus and ``(N, 2N)``
    (colatitude-major) on the sphere.
    """

    manifold: "ModelManifold"
    nodes: np.ndarray
    weights: np.ndarray
    N: int
    shape: tuple

    def __len__(self):
        return len(self.weights)

    @property
    def total(self):
        return float(np.sum(self.weights))


class ModelManifold:
    kind: str
    dim: int
    chart_dim: int

    # -- common helpers -------------------------------------------------
    def point(self, coords):
        x = np.asarray(coords, dtype=float)
        if x.ndim == 0:
            x = x[None]
        if x.shape[-1] != self.chart_dim:
            raise ValueError(f"{self.kind} points need {self.chart_dim} chart coordinates, got shape {x.shape}")
        return self.canonical(x)

    def same_point(self, x, y):
        return np.all(self.canonical(np.asarray(x, float)) == self.canonical(np.asarray(y, float)), axis=-1)

    def check_grid(self, grid):
        if grid.manifold != self:
            raise ConfigError(f"grid was built on {grid.manifold.spec} but manifold is {self.spec}")

    def geodesic_point(self, x, y, s):
        """Point at parameter ``s`` on the constant-speed shortest geodesic."""
        if np.any(self.cut_locus_predicate(x, y)):
            raise CutLocusError()
        return self._geodesic(np.asarray(x, float), np.asarray(y, float), s)

    def segment_points(self, x, y, s):
        """Geodesic points for a batch of pairs at a 1-D array of parameters.

        Returns shape ``(..., len(s), chart_dim)``.  No cut-locus check.
        """
        x = np.asarray(x, float)[..., None, :]
        y = np.asarray(y, float)[..., None, :]
        return self._geodesic(x, y, np.asarray(s, float))

    def __eq__(self, other):
        return type(self) is type(other) and self.spec == other.spec

    def __hash__(self):
        return hash(self.spec)

    def __repr__(self):
        return f"<{type(self).__name__} {self.spec}>"


class Circle(ModelManifold):
    kind = "S1"
    dim = 1
    chart_dim = 1

    def __init__(self, radius=1.0):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.radius = float(radius)

    @property
    def spec(self):
        return f"s1:{self.radius:g}"

    @property
    def injectivity_radius(self):
        return np.pi * self.radius

    @property
    def volume(self):
        return TWO_PI * self.radius

    def canonical(self, x):
        return np.mod(np.asarray(x, float), TWO_PI)

    def displacement(self, x, y):
        """Signed arc length from ``x`` to ``y`` along the shortest arc."""
        d = _wrap(np.asarray(y, float)[..., 0] - np.asarray(x, float)[..., 0], TWO_PI)
        return self.radius * d

    def distance(self, x, y):
        return np.abs(self.displacement(x, y))

    def cut_locus_predicate(self, x, y):
        d = _wrap(np.asarray(y, float)[..., 0] - np.asarray(x, float)[..., 0], TWO_PI)
        return np.abs(np.abs(d) - np.pi) <= CUT_TOL

    def _geodesic(self, x, y, s):
        d = _wrap(y[..., 0] - x[..., 0], TWO_PI)
        return self.canonical((x[..., 0] + s * d)[..., None])

    def scalar_curvature(self, x=None):
        return 0.0

    def quadrature_grid(self, N):
        if N < 4:
            raise ValueError("quadrature grid needs N >= 4")
        nodes = (TWO_PI * np.arange(N) / N)[:, None]
        weights = np.full(N, self.volume / N)
        return QuadratureGrid(self, nodes, weights, N, (N,))

    def sample_uniform(self, rng, size=None):
        n = 1 if size is None else size
        out = rng.uniform(0.0, TWO_PI, size=n)[..., None]
        return out[0] if size is None else out


class FlatTorus(ModelManifold):
    kind = "T2"
    dim = 2
    chart_dim = 2

    def __init__(self, L1=1.0, L2=1.0):
        if L1 <= 0 or L2 <= 0:
            raise ValueError("periods must be positive")
        self.periods = np.array([float(L1), float(L2)])

    @property
    def spec(self):
        return f"t2:{self.periods[0]:g},{self.periods[1]:g}"

    @property
    def injectivity_radius(self):
        return 0.5 * float(np.min(self.periods))

    @property
    def volume(self):
        return float(np.prod(self.periods))

    def canonical(self, x):
        return np.mod(np.asarray(x, float), self.periods)

    def displacement(self, x, y):
        return _wrap(np.asarray(y, float) - np.asarray(x, float), self.periods)

    def distance(self, x, y):
        return np.linalg.norm(self.displacement(x, y), axis=-1)

    def cut_locus_predicate(self, x, y):
        d = self.displacement(x, y)
        return np.any(np.abs(np.abs(d) - 0.5 * self.periods) <= CUT_TOL, axis=-1)

    def _geodesic(self, x, y, s):
        d = _wrap(y - x, self.periods)
        return self.canonical(x + np.asarray(s)[..., None] * d)

    def scalar_curvature(self, x=None):
        return 0.0

    def quadrature_grid(self, N):
        if N < 4:
            raise ValueError("quadrature grid needs N >= 4")
        u = self.periods[0] * np.arange(N) / N
        v = self.periods[1] * np.arange(N) / N
        U, V = np.meshgrid(u, v, indexing="ij")
        nodes = np.stack([U.ravel(), V.ravel()], axis=-1)
        weights = np.full(N * N, self.volume / N**2)
        return QuadratureGrid(self, nodes, weights, N, (N, N))

    def sample_uniform(self, rng, size=None):
        n = 1 if size is None else size
        out = rng.uniform(0.0, 1.0, size=(n, 2)) * self.periods
        return out[0] if size is None else out


class Sphere(ModelManifold):
    kind = "S2"
    dim = 2
    chart_dim = 2

    def __init__(self, radius=1.0):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.radius = float(radius)

    @property
    def spec(self):
        return f"s2:{self.radius:g}"

    @property
    def injectivity_radius(self):
        return np.pi * self.radius

    @property
    def volume(self):
        return 4.0 * np.pi * self.radius**2

    @staticmethod
    def to_unit(x):
        x = np.asarray(x, float)
        th, ph = x[..., 0], x[..., 1]
        st = np.sin(th)
        return np.stack([st * np.cos(ph), st * np.sin(ph), np.cos(th)], axis=-1)

    @staticmethod
    def from_unit(p):
        p = np.asarray(p, float)
        th = np.arctan2(np.hypot(p[..., 0], p[..., 1]), p[..., 2])
        ph = np.mod(np.arctan2(p[..., 1], p[..., 0]), TWO_PI)
        ph = np.where((th == 0.0) | (th == np.pi), 0.0, ph)
        return np.stack([th, ph], axis=-1)

    @staticmethod
    def frame(x):
        """Orthonormal tangent frame ``(e_theta, e_phi)`` at chart point ``x``.

        Built from the chart coordinates, so it is defined (though not
        continuous) at the poles, where canonical points carry ``phi = 0``.
        Returns shape ``(..., 3, 2)``: columns are the frame vectors.
        """
        x = np.asarray(x, float)
        th, ph = x[..., 0], x[..., 1]
        ct, st, cp, sp = np.cos(th), np.sin(th), np.cos(ph), np.sin(ph)
        e_th = np.stack([ct * cp, ct * sp, -st], axis=-1)
        e_ph = np.stack([-sp, cp, np.zeros_like(ph)], axis=-1)
        return np.stack([e_th, e_ph], axis=-1)

    def canonical(self, x):
        x = np.asarray(x, float)
        th, ph = x[..., 0], x[..., 1]
        inside = np.all((th >= 0.0) & (th <= np.pi))
        if inside:
            ph = np.mod(ph, TWO_PI)
            ph = np.where((th == 0.0) | (th == np.pi), 0.0, ph)
            return np.stack([th, ph], axis=-1)
        return self.from_unit(self.to_unit(x))

    def angle(self, x, y):
        p, q = self.to_unit(x), self.to_unit(y)
        return np.arctan2(np.linalg.norm(np.cross(p, q), axis=-1), np.sum(p * q, axis=-1))

    def distance(self, x, y):
        return self.radius * self.angle(x, y)

    def cut_locus_predicate(self, x, y):
        return np.linalg.norm(self.to_unit(x) + self.to_unit(y), axis=-1) <= CUT_TOL

    def _slerp(self, p, q, s):
        """Great-circle interpolation between unit vectors (no cut check)."""
        cross = np.cross(p, q)
        sin_a = np.linalg.norm(cross, axis=-1)
        a = np.arctan2(sin_a, np.sum(p * q, axis=-1))
        # tangent direction at p towards q
        u = q - np.sum(p * q, axis=-1)[..., None] * p
        un = np.linalg.norm(u, axis=-1)
        u = np.where(un[..., None] > 0, u / np.where(un > 0, un, 1.0)[..., None], 0.0)
        sa = np.asarray(s) * a
        return np.cos(sa)[..., None] * p + np.sin(sa)[..., None] * u

    def _geodesic(self, x, y, s):
        return self.from_unit(self._slerp(self.to_unit(x), self.to_unit(y), s))

    def scalar_curvature(self, x=None):
        return 2.0 / self.radius**2

    def quadrature_grid(self, N):
        if N < 4:
            raise ValueError("quadrature grid needs N >= 4")
        z, wz = np.polynomial.legendre.leggauss(N)
        th = np.arccos(z[::-1])
        wz = wz[::-1]
        ph = TWO_PI * np.arange(2 * N) / (2 * N)
        TH, PH = np.meshgrid(th, ph, indexing="ij")
        nodes = np.stack([TH.ravel(), PH.ravel()], axis=-1)
        weights = (np.outer(wz, np.full(2 * N, np.pi / N)) * self.radius**2).ravel()
        return QuadratureGrid(self, nodes, weights, N, (N, 2 * N))

    def sample_uniform(self, rng, size=None):
        n = 1 if size is None else size
        z = rng.uniform(-1.0, 1.0, size=n)
        ph = rng.uniform(0.0, TWO_PI, size=n)
        out = np.stack([np.arccos(z), ph], axis=-1)
        return out[0] if size is None else out


def parse_manifold(spec: str) -> ModelManifold:
    """Build a manifold from ``s1:R``, ``t2:L1,L2`` or ``s2:R``."""
    kind, _, args = spec.strip().partition(":")
    kind = kind.lower()
    try:
        vals = [float(a) for a in args.split(",")] if args else []
    except ValueError:
        raise ValueError(f"bad manifold spec {spec!r}") from None
    if kind == "s1":
        return Circle(*(vals or [1.0]))
    if kind == "t2":
        if len(vals) == 1:
            vals = vals * 2
        return FlatTorus(*(vals or [1.0, 1.0]))
    if kind == "s2":
        return Sphere(*(vals or [1.0]))
    raise ValueError(f"unknown manifold kind {kind!r} in {spec!r}")
