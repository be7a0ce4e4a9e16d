"""Hermitian bundles with metric connections over the model manifolds.

Fibers are complex throughout.  Three bundle models exist:

``line``
    trivial line bundle, ``nabla = d``; the potential is a scalar field.
``rank2``
    trivial rank-2 bundle over the circle with connection ``d + A ds``
    (``A`` skew-hermitian per unit arc length) and a hermitian potential.
``tangent-s2``
    tangent bundle of the round sphere with the Levi-Civita connection,
    expressed in the chart frame ``(e_theta, e_phi)`` of
    :meth:`heatpath.geometry.Sphere.frame`.

Transport matrices are always taken along the unique shortest geodesic
``gamma`` from ``x`` (parameter 0) to ``y`` (parameter 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm as _scipy_expm

from .errors import CutLocusError, ConfigError
from .geometry import Circle, ModelManifold, Sphere

GENERATOR = np.array([[0.0, -1.0], [1.0, 0.0]], dtype=complex)


def gauss_legendre01(n):
    """Gauss-Legendre nodes and weights on ``[0, 1]``."""
    z, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (z + 1.0), 0.5 * w


def expm(a):
    """Batched matrix exponential over the last two axes."""
    a = np.asarray(a)
    if a.shape[-1] == 1:
        return np.exp(a)
    if a.ndim == 2:
        return _scipy_expm(a)
    flat = a.reshape((-1,) + a.shape[-2:])
    return _scipy_expm(flat).reshape(a.shape)


def dagger(a):
    return np.conj(np.swapaxes(a, -1, -2))


# ---------------------------------------------------------------------------
# smooth fields
# ---------------------------------------------------------------------------

def _profile(M: ModelManifold, x, kind: str):
    """Scalar profile ``cos`` / ``sin`` of the first chart angle."""
    x = np.asarray(x, float)
    ang = x[..., 0]
    if M.kind == "T2":
        ang = 2 * np.pi * ang / M.periods[0]
    return np.cos(ang) if kind == "cos" else np.sin(ang)


@dataclass(frozen=True)
class Field:
    """A smooth section of ``End(E)`` given by a vectorised callable.

    ``fn(M, x)`` returns an array of shape ``x.shape[:-1] + (k, k)``.
    ``constant`` holds the matrix when the field does not depend on the
    point, ``scalar`` marks multiples of the identity.
    """

    name: str
    rank: int
    fn: Callable
    constant: Optional[np.ndarray] = None
    scalar: bool = False

    def __call__(self, M, x):
        return np.asarray(self.fn(M, x), dtype=complex)

    @property
    def is_zero(self):
        return self.constant is not None and not np.any(self.constant)


def constant_field(name, mat, scalar=None):
    mat = np.atleast_2d(np.asarray(mat, dtype=complex))
    k = mat.shape[0]
    if scalar is None:
        scalar = bool(np.allclose(mat, mat[0, 0] * np.eye(k)))

    def fn(M, x):
        x = np.asarray(x, float)
        return np.broadcast_to(mat, x.shape[:-1] + (k, k))

    return Field(name, k, fn, constant=mat, scalar=scalar)


def scalar_profile_field(name, kind, amplitude=1.0, offset=0.0, rank=1):
    eye = np.eye(rank, dtype=complex)

    def fn(M, x):
        v = offset + amplitude * _profile(M, x, kind)
        return v[..., None, None] * eye

    return Field(name, rank, fn, scalar=True)


def _a4_potential(M, x):
    c = _profile(M, x, "cos")
    s = _profile(M, x, "sin")
    out = np.zeros(c.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = c
    out[..., 1, 1] = -c
    out[..., 0, 1] = 0.3 * s
    out[..., 1, 0] = 0.3 * s
    return out


def _cos_skew(M, x):
    return 0.5 * _profile(M, x, "cos")[..., None, None] * GENERATOR


CONNECTIONS = {
    "zero": constant_field("zero", np.zeros((2, 2))),
    "half-skew": constant_field("half-skew", 0.5 * GENERATOR, scalar=False),
    "skew": constant_field("skew", GENERATOR, scalar=False),
    "cos-skew": Field("cos-skew", 2, _cos_skew),
}

POTENTIALS_RANK2 = {
    "zero": constant_field("zero", np.zeros((2, 2))),
    "one": constant_field("one", np.eye(2)),
    "cos": scalar_profile_field("cos", "cos", rank=2),
    "a4": Field("a4", 2, _a4_potential),
}

POTENTIALS_LINE = {
    "zero": constant_field("zero", [[0.0]]),
    "one": constant_field("one", [[1.0]]),
    "cos": scalar_profile_field("cos", "cos"),
    "sin": scalar_profile_field("sin", "sin"),
}


# ---------------------------------------------------------------------------
# bundle models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BundleModel:
    kind: str
    manifold: ModelManifold
    rank: int
    potential: Field
    connection: Optional[Field] = None

    def __post_init__(self):
        if self.kind == "rank2" and not isinstance(self.manifold, Circle):
            raise ConfigError("rank2 bundles are only modelled over S1")
        if self.kind == "tangent-s2" and not isinstance(self.manifold, Sphere):
            raise ConfigError("tangent-s2 needs the sphere")
        if self.potential.rank != self.rank:
            raise ConfigError("potential rank does not match bundle rank")

    @property
    def spec(self):
        if self.kind == "line":
            return "line" if self.potential.is_zero else f"line:{self.potential.name}"
        if self.kind == "rank2":
            return f"rank2:{self.connection.name}:{self.potential.name}"
        return "tangent-s2" if self.potential.is_zero else f"tangent-s2:{self.potential.name}"

    @property
    def flat_connection(self):
        """True when parallel transport is the identity."""
        return self.kind == "line" or (self.connection is not None and self.connection.is_zero)

    @property
    def scalar_potential(self):
        return self.potential.scalar

    def V(self, x):
        return self.potential(self.manifold, x)


def line_bundle(M, potential="zero"):
    pot = POTENTIALS_LINE[potential] if isinstance(potential, str) else potential
    return BundleModel("line", M, 1, pot)


def rank2_bundle(M, connection="half-skew", potential="a4"):
    conn = CONNECTIONS[connection] if isinstance(connection, str) else connection
    pot = POTENTIALS_RANK2[potential] if isinstance(potential, str) else potential
    return BundleModel("rank2", M, 2, pot, conn)


def tangent_s2_bundle(M, potential="zero"):
    pot = POTENTIALS_RANK2[potential] if isinstance(potential, str) else potential
    return BundleModel("tangent-s2", M, 2, pot)


def parse_bundle(spec: str, M: ModelManifold) -> BundleModel:
    """Parse ``line[:V]``, ``rank2:<A>:<V>`` or ``tangent-s2[:V]``."""
    parts = spec.strip().split(":")
    kind = parts[0].lower()
    try:
        if kind == "line":
            return line_bundle(M, parts[1] if len(parts) > 1 else "zero")
        if kind == "rank2":
            if len(parts) != 3:
                raise ValueError
            return rank2_bundle(M, parts[1], parts[2])
        if kind == "tangent-s2":
            return tangent_s2_bundle(M, parts[1] if len(parts) > 1 else "zero")
    except KeyError as exc:
        raise ValueError(f"unknown field {exc} in bundle spec {spec!r}") from None
    except ValueError:
        raise ValueError(f"bad bundle spec {spec!r}") from None
    raise ValueError(f"unknown bundle kind {kind!r}")


# ---------------------------------------------------------------------------
# parallel transport
# ---------------------------------------------------------------------------

@dataclass
class TransportMap:
    matrix: np.ndarray
    source: np.ndarray
    target: np.ndarray
    s: float
    t: float


def _const_skew_exp(A, scale):
    """``exp(-A * scale)`` for skew-hermitian ``A`` and an array of scales."""
    lam, Q = np.linalg.eigh(1j * A)  # A = -i Q diag(lam) Q^H
    ph = np.exp(1j * np.asarray(scale)[..., None] * lam)
    return np.einsum("ij,...j,kj->...ik", Q, ph, Q.conj())


def _rk4_transport(B, x, disp, s_nodes, substeps):
    """Integrate tau' = -A(gamma(u)) disp tau from 0 through sorted s_nodes."""
    M = B.manifold
    A = B.connection
    k = B.rank
    shape = disp.shape
    T = np.broadcast_to(np.eye(k, dtype=complex), shape + (k, k)).copy()
    out = np.empty(shape + (len(s_nodes), k, k), dtype=complex)
    theta0 = np.asarray(x, float)[..., 0]
    ang = disp / M.radius

    def rhs(u, T):
        pt = (theta0 + u * ang)[..., None]
        return -(A(M, pt) * disp[..., None, None]) @ T

    u = 0.0
    for i, s in enumerate(s_nodes):
        if s > u:
            h = (s - u) / substeps
            for _ in range(substeps):
                k1 = rhs(u, T)
                k2 = rhs(u + h / 2, T + h / 2 * k1)
                k3 = rhs(u + h / 2, T + h / 2 * k2)
                k4 = rhs(u + h, T + h * k3)
                T = T + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                u += h
            u = s
        out[..., i, :, :] = T
    return out


def path_transport(B: BundleModel, x, y, s_nodes, tol=1e-10):
    """Transport matrices ``tau_0^s`` along the geodesic from ``x`` to ``y``.

    ``x`` and ``y`` are batches of chart points; ``s_nodes`` a 1-D array in
    ``[0, 1]``.  Returns shape ``batch + (len(s_nodes), k, k)`` mapping the
    fiber frame at ``x`` to the frame at ``gamma(s)``.  No cut-locus check.
    """
    M = B.manifold
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    s_nodes = np.atleast_1d(np.asarray(s_nodes, float))
    batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
    k = B.rank
    if B.flat_connection:
        return np.broadcast_to(np.eye(k, dtype=complex), batch + (len(s_nodes), k, k)).copy()
    if B.kind == "rank2":
        disp = np.broadcast_to(M.displacement(x, y), batch)
        if B.connection.constant is not None:
            return _const_skew_exp(B.connection.constant, disp[..., None] * s_nodes)
        order = np.argsort(s_nodes)
        sorted_s = s_nodes[order]
        xb = np.broadcast_to(x, batch + (1,))
        n = 8
        prev = _rk4_transport(B, xb, disp, sorted_s, n)
        while True:
            n *= 2
            cur = _rk4_transport(B, xb, disp, sorted_s, n)
            if np.max(np.abs(cur - prev), initial=0.0) <= tol or n >= 4096:
                break
            prev = cur
        out = np.empty_like(cur)
        out[..., order, :, :] = cur
        return out
    # tangent bundle of S2: rotation about the great-circle axis
    p = np.broadcast_to(M.to_unit(x), batch + (3,))
    q = np.broadcast_to(M.to_unit(y), batch + (3,))
    axis = np.cross(p, q)
    sin_a = np.linalg.norm(axis, axis=-1)
    alpha = np.arctan2(sin_a, np.sum(p * q, axis=-1))
    axis = axis / np.where(sin_a > 0, sin_a, 1.0)[..., None]
    ang = alpha[..., None] * s_nodes  # batch + (n,)
    c, s = np.cos(ang), np.sin(ang)
    K = np.zeros(batch + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -axis[..., 2], axis[..., 1]
    K[..., 1, 0], K[..., 1, 2] = axis[..., 2], -axis[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -axis[..., 1], axis[..., 0]
    K = K[..., None, :, :]
    R = (np.eye(3) + s[..., None, None] * K + (1 - c)[..., None, None] * (K @ K))
    pts = M.segment_points(x, y, s_nodes)
    F0 = M.frame(x)[..., None, :, :]
    Fs = M.frame(pts)
    return (np.swapaxes(Fs, -1, -2) @ R @ F0).astype(complex)


def parallel_transport(B: BundleModel, x, y, s=0.0, t=1.0):
    """Parallel transport ``tau_s^t`` along the shortest geodesic x -> y."""
    M = B.manifold
    if np.any(M.cut_locus_predicate(x, y)):
        raise CutLocusError()
    T = path_transport(B, x, y, np.array([s, t]))
    mat = T[..., 1, :, :] @ dagger(T[..., 0, :, :])
    return TransportMap(mat, np.asarray(x, float), np.asarray(y, float), float(s), float(t))


def transport_ode_oracle(B: BundleModel, x, y, s=0.0, t=1.0, steps=2000):
    """Independent RK4 integration of the transport ODE (test oracle).

    For the sphere the ODE is ``v' = -(v . gamma') gamma`` in R^3, for rank-2
    bundles ``tau' = -A(gamma) gamma' tau``.
    """
    M = B.manifold
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    k = B.rank
    if B.kind == "rank2":
        disp = float(M.displacement(x, y))
        A = B.connection

        def rhs(u, T):
            return -(A(M, np.array([x[0] + u * disp / M.radius]))[...] * disp) @ T

        T = np.eye(k, dtype=complex)
        h = (t - s) / steps
        u = s
        for _ in range(steps):
            k1 = rhs(u, T)
            k2 = rhs(u + h / 2, T + h / 2 * k1)
            k3 = rhs(u + h / 2, T + h / 2 * k2)
            k4 = rhs(u + h, T + h * k3)
            T = T + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            u += h
        return T
    if B.kind == "tangent-s2":
        p, q = M.to_unit(x), M.to_unit(y)
        alpha = np.arctan2(np.linalg.norm(np.cross(p, q)), p @ q)
        w = q - (p @ q) * p
        w = w / np.linalg.norm(w)

        def gam(u):
            return np.cos(alpha * u) * p + np.sin(alpha * u) * w

        def dgam(u):
            return alpha * (-np.sin(alpha * u) * p + np.cos(alpha * u) * w)

        def rhs(u, V):
            g, dg = gam(u), dgam(u)
            return -np.outer(g, dg @ V)

        start = M.from_unit(gam(s))
        V = M.frame(start)
        h = (t - s) / steps
        u = s
        for _ in range(steps):
            k1 = rhs(u, V)
            k2 = rhs(u + h / 2, V + h / 2 * k1)
            k3 = rhs(u + h / 2, V + h / 2 * k2)
            k4 = rhs(u + h, V + h * k3)
            V = V + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            u += h
        end = M.from_unit(gam(t))
        return (M.frame(end).T @ V).astype(complex)
    return np.eye(k, dtype=complex)


# ---------------------------------------------------------------------------
# transported integrals and ordered exponentials
# ---------------------------------------------------------------------------

def _field_values(B, W, pts):
    if isinstance(W, Field):
        return W(B.manifold, pts)
    return np.asarray(W(pts), dtype=complex)


def transported_average(B, x, y, W, n_nodes=8):
    """``T(1)`` and ``int_0^1 T(s)^-1 W(gamma(s)) T(s) ds`` for pairs x -> y.

    ``T(s)`` is the transport from ``x`` to ``gamma(s)``; the average lives in
    ``End(E_x)``.
    """
    M = B.manifold
    s, w = gauss_legendre01(n_nodes)
    pts = M.segment_points(x, y, s)
    Wv = _field_values(B, W, pts)
    if B.flat_connection:
        avg = np.einsum("...nij,n->...ij", Wv, w)
        batch = avg.shape[:-2]
        return np.broadcast_to(np.eye(B.rank, dtype=complex), batch + (B.rank, B.rank)), avg
    T = path_transport(B, x, y, np.concatenate([s, [1.0]]))
    Ts, T1 = T[..., :-1, :, :], T[..., -1, :, :]
    avg = np.einsum("...nij,n->...ij", dagger(Ts) @ Wv @ Ts, w)
    return T1, avg


def segment_exp(B: BundleModel, x, y, W, quad_nodes=None, scale=1.0, tol=1e-11):
    """One factor ``tau_0^1 exp(scale * int_0^1 tau_s^0 W tau_0^s ds)``.

    With ``quad_nodes=None`` the Gauss-Legendre rule starts at 8 nodes and
    doubles until the exponent is stable to ``tol``.
    """
    M = B.manifold
    if np.any(M.cut_locus_predicate(x, y)):
        raise CutLocusError()
    if quad_nodes is None:
        n = 8
        T1, avg = transported_average(B, x, y, W, n)
        while n < 256:
            n *= 2
            T1b, avg2 = transported_average(B, x, y, W, n)
            done = np.max(np.abs(avg2 - avg), initial=0.0) <= tol
            avg = avg2
            if done:
                break
    else:
        T1, avg = transported_average(B, x, y, W, quad_nodes)
    return T1 @ expm(scale * avg)


def ordered_exponential(B: BundleModel, partition, vertices, W, quad_nodes=12):
    """The (P, gamma)-ordered exponential, a map ``E_{x_0} -> E_{x_r}``.

    ``vertices`` has shape ``batch + (r + 1, chart_dim)``.  Segment factors
    are composed right to left; each exponent integrates over the physical
    parameter interval of its segment.
    """
    M = B.manifold
    vertices = np.asarray(vertices, float)
    ds = np.diff(partition.breakpoints)
    batch = vertices.shape[:-2]
    out = np.broadcast_to(np.eye(B.rank, dtype=complex), batch + (B.rank, B.rank)).copy()
    for j in range(len(ds)):
        a, b = vertices[..., j, :], vertices[..., j + 1, :]
        if np.any(M.cut_locus_predicate(a, b)):
            raise CutLocusError(segment=j + 1)
        T1, avg = transported_average(B, a, b, W, quad_nodes)
        out = T1 @ expm(ds[j] * avg) @ out
    return out


def unordered_exponential(B: BundleModel, partition, vertices, W, quad_nodes=12):
    """``tau_0^1 exp(int_0^1 tau_s^0 W tau_0^s ds)`` along the whole polygon.

    Equal to :func:`ordered_exponential` when the transported values of ``W``
    commute (e.g. scalar ``W``); used to measure path ordering effects.
    """
    M = B.manifold
    vertices = np.asarray(vertices, float)
    ds = np.diff(partition.breakpoints)
    batch = vertices.shape[:-2]
    eye = np.broadcast_to(np.eye(B.rank, dtype=complex), batch + (B.rank, B.rank))
    full = eye.copy()  # transport from gamma(0) to the current vertex
    total = np.zeros_like(full)
    for j in range(len(ds)):
        a, b = vertices[..., j, :], vertices[..., j + 1, :]
        if np.any(M.cut_locus_predicate(a, b)):
            raise CutLocusError(segment=j + 1)
        T1, avg = transported_average(B, a, b, W, quad_nodes)
        total = total + ds[j] * (dagger(full) @ avg @ full)
        full = T1 @ full
    return full @ expm(total)
