"""Rotation-invariant Kahler geometries on CP^n in the anticanonical class.

This module is the source of truth for the numerical conventions used across
the package.

Conventions table
-----------------
Forms and coefficient arrays
    A (1,1)-form is stored by its coefficient array in the convention
    ``alpha = (i/2) A_{k,lbar} dz_k ^ dzbar_l``.  The metric array ``W`` is
    twice the complex Hessian of a local potential: ``omega = i ddbar P``
    gives ``W = 2 * Hess(P)``.
Trace
    ``Tr_omega(alpha) = 2 tr(W^{-1} A)``, so ``Tr_omega(omega) = 2n``.
Laplacian
    ``Lap_omega u = 4 w^{l,rbar} u_{r,lbar} = Tr_omega(i ddbar u)``.  On the
    round reference this is the metric Laplace-Beltrami operator; the first
    nonzero eigenvalue of the reference sphere (n = 1) is 2.
Gradients
    ``|du|^2_omega = 2 w^{l,kbar} u_k u_lbar`` and ``|grad u|^2 = 2 |du|^2``.
Ricci and scalar curvature
    ``Ric(omega) = -i ddbar log det(W)`` with array ``-2 ddbar log det W``;
    ``Scal = Tr_omega(Ric)``.  The reference is Einstein, ``Ric = omega``,
    which pins ``Scal = 2n`` and the total volume ``V = (2 pi (n+1))^n``.

Symmetry reduction
------------------
Invariant metrics are encoded by a single moment profile.  With
``x = |z|^2 / (1 + |z|^2)`` in [0, 1] and an invariant potential ``phi(x)``,

    m(x)    = (n+1) x + x (1-x) phi_x        (moment profile)
    mbar(x) = m / x  = (n+1) + (1-x) phi_x   (regular at x = 0)
    m_x     = (n+1) + beta phi_xx + (1-2x) phi_x,   beta = x (1-x)

Positivity of the metric is ``m_x > 0`` on [0, 1] and ``m > 0`` inside.
The volume density against the reference is

    f = omega_phi^n / omega^n = (mbar / (n+1))^{n-1} * m_x / (n+1)

and integrals reduce to ``int_X F omega^n = V int_0^1 F(x) n x^{n-1} dx``.
Reduced operators (metric with profile m):

    Lap u   = 2 (n-1)(1-x) u_x / mbar + 2 (beta u_xx + (1-2x) u_x) / m_x
    |du|^2  = beta u_x^2 / m_x

Discretization is Chebyshev-Lobatto collocation on [0, 1].  The composite
``(beta u_x)_x`` is always expanded to ``beta u_xx + (1-2x) u_x`` so that the
discrete operator image stays inside the collocation polynomial space; the
naive product form aliases and acquires a spurious neutral mode.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import chebyshev as _cheb
from numpy.polynomial import polynomial as _poly
from scipy.linalg import eigh, solve
from scipy.special import roots_jacobi

FORMAT_VERSION = 1


class AdmissibilityError(ValueError):
    """Raised when omega + i ddbar phi fails positivity on the grid."""

    def __init__(self, message, locations=None, values=None):
        super().__init__(message)
        self.locations = np.asarray(locations) if locations is not None else None
        self.values = np.asarray(values) if values is not None else None


class SolverError(RuntimeError):
    """A linear or scalar solve did not meet its residual target."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def chebyshev_lobatto(N: int):
    """Ascending Chebyshev-Lobatto nodes on [0, 1] and the differentiation matrix."""
    j = np.arange(N)
    t = -np.cos(np.pi * j / (N - 1))
    x = (t + 1.0) / 2.0
    c = np.ones(N)
    c[0] = 2.0
    c[-1] = 2.0
    c *= (-1.0) ** j
    dT = np.tile(t, (N, 1)).T - t + np.eye(N)
    D = np.outer(c, 1.0 / c) / dT
    D -= np.diag(D.sum(axis=1))
    return x, 2.0 * D


def _cheb_line_integral(j: int) -> float:
    """int_{-1}^{1} T_j(t) dt."""
    return 0.0 if j % 2 else 2.0 / (1.0 - j * j)


def _modified_weights(x: np.ndarray, n: int) -> np.ndarray:
    """Interpolatory weights for int_0^1 F(x) n x^{n-1} dx on the given nodes.

    Exact for polynomials up to degree N-1 (Clenshaw-Curtis with the volume
    weight, via modified Chebyshev moments).
    """
    N = len(x)
    t = 2.0 * x - 1.0
    M = np.cos(np.outer(np.arange(N), np.arccos(np.clip(t, -1.0, 1.0))))
    dens = _poly.Polynomial([0.5, 0.5]) ** (n - 1) * n
    cb = _cheb.poly2cheb(dens.coef)
    mom = np.empty(N)
    for k in range(N):
        mom[k] = 0.5 * sum(
            c * 0.5 * (_cheb_line_integral(k + b) + _cheb_line_integral(abs(k - b)))
            for b, c in enumerate(cb)
        )
    return solve(M, mom)


def _values(u) -> np.ndarray:
    if isinstance(u, ScalarField):
        return u.values
    if isinstance(u, KahlerPotential):
        return u.values
    return np.asarray(u, dtype=float)


@dataclass
class ScalarField:
    """Grid values of an invariant scalar with a role tag."""

    values: np.ndarray
    role: str = "generic"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scalar field contains non-finite values")


class SymmetricGeometry:
    """Reference round geometry on CP^n, reduced to a Chebyshev grid in x.

    Carries the grid, differentiation matrices, the volume quadrature (sum of
    ``quadrature_weights`` against grid values integrates over X with the
    reference volume form), and a strictly positive Gauss-Jacobi rule used
    for quadratic-form assembly.
    """

    def __init__(self, n: int, N: int):
        if n < 1:
            raise ValueError("complex dimension n must be >= 1")
        if N < 16:
            raise ValueError("collocation size N must be >= 16")
        self.n = int(n)
        self.N = int(N)
        self.x_grid, self.D = chebyshev_lobatto(N)
        self.D2 = self.D @ self.D
        self.beta = self.x_grid * (1.0 - self.x_grid)
        self.V = (2.0 * np.pi * (n + 1)) ** n
        self.plain_weights = _modified_weights(self.x_grid, 1)
        self.quadrature_weights = self.V * _modified_weights(self.x_grid, n)
        # boundary nodes carry no volume for n >= 2; interior weights must be
        # positive and the exact rule may leave O(1e-7 V) dust at the ends
        interior = self.x_grid > 0.01
        if np.any(self.quadrature_weights[interior] <= 0):
            raise SolverError("non-positive interior quadrature weight")
        if np.max(np.abs(self.quadrature_weights[~interior])) > 1e-6 * self.V:
            raise SolverError("boundary quadrature weights out of tolerance")
        self.reference_profile = (n + 1.0) * self.x_grid
        self.h_ref = np.zeros(N)

    # -- quadrature ------------------------------------------------------
    @cached_property
    def _gauss(self):
        """Strictly positive Gauss-Jacobi rule for the volume measure."""
        K = self.N + 8
        t, gw = roots_jacobi(K, 0.0, self.n - 1.0)
        xg = (t + 1.0) / 2.0
        gw = self.V * self.n * 2.0 ** (-self.n) * gw
        P = self.interpolation_matrix(xg)
        return xg, gw, P, P @ self.D

    def interpolation_matrix(self, xq: np.ndarray) -> np.ndarray:
        """Barycentric interpolation from the Lobatto grid to points xq."""
        N = self.N
        w = (-1.0) ** np.arange(N)
        w[0] *= 0.5
        w[-1] *= 0.5
        P = np.zeros((len(xq), N))
        for i, xi in enumerate(xq):
            d = xi - self.x_grid
            hit = np.flatnonzero(np.abs(d) < 1e-14)
            if hit.size:
                P[i, hit[0]] = 1.0
            else:
                r = w / d
                P[i] = r / r.sum()
        return P

    def integrate(self, values, density=None) -> float:
        """int_X values * omega_?^n; density = omega_?^n / omega^n (default 1)."""
        w = self.quadrature_weights
        if density is not None:
            w = w * _values(density)
        return float(np.sum(w * _values(values)))

    def sderiv(self, v: np.ndarray) -> np.ndarray:
        """(beta v_x)_x expanded without grid aliasing."""
        return self.beta * (self.D2 @ v) + (1.0 - 2.0 * self.x_grid) * (self.D @ v)

    def antiderivative(self, q: np.ndarray) -> np.ndarray:
        """Grid values of int_0^x q, via Chebyshev coefficients."""
        t = 2.0 * self.x_grid - 1.0
        M = np.cos(np.outer(np.arange(self.N), np.arccos(np.clip(t, -1.0, 1.0))))
        a = solve(M.T, q)  # values -> coefficients (M.T maps coeffs to values)
        cheb = _cheb.Chebyshev(a).integ()
        vals = cheb(t) * 0.5  # d x = d t / 2
        return vals - vals[0]

    # -- reference metric and curvature constant --------------------------
    @cached_property
    def reference_metric(self) -> "MetricData":
        return metric_from_potential(self, np.zeros(self.N))

    @cached_property
    def lambda1_reference(self) -> float:
        """Smallest eigenvalue of the reference Chern curvature form on T (x) T.

        Evaluated through the local-chart kernel at several grid points; the
        reference is homogeneous so the values must agree.
        """
        from .tensor import bisectional_and_lambda1, fubini_study_patch

        patch = fubini_study_patch(self.n)
        vals = []
        for xi in (0.0, 0.35, 0.8):
            r = np.sqrt(xi / (1.0 - xi)) if xi > 0 else 0.0
            z = np.zeros(self.n, dtype=complex)
            z[0] = r
            vals.append(bisectional_and_lambda1(patch, z)[1])
        if np.ptp(vals) > 1e-8:
            raise SolverError("reference curvature eigenvalue not constant", np.ptp(vals))
        return float(np.mean(vals))

    # -- serialization -----------------------------------------------------
    def to_json(self) -> str:
        doc = {
            "format_version": FORMAT_VERSION,
            "n": self.n,
            "N": self.N,
            "x_grid": self.x_grid.tolist(),
            "profile": self.reference_profile.tolist(),
            "V": self.V,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SymmetricGeometry":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported geometry format_version {doc.get('format_version')!r}")
        geom = cls(doc["n"], doc["N"])
        if not np.allclose(geom.x_grid, doc["x_grid"], atol=1e-14):
            raise ValueError("geometry grid mismatch")
        if abs(geom.V - doc["V"]) > 1e-9 * geom.V:
            raise ValueError("geometry volume mismatch")
        return geom


def fubini_study(n: int, N: int) -> SymmetricGeometry:
    """Reference geometry: the Einstein round metric on CP^n, Scal = 2n."""
    return SymmetricGeometry(n, N)


@dataclass
class KahlerPotential:
    """Invariant potential phi with omega + i ddbar phi > 0 on the grid."""

    values: np.ndarray
    geometry: SymmetricGeometry

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.geometry.N,):
            raise ValueError("potential shape does not match the grid")
        metric_from_potential(self.geometry, self.values)  # validates


@dataclass
class MetricData:
    """Profiles of an invariant metric omega_phi, cached for reuse."""

    geom: SymmetricGeometry
    phi: np.ndarray
    m: np.ndarray
    mbar: np.ndarray
    mx: np.ndarray
    f: np.ndarray
    logf: np.ndarray

    @cached_property
    def scal(self) -> np.ndarray:
        qbar, qx = ricci_profiles(self)
        return 2.0 * ((self.geom.n - 1) * qbar / self.mbar + qx / self.mx)

    def integrate(self, values, h=None) -> float:
        w = self.geom.quadrature_weights * self.f
        if h is not None:
            w = w * np.exp(_values(h))
        return float(np.sum(w * _values(values)))


def metric_from_potential(geom: SymmetricGeometry, phi) -> MetricData:
    """Metric profiles of omega + i ddbar phi; raises on positivity failure."""
    phi = _values(phi)
    n, x = geom.n, geom.x_grid
    phix = geom.D @ phi
    mbar = (n + 1.0) + (1.0 - x) * phix
    mx = (n + 1.0) + geom.sderiv(phi)
    bad = (mx <= 0) | (mbar <= 0)
    if np.any(bad):
        raise AdmissibilityError(
            f"metric positivity fails at {int(bad.sum())} node(s), "
            f"first at x = {x[bad][0]:.6f}",
            locations=x[bad],
            values=np.minimum(mx, mbar)[bad],
        )
    f = (mbar / (n + 1.0)) ** (n - 1) * mx / (n + 1.0)
    return MetricData(geom=geom, phi=phi, m=x * mbar, mbar=mbar, mx=mx, f=f, logf=np.log(f))


def laplacian(metric, u) -> np.ndarray:
    """Metric Laplacian of an invariant scalar (annihilates constants exactly)."""
    md = metric if isinstance(metric, MetricData) else metric.reference_metric
    g = md.geom
    u = _values(u)
    ux = g.D @ u
    return 2.0 * (g.n - 1) * (1.0 - g.x_grid) * ux / md.mbar + 2.0 * g.sderiv(u) / md.mx


def laplacian_matrix(md: MetricData) -> np.ndarray:
    """Dense matrix of the metric Laplacian on grid values."""
    g = md.geom
    S = g.beta[:, None] * g.D2 + (1.0 - 2.0 * g.x_grid)[:, None] * g.D
    return (2.0 * (g.n - 1) * ((1.0 - g.x_grid) / md.mbar)[:, None] * g.D
            + 2.0 * (1.0 / md.mx)[:, None] * S)


def gradient_norms(md: MetricData, u):
    """(|du|^2, |grad u|^2) of an invariant scalar; the second is twice the first."""
    ux = md.geom.D @ _values(u)
    dsq = md.geom.beta * ux ** 2 / md.mx
    return dsq, 2.0 * dsq


def pairing_du_dv(md: MetricData, u, v) -> np.ndarray:
    """<du, dv>_omega for real invariant scalars (polarization of |du|^2)."""
    D = md.geom.D
    return md.geom.beta * (D @ _values(u)) * (D @ _values(v)) / md.mx


def weighted_laplacian(md: MetricData, h, u) -> np.ndarray:
    """Lap_{omega,h} u = Lap u + 2 <du, dh>; self-adjoint for e^h omega^n."""
    return laplacian(md, u) + 2.0 * pairing_du_dv(md, u, h)


def ricci_profiles(md: MetricData):
    """(qbar, q_x) of the Ricci form, q = m0 - beta (log f)_x."""
    g = md.geom
    n = g.n
    lfx = g.D @ md.logf
    qbar = (n + 1.0) - (1.0 - g.x_grid) * lfx
    qx = (n + 1.0) - g.sderiv(md.logf)
    return qbar, qx


def form_sup_norm(md: MetricData, v) -> float:
    """Sup operator norm of i ddbar v measured against the metric.

    Max over the grid of the tangential and radial eigenvalue ratios of the
    exact form with potential v relative to omega_phi.
    """
    g = md.geom
    vx = g.D @ _values(v)
    tang = (1.0 - g.x_grid) * vx / md.mbar
    rad = g.sderiv(_values(v)) / md.mx
    return float(max(np.max(np.abs(tang)), np.max(np.abs(rad))))


def einstein_residual(md: MetricData) -> float:
    """Sup norm of Ric(omega_phi) - omega_phi against omega_phi."""
    return form_sup_norm(md, -(md.logf + md.phi))


def hessian20_norm(md: MetricData, u) -> np.ndarray:
    """|covariant (2,0)-Hessian|^2 of an invariant scalar against the metric.

    Vanishes exactly when the gradient field of u is holomorphic.  Reduced
    form: 2 [ (beta u_x)_x - (beta m_x)_x u_x / m_x ]^2 / m_x^2 with the
    composite derivatives expanded (m_x lies in the collocation space, so its
    spectral derivative is alias-free).
    """
    g = md.geom
    u = _values(u)
    ux = g.D @ u
    bmx_x = g.beta * (g.D @ md.mx) + (1.0 - 2.0 * g.x_grid) * md.mx
    hess = g.sderiv(u) - bmx_x * ux / md.mx
    return 2.0 * hess ** 2 / md.mx ** 2


def ricci_potential(geom: SymmetricGeometry, md: MetricData, residual_tol: float = 1e-8):
    """Potential h with Ric(omega_phi) - omega_phi = i ddbar h, mean e^h = 1.

    Solved as a 1-D linear problem for h_x from the reduced ddbar equation,
    then normalized; the additive constant is the unique root of the
    monotone normalization equation (available in closed form as a log-mean).
    """
    g = geom
    # moment increment of Ric - omega_phi
    qbar_ric, _ = ricci_profiles(md)
    p = g.x_grid * qbar_ric - md.m            # vanishes at both endpoints
    q = np.empty(g.N)
    inner = slice(1, -1)
    q[inner] = p[inner] / g.beta[inner]
    px = g.D @ p
    q[0] = px[0]
    q[-1] = -px[-1]
    h0 = g.antiderivative(q)
    # residual of the reduced equation beta h_x = p
    resid = float(np.max(np.abs(g.beta * (g.D @ h0) - p)))
    if resid > residual_tol:
        raise SolverError("ricci potential solve residual too large", residual=resid)
    # normalization: mean of e^h against omega_phi^n equals 1
    s = h0.max()
    kappa = -(s + np.log(md.integrate(np.exp(h0 - s)) / g.V))
    return ScalarField(h0 + kappa, role="potential")


def mean_integral(md: MetricData, u, weight=None) -> float:
    """(1/V) int_X u * weight * omega^n against the reference volume form."""
    w = md.geom.quadrature_weights
    if weight is not None:
        w = w * _values(weight)
    return float(np.sum(w * _values(u)) / md.geom.V)


def mean_against_metric(md: MetricData, u, h=None) -> float:
    """(1/V) int_X u e^h omega_phi^n."""
    return md.integrate(u, h=h) / md.geom.V


def diameter(md: MetricData) -> float:
    """Meridian length of the invariant metric (exact geodesic for n = 1).

    In the angle variable x = (1 - cos theta)/2 the integrand is smooth and
    the Lobatto grid is uniform, so the trapezoid rule is spectrally accurate.
    """
    g = md.geom
    theta = np.linspace(0.0, np.pi, g.N)
    return float(np.trapezoid(np.sqrt(md.mx / 2.0), theta))


def random_admissible_potential(geom, rng, amplitude=0.15, degree=6, margin=0.25,
                                max_tries=200):
    """Seeded smooth admissible potential with controlled positivity margin."""
    for _ in range(max_tries):
        coef = rng.standard_normal(degree) * amplitude / (1.0 + np.arange(degree)) ** 2
        phi = np.polynomial.legendre.legval(2.0 * geom.x_grid - 1.0, np.r_[0.0, 0.0, coef])
        try:
            md = metric_from_potential(geom, phi)
        except AdmissibilityError:
            continue
        floor = (geom.n + 1.0) * margin
        if md.mx.min() > floor and md.mbar.min() > floor:
            return phi
    raise RuntimeError("could not draw an admissible potential; lower the amplitude")


def first_eigenvalue_forms(md: MetricData, h):
    """(K, M) with K the Dirichlet form of int 2 |du|^2 e^h omega_phi^n and M
    the mass Gram of int u v e^h omega_phi^n, assembled on a strictly positive
    Gauss rule so both are symmetric (semi)definite."""
    g = md.geom
    xg, gw, P, PD = g._gauss
    eh = np.exp(_values(h))
    cK = 2.0 * xg * (1.0 - xg) * (P @ (md.f * eh / md.mx))
    cM = P @ (md.f * eh)
    if cM.min() <= 0 or cK.min() < 0:
        raise SolverError("interpolated eigenform coefficient lost positivity")
    K = PD.T @ ((gw * cK)[:, None] * PD)
    M = P.T @ ((gw * cM)[:, None] * P)
    return 0.5 * (K + K.T), 0.5 * (M + M.T)


def laplacian_spectrum(md: MetricData, h=None, k: int = 6) -> np.ndarray:
    """Lowest eigenvalues of -Lap_{omega,h} on the invariant sector."""
    if h is None:
        h = np.zeros(md.geom.N)
    K, M = first_eigenvalue_forms(md, h)
    vals = eigh(K, M, eigvals_only=True)
    return vals[:k]
