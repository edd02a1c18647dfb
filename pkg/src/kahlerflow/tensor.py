"""Local-chart complex tensor calculus for Hermitian/Kahler metrics.

Coefficient conventions follow :mod:`kahlerflow.geometry`: the metric on a
polydisc chart is ``omega = (i/2) W_{k,lbar} dz_k ^ dzbar_l`` with Hermitian
positive ``W``.  Curvature objects, with ``Winv`` the inverse array:

    C^{j,kbar}_{l,m} = -[d_j d_kbar W_{m,rbar}
                         - d_j W_{m,sbar} w^{s,tbar} d_kbar W_{t,rbar}] w^{r,lbar}
    R_{j,kbar,l,mbar} = -(1/2) C^{j,kbar}_{h,l} W_{h,mbar}
    Ric array (i/2-convention) = 2 C^{j,kbar}_{l,l} = -2 ddbar log det W
    Scal = 2 tr(Winv Ric)
    Rm^{s,tbar}_{j,kbar} = -4 w^{t,lbar} w^{m,sbar} R_{j,kbar,l,mbar}

With this sign the round CP^1 sphere has C = +2/(1+|z|^2)^2 in the
coordinate frame, negative R coefficient, positive bisectional curvature and
curvature-form eigenvalue lambda1 = 1/2.

Anti-holomorphic derivatives are never stored: Hermitian symmetry gives
``d_cbar W = conj(d_c W)^T`` and its higher-order analogues.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional

import numpy as np
from numpy.linalg import cholesky, eigvalsh, inv

CONDITION_LIMIT = 1e12

# 6th-order central stencils
_D1_OFF = np.arange(-3, 4)
_D1_W = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0
_D2_W = np.array([2.0, -27.0, 270.0, -490.0, 270.0, -27.0, 2.0]) / 180.0


class SingularMetricError(ValueError):
    """Metric coefficient matrix is numerically singular or indefinite."""


class NonKahlerError(ValueError):
    """Operation requires the Kahler flag / Kahler symmetries."""


class ChartDomainError(ValueError):
    """Requested point lies outside the patch polydisc."""


def _as_point(z, n):
    z = np.asarray(z, dtype=complex).reshape(-1)
    if z.shape != (n,):
        raise ValueError(f"chart point must have {n} complex entries")
    return z


@dataclass
class MetricPatch:
    """Hermitian metric coefficients on a polydisc chart with derivatives.

    ``eval(z)`` returns the n x n coefficient array W(z).  ``deriv1/2/3``
    return holomorphic-derivative stacks:

        d1[c]      = d_c W
        d2h[c,d]   = d_c d_d W          d2m[c,d] = d_c d_dbar W
        d3hhh[c,d,e] = d_c d_d d_e W    d3hhm[c,d,e] = d_c d_d d_ebar W

    When analytic derivative callables are absent they are sourced from
    6th-order central finite differences with step ``fd_step_factor`` times
    the smallest domain radius.
    """

    n: int
    eval: Callable[[np.ndarray], np.ndarray]
    domain: np.ndarray = None
    deriv1: Optional[Callable] = None
    deriv2: Optional[Callable] = None
    deriv3: Optional[Callable] = None
    kahler: bool = True
    fd_step_factor: float = 1e-2
    name: str = "patch"

    def __post_init__(self):
        if self.domain is None:
            self.domain = np.ones(self.n)
        self.domain = np.asarray(self.domain, dtype=float)
        self.derivative_source = "analytic" if self.deriv1 is not None else "finite-difference"

    # -- point checks ------------------------------------------------------
    def require_inside(self, z):
        z = _as_point(z, self.n)
        if np.any(np.abs(z) > self.domain):
            raise ChartDomainError(f"point {z} outside polydisc radii {self.domain}")
        return z

    def coeff(self, z) -> np.ndarray:
        z = self.require_inside(z)
        W = np.asarray(self.eval(z), dtype=complex)
        if np.max(np.abs(W - W.conj().T)) > 1e-10 * max(1.0, np.max(np.abs(W))):
            raise SingularMetricError("coefficient array is not Hermitian")
        ev = eigvalsh(W)
        if ev[0] <= 0:
            raise SingularMetricError("coefficient array is not positive definite")
        if ev[-1] / ev[0] > CONDITION_LIMIT:
            raise SingularMetricError(
                f"metric condition number {ev[-1] / ev[0]:.2e} exceeds {CONDITION_LIMIT:.0e}"
            )
        return W

    # -- derivatives (analytic or FD) ---------------------------------------
    def _fd_step(self) -> float:
        return float(np.min(self.domain)) * self.fd_step_factor

    def _fd_apply(self, orders, z):
        """Apply tensor-product 6th-order stencils.

        orders: list of (coordinate index, 'x'|'y', derivative order 1 or 2).
        """
        h = self._fd_step()
        pts = [(np.zeros(2 * self.n), 1.0)]
        for (ci, part, order) in orders:
            windex = 2 * ci + (0 if part == "x" else 1)
            wts = _D1_W if order == 1 else _D2_W
            new = []
            for off, w0 in pts:
                for o, w in zip(_D1_OFF, wts):
                    if w == 0.0:
                        continue
                    off2 = off.copy()
                    off2[windex] += o
                    new.append((off2, w0 * w / h ** order))
            pts = new
        acc = 0.0
        for off, w in pts:
            dz = off[0::2] * h + 1j * off[1::2] * h
            acc = acc + w * np.asarray(self.eval(z + dz), dtype=complex)
        return acc

    def _fd_dc(self, z, c):
        return 0.5 * (self._fd_apply([(c, "x", 1)], z) - 1j * self._fd_apply([(c, "y", 1)], z))

    def d1(self, z) -> np.ndarray:
        z = self.require_inside(z)
        if self.deriv1 is not None:
            return np.asarray(self.deriv1(z), dtype=complex)
        return np.stack([self._fd_dc(z, c) for c in range(self.n)])

    def d2(self, z):
        z = self.require_inside(z)
        if self.deriv2 is not None:
            d2h, d2m = self.deriv2(z)
            return np.asarray(d2h, dtype=complex), np.asarray(d2m, dtype=complex)
        n = self.n
        d2h = np.empty((n, n, n, n), dtype=complex)
        d2m = np.empty((n, n, n, n), dtype=complex)
        for c in range(n):
            for d in range(n):
                if c == d:
                    xx = self._fd_apply([(c, "x", 2)], z)
                    yy = self._fd_apply([(c, "y", 2)], z)
                    xy = self._fd_apply([(c, "x", 1), (c, "y", 1)], z)
                    d2h[c, c] = 0.25 * (xx - yy - 2j * xy)
                    d2m[c, c] = 0.25 * (xx + yy)
                else:
                    xx = self._fd_apply([(c, "x", 1), (d, "x", 1)], z)
                    yy = self._fd_apply([(c, "y", 1), (d, "y", 1)], z)
                    xy = self._fd_apply([(c, "x", 1), (d, "y", 1)], z)
                    yx = self._fd_apply([(c, "y", 1), (d, "x", 1)], z)
                    d2h[c, d] = 0.25 * (xx - yy - 1j * xy - 1j * yx)
                    d2m[c, d] = 0.25 * (xx + yy + 1j * xy - 1j * yx)
        return d2h, d2m

    def d3(self, z):
        z = self.require_inside(z)
        if self.deriv3 is not None:
            d3hhh, d3hhm = self.deriv3(z)
            return np.asarray(d3hhh, dtype=complex), np.asarray(d3hhm, dtype=complex)
        raise NotImplementedError(
            "third derivatives need analytic evaluators; finite-difference "
            "third-order stencils are not provided"
        )

    # -- invariant checks ----------------------------------------------------
    def check_kahler(self, z, tol=1e-8) -> float:
        """Max defect of the symmetry d_j W_{l,mbar} = d_l W_{j,mbar}."""
        d1 = self.d1(z)
        defect = float(np.max(np.abs(d1 - np.transpose(d1, (1, 0, 2)))))
        if self.kahler and defect > tol * max(1.0, float(np.max(np.abs(d1)))):
            raise NonKahlerError(f"Kahler symmetry defect {defect:.3e} at z = {z}")
        return defect


# ---------------------------------------------------------------------------
# patch constructors
# ---------------------------------------------------------------------------

def flat_patch(n: int, scale: float = 1.0) -> MetricPatch:
    """Constant Euclidean coefficient array scale * I."""
    Z4 = np.zeros((n, n, n, n), dtype=complex)
    Z5 = np.zeros((n, n, n, n, n), dtype=complex)
    return MetricPatch(
        n=n,
        eval=lambda z: scale * np.eye(n, dtype=complex),
        deriv1=lambda z: np.zeros((n, n, n), dtype=complex),
        deriv2=lambda z: (Z4, Z4),
        deriv3=lambda z: (Z5, Z5),
        domain=np.full(n, 10.0),
        name="flat",
    )


def radial_potential_patch(n, P_derivs, domain=None, name="radial", scale=1.0):
    """Patch of omega = i ddbar P(|z|^2) from scalar derivatives of P.

    ``P_derivs(rho)`` returns (P1, ..., P5), the first five derivatives of the
    radial potential.  All chart derivatives follow by the chain rule; they
    are exact given exact P-derivatives.
    """

    def _parts(z):
        z = np.asarray(z, dtype=complex)
        rho = float(np.sum(np.abs(z) ** 2))
        return z, np.conj(z), rho, P_derivs(rho)

    def ev(z):
        z, zb, rho, (P1, P2, P3, P4, P5) = _parts(z)
        return scale * 2.0 * (P1 * np.eye(n) + P2 * np.outer(zb, z))

    def d1(z):
        z, zb, rho, (P1, P2, P3, P4, P5) = _parts(z)
        I = np.eye(n)
        out = np.empty((n, n, n), dtype=complex)
        for a in range(n):
            out[a] = P2 * zb[a] * I + P3 * zb[a] * np.outer(zb, z)
            out[a, :, a] += P2 * zb
        return scale * 2.0 * out

    def d2(z):
        z, zb, rho, (P1, P2, P3, P4, P5) = _parts(z)
        I = np.eye(n)
        zbz = np.outer(zb, z)
        d2h = np.empty((n, n, n, n), dtype=complex)
        d2m = np.empty((n, n, n, n), dtype=complex)
        for a in range(n):
            for b in range(n):
                H = P3 * zb[a] * zb[b] * I + P4 * zb[a] * zb[b] * zbz
                H[:, b] += P3 * zb[a] * zb
                H[:, a] += P3 * zb[b] * zb
                d2h[a, b] = H
                M = (P3 * z[b] * zb[a] + P2 * (1.0 if a == b else 0.0)) * I \
                    + P4 * z[b] * zb[a] * zbz
                if a == b:
                    M += P3 * zbz
                M[b, :] += P3 * zb[a] * z
                M[:, a] += P3 * z[b] * zb
                M[b, a] += P2
                d2m[a, b] = M
        return scale * 2.0 * d2h, scale * 2.0 * d2m

    def d3(z):
        z, zb, rho, (P1, P2, P3, P4, P5) = _parts(z)
        I = np.eye(n)
        zbz = np.outer(zb, z)
        hhh = np.empty((n, n, n, n, n), dtype=complex)
        hhm = np.empty((n, n, n, n, n), dtype=complex)
        for a in range(n):
            for b in range(n):
                for c in range(n):
                    H = P4 * zb[a] * zb[b] * zb[c] * I + P5 * zb[a] * zb[b] * zb[c] * zbz
                    H[:, c] += P4 * zb[a] * zb[b] * zb
                    H[:, b] += P4 * zb[a] * zb[c] * zb
                    H[:, a] += P4 * zb[b] * zb[c] * zb
                    hhh[a, b, c] = H
                for e in range(n):
                    dd = (zb[b] if a == e else 0.0) + (zb[a] if b == e else 0.0)
                    M = (P4 * z[e] * zb[a] * zb[b] + P3 * dd) * I
                    M = M + (P5 * z[e] * zb[a] * zb[b] + P4 * dd) * zbz
                    M[e, :] += P4 * zb[a] * zb[b] * z
                    M[:, b] += P4 * z[e] * zb[a] * zb
                    M[:, a] += P4 * z[e] * zb[b] * zb
                    if a == e:
                        M[:, b] += P3 * zb
                    if b == e:
                        M[:, a] += P3 * zb
                    M[e, b] += P3 * zb[a]
                    M[e, a] += P3 * zb[b]
                    hhm[a, b, e] = M
        return scale * 2.0 * hhh, scale * 2.0 * hhm

    return MetricPatch(
        n=n, eval=ev, deriv1=d1, deriv2=d2, deriv3=d3,
        domain=domain if domain is not None else np.full(n, 8.0),
        name=name,
    )


def fubini_study_patch(n: int) -> MetricPatch:
    """Affine chart of the Einstein round metric on CP^n (class-normalized)."""

    def P_derivs(rho):
        c = n + 1.0
        s = 1.0 + rho
        return (c / s, -c / s ** 2, 2.0 * c / s ** 3, -6.0 * c / s ** 4, 24.0 * c / s ** 5)

    return radial_potential_patch(n, P_derivs, domain=np.full(n, 50.0), name="fubini-study")


class PolynomialPotential:
    """Hermitian polynomial P(z, zbar) = sum c[(a, b)] z^a zbar^b."""

    def __init__(self, n, coeffs):
        self.n = n
        self.c = {k: complex(v) for k, v in coeffs.items()}
        for (a, b), v in list(self.c.items()):
            if abs(self.c.get((b, a), 0.0) - np.conj(v)) > 1e-12:
                raise ValueError("polynomial potential coefficients are not Hermitian")

    def deriv(self, ah, bh):
        out = {}
        for (a, b), co in self.c.items():
            a2, b2, fac, ok = list(a), list(b), 1.0, True
            for i, k in enumerate(ah):
                for _ in range(k):
                    if a2[i] == 0:
                        ok = False
                        break
                    fac *= a2[i]
                    a2[i] -= 1
                if not ok:
                    break
            if ok:
                for i, k in enumerate(bh):
                    for _ in range(k):
                        if b2[i] == 0:
                            ok = False
                            break
                        fac *= b2[i]
                        b2[i] -= 1
                    if not ok:
                        break
            if not ok:
                continue
            key = (tuple(a2), tuple(b2))
            out[key] = out.get(key, 0.0) + co * fac
        p = PolynomialPotential.__new__(PolynomialPotential)
        p.n, p.c = self.n, out
        return p

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        s = 0.0 + 0.0j
        for (a, b), co in self.c.items():
            term = co
            for i in range(self.n):
                if a[i]:
                    term = term * z[i] ** a[i]
                if b[i]:
                    term = term * np.conj(z[i]) ** b[i]
            s += term
        return s


def _unit(n, i):
    v = [0] * n
    v[i] = 1
    return tuple(v)


def _madd(a, b):
    return tuple(np.add(a, b))


def polynomial_potential_patch(n, coeffs, domain=None, name="poly") -> MetricPatch:
    """Patch of omega = i ddbar P for a Hermitian polynomial potential."""
    pot = PolynomialPotential(n, coeffs)
    E = [_unit(n, i) for i in range(n)]

    def ev(z):
        W = np.empty((n, n), dtype=complex)
        for k in range(n):
            for l in range(n):
                W[k, l] = 2.0 * pot.deriv(E[k], E[l])(z)
        return W

    def d1(z):
        out = np.empty((n, n, n), dtype=complex)
        for c in range(n):
            for k in range(n):
                for l in range(n):
                    out[c, k, l] = 2.0 * pot.deriv(_madd(E[c], E[k]), E[l])(z)
        return out

    def d2(z):
        d2h = np.empty((n, n, n, n), dtype=complex)
        d2m = np.empty((n, n, n, n), dtype=complex)
        for c in range(n):
            for d in range(n):
                for k in range(n):
                    for l in range(n):
                        d2h[c, d, k, l] = 2.0 * pot.deriv(_madd(_madd(E[c], E[d]), E[k]), E[l])(z)
                        d2m[c, d, k, l] = 2.0 * pot.deriv(_madd(E[c], E[k]), _madd(E[d], E[l]))(z)
        return d2h, d2m

    def d3(z):
        hhh = np.empty((n, n, n, n, n), dtype=complex)
        hhm = np.empty((n, n, n, n, n), dtype=complex)
        for c in range(n):
            for d in range(n):
                for e in range(n):
                    for k in range(n):
                        for l in range(n):
                            hhh[c, d, e, k, l] = 2.0 * pot.deriv(
                                _madd(_madd(_madd(E[c], E[d]), E[e]), E[k]), E[l])(z)
                            hhm[c, d, e, k, l] = 2.0 * pot.deriv(
                                _madd(_madd(E[c], E[d]), E[k]), _madd(E[e], E[l]))(z)
        return hhh, hhm

    return MetricPatch(
        n=n, eval=ev, deriv1=d1, deriv2=d2, deriv3=d3,
        domain=domain if domain is not None else np.full(n, 2.0),
        name=name,
    )


def random_kahler_patch(n, rng, amplitude=0.03, max_degree=4, analytic=True):
    """Flat patch perturbed by a random Hermitian polynomial potential."""
    coeffs = {(_unit(n, i), _unit(n, i)): 0.5 for i in range(n)}
    for _ in range(4 * n):
        a = tuple(int(v) for v in rng.integers(0, 3, n))
        b = tuple(int(v) for v in rng.integers(0, 3, n))
        deg = sum(a) + sum(b)
        if deg < 2 or deg > max_degree:
            continue
        cv = (rng.standard_normal() + 1j * rng.standard_normal()) * amplitude
        coeffs[(a, b)] = coeffs.get((a, b), 0.0) + cv
        coeffs[(b, a)] = coeffs.get((b, a), 0.0) + np.conj(cv)
    patch = polynomial_potential_patch(n, coeffs, name="random-poly")
    if analytic:
        return patch
    return MetricPatch(n=n, eval=patch.eval, domain=patch.domain, name="random-poly-fd")


# ---------------------------------------------------------------------------
# curvature operations
# ---------------------------------------------------------------------------

def _winv(W):
    try:
        return inv(W)
    except np.linalg.LinAlgError as exc:
        raise SingularMetricError(str(exc)) from exc


def chern_coefficients(patch: MetricPatch, z) -> np.ndarray:
    """Coefficient array C[j,k,l,m] = C^{j,kbar}_{l,m} of the curvature form."""
    W = patch.coeff(z)
    d1 = patch.d1(z)
    _, d2m = patch.d2(z)
    Wi = _winv(W)
    d1b = np.conj(np.transpose(d1, (0, 2, 1)))          # d_kbar W
    t2 = np.einsum('jms,st,ktr->jkmr', d1, Wi, d1b)
    return -np.einsum('jkmr,rl->jklm', d2m - t2, Wi)


def riemann_coefficients(patch: MetricPatch, z, C=None) -> np.ndarray:
    """All-covariant curvature R[j,k,l,m] = R_{j,kbar,l,mbar} (Kahler only)."""
    if not patch.kahler:
        raise NonKahlerError("Riemann coefficients require a Kahler patch")
    patch.check_kahler(z)
    if C is None:
        C = chern_coefficients(patch, z)
    W = patch.coeff(z)
    return -0.5 * np.einsum('jkhl,hm->jklm', C, W)


def ricci_form(patch: MetricPatch, z) -> np.ndarray:
    """Hermitian Ricci coefficient array in the (i/2)-convention."""
    C = chern_coefficients(patch, z)
    A = 2.0 * np.einsum('jkll->jk', C)
    herm = np.max(np.abs(A - A.conj().T))
    if herm > 1e-8 * max(1.0, float(np.max(np.abs(A)))):
        raise SingularMetricError(f"Ricci array lost Hermitian symmetry ({herm:.2e})")
    return 0.5 * (A + A.conj().T)


def scalar_curvature(patch: MetricPatch, z) -> float:
    W = patch.coeff(z)
    A = ricci_form(patch, z)
    return float(np.real(2.0 * np.trace(_winv(W) @ A)))


def curvature_operator(patch: MetricPatch, z) -> np.ndarray:
    """Rm[s,t,j,k] = Rm^{s,tbar}_{j,kbar}; real operator on (1,1)-vectors."""
    W = patch.coeff(z)
    R = riemann_coefficients(patch, z)
    Wi = _winv(W)
    return -4.0 * np.einsum('tl,ms,jklm->stjk', Wi, Wi, R)


def orthonormal_frame(W) -> np.ndarray:
    """S with S^T W conj(S) = I (columns are an orthonormal frame)."""
    try:
        L = cholesky(W)
    except np.linalg.LinAlgError as exc:
        raise SingularMetricError(str(exc)) from exc
    return inv(L).T


def frame_transform_riemann(R, S) -> np.ndarray:
    return np.einsum('abcd,aj,bk,cl,dm->jklm', R, S, np.conj(S), S, np.conj(S))


def bisectional_and_lambda1(patch: MetricPatch, z):
    """(bisectional evaluator, lambda1).

    The evaluator takes (a, b), the (1,0)-components of two real tangent
    vectors, and returns the bisectional curvature; lambda1 is the smallest
    eigenvalue of the curvature Hermitian form on T (x) T, computed in an
    orthonormalized frame.
    """
    W = patch.coeff(z)
    R = riemann_coefficients(patch, z)

    def bisectional(a, b):
        a = np.asarray(a, dtype=complex)
        b = np.asarray(b, dtype=complex)
        val = -4.0 * np.einsum('jklm,j,k,l,m->', R, a, np.conj(a), b, np.conj(b))
        if abs(val.imag) > 1e-8 * (1.0 + abs(val.real)):
            raise SingularMetricError("bisectional value unexpectedly complex")
        return float(val.real)

    S = orthonormal_frame(W)
    Rp = frame_transform_riemann(R, S)
    n = patch.n
    M = -2.0 * np.transpose(Rp, (0, 2, 1, 3)).reshape(n * n, n * n)
    M = 0.5 * (M + M.conj().T)
    return bisectional, float(eigvalsh(M)[0])


# ---------------------------------------------------------------------------
# geodesic normal form
# ---------------------------------------------------------------------------

def _monomials(n, d):
    if d == 0:
        return [tuple([0] * n)]
    out = set()
    for m in _monomials(n, d - 1):
        for i in range(n):
            mm = list(m)
            mm[i] += 1
            out.add(tuple(mm))
    return sorted(out)


class _MatSeries:
    """Truncated polynomial in (w, wbar) with matrix coefficients."""

    def __init__(self, n, maxdeg):
        self.n, self.maxdeg, self.c = n, maxdeg, {}

    def add(self, al, be, M):
        if sum(al) + sum(be) > self.maxdeg:
            return
        key = (al, be)
        if key in self.c:
            self.c[key] = self.c[key] + M
        else:
            self.c[key] = np.array(M, dtype=complex)

    def get(self, al, be):
        return self.c.get((al, be), np.zeros((self.n, self.n), dtype=complex))


def _series_mul(A, B, maxdeg):
    out = _MatSeries(A.n, maxdeg)
    for (a1, b1), M1 in A.c.items():
        for (a2, b2), M2 in B.c.items():
            if sum(a1) + sum(b1) + sum(a2) + sum(b2) > maxdeg:
                continue
            out.add(_madd(a1, a2), _madd(b1, b2), M1 @ M2)
    return out


def _pullback_series(derivs, S, q, maxdeg):
    """Series of W~(w) = J^T W(z(w)) conj(J) to total degree maxdeg."""
    n = S.shape[0]
    zero = tuple([0] * n)
    # delta(w) = S (w + q(w)), holomorphic
    dl = {}
    for i in range(n):
        dl[_unit(n, i)] = S[:, i].copy()
    for mono, vec in q.items():
        dl[mono] = dl.get(mono, np.zeros(n, dtype=complex)) + S @ vec
    Wz = _MatSeries(n, maxdeg)
    Wz.add(zero, zero, derivs["W0"])
    d1 = derivs["d1"]
    d1b = np.conj(np.transpose(d1, (0, 2, 1)))
    for c in range(n):
        for mono, vec in dl.items():
            Wz.add(mono, zero, d1[c] * vec[c])
            Wz.add(zero, mono, d1b[c] * np.conj(vec[c]))
    d2h, d2m = derivs["d2h"], derivs["d2m"]
    d2hb = np.conj(np.transpose(d2h, (0, 1, 3, 2)))
    items = list(dl.items())
    for c in range(n):
        for d in range(n):
            for m1, v1 in items:
                for m2, v2 in items:
                    if sum(m1) + sum(m2) > maxdeg:
                        continue
                    Wz.add(_madd(m1, m2), zero, 0.5 * d2h[c, d] * v1[c] * v2[d])
                    Wz.add(zero, _madd(m1, m2), 0.5 * d2hb[c, d] * np.conj(v1[c] * v2[d]))
                    Wz.add(m1, m2, d2m[c, d] * v1[c] * np.conj(v2[d]))
    if "d3hhh" in derivs and derivs["d3hhh"] is not None:
        d3hhh, d3hhm = derivs["d3hhh"], derivs["d3hhm"]
        d3hmm = np.conj(np.transpose(d3hhm, (0, 1, 2, 4, 3)))
        d3bbb = np.conj(np.transpose(d3hhh, (0, 1, 2, 4, 3)))
        lin = {i: dl[_unit(n, i)] for i in range(n)}
        for c, d, e in product(range(n), repeat=3):
            for i, j, k in product(range(n), repeat=3):
                mono3 = _madd(_madd(_unit(n, i), _unit(n, j)), _unit(n, k))
                vc = lin[i][c] * lin[j][d] * lin[k][e]
                Wz.add(mono3, zero, d3hhh[c, d, e] * vc / 6.0)
                Wz.add(zero, mono3, d3bbb[c, d, e] * np.conj(vc) / 6.0)
                mono2 = _madd(_unit(n, i), _unit(n, j))
                Wz.add(mono2, _unit(n, k), d3hhm[c, d, e] * lin[i][c] * lin[j][d] * np.conj(lin[k][e]) / 2.0)
                Wz.add(_unit(n, k), mono2, d3hmm[c, d, e] * np.conj(lin[i][c] * lin[j][d]) * lin[k][e] / 2.0)
    # J = S (I + Dq)
    J = _MatSeries(n, maxdeg)
    J.add(zero, zero, S)
    for mono, vec in q.items():
        for l in range(n):
            if mono[l] == 0:
                continue
            dm = list(mono)
            dm[l] -= 1
            M = np.zeros((n, n), dtype=complex)
            M[:, l] = mono[l] * (S @ vec)
            J.add(tuple(dm), zero, M)
    JT = _MatSeries(n, maxdeg)
    for (al, be), M in J.c.items():
        JT.add(al, be, M.T)
    Jb = _MatSeries(n, maxdeg)
    for (al, be), M in J.c.items():
        Jb.add(be, al, np.conj(M))
    return _series_mul(_series_mul(JT, Wz, maxdeg), Jb, maxdeg)


@dataclass
class NormalForm:
    """Geodesic holomorphic coordinates at a center point.

    ``coordinate_change`` maps a monomial in w to the C^n coefficient of the
    holomorphic change q; the chart point is z0 + S (w + q(w)).  ``H2`` holds
    the quadratic metric-deviation coefficients (equal to -2 R in the
    orthonormalized frame), ``H3`` the cubic ones for order-3 forms.
    """

    center: np.ndarray
    order: int
    frame: np.ndarray
    coordinate_change: dict
    H2: np.ndarray
    H3: Optional[np.ndarray]
    residual: float
    kahler_defect: float

    def transform(self, w):
        w = np.asarray(w, dtype=complex)
        acc = w.astype(complex).copy()
        for mono, vec in self.coordinate_change.items():
            term = vec.copy()
            for i in range(len(w)):
                if mono[i]:
                    term = term * w[i] ** mono[i]
            acc = acc + term
        return self.center + self.frame @ acc

    def jacobian(self, w):
        n = len(w)
        J = np.eye(n, dtype=complex)
        for mono, vec in self.coordinate_change.items():
            for l in range(n):
                if mono[l] == 0:
                    continue
                dm = list(mono)
                dm[l] -= 1
                term = mono[l] * vec
                for i in range(n):
                    if dm[i]:
                        term = term * w[i] ** dm[i]
                J[:, l] = J[:, l] + term
        return self.frame @ J

    def pullback_coeff(self, patch, w):
        z = self.transform(w)
        J = self.jacobian(w)
        return J.T @ patch.coeff(z) @ np.conj(J)

    def model_coeff(self, w):
        n = self.H2.shape[0]
        w = np.asarray(w, dtype=complex)
        M = np.eye(n, dtype=complex)
        for j in range(n):
            for k in range(n):
                M = M - self.H2[j, k] * w[j] * np.conj(w[k])
        if self.order >= 3 and self.H3 is not None:
            for p in range(n):
                for j in range(n):
                    for k in range(n):
                        M = M - self.H3[p, j, k] * w[p] * w[j] * np.conj(w[k])
                        M = M - np.conj(self.H3[p, j, k]).T * np.conj(w[p] * w[j]) * w[k]
        return M


def geodesic_normal_form(patch: MetricPatch, center, order: int = 2,
                         sample_radius: float = 0.05, samples: int = 40,
                         rng=None) -> NormalForm:
    """Construct geodesic holomorphic coordinates of the requested order.

    The coordinate change is solved degree by degree; each degree's
    coefficients are overdetermined and resolved by averaging (the minimal
    norm solution), with the spread reported as the Kahler defect.
    """
    if order not in (2, 3):
        raise ValueError("order must be 2 or 3")
    if not patch.kahler:
        raise NonKahlerError("geodesic coordinates require a Kahler patch")
    center = patch.require_inside(center)
    n = patch.n
    derivs = {"W0": patch.coeff(center), "d1": patch.d1(center)}
    derivs["d2h"], derivs["d2m"] = patch.d2(center)
    if order >= 3:
        derivs["d3hhh"], derivs["d3hhm"] = patch.d3(center)
    S = orthonormal_frame(derivs["W0"])
    q = {}
    maxdeg = order + 1
    sym_defect = 0.0
    for d in range(1, order + 1):
        Wt = _pullback_series(derivs, S, q, maxdeg)
        for nu in _monomials(n, d + 1):
            vec = np.zeros(n, dtype=complex)
            for m in range(n):
                vals = []
                for l in range(n):
                    if nu[l] == 0:
                        continue
                    mu = list(nu)
                    mu[l] -= 1
                    vals.append(-Wt.get(tuple(mu), tuple([0] * n))[l, m] / nu[l])
                vals = np.array(vals)
                vec[m] = vals.mean()
                if vals.size > 1:
                    sym_defect = max(sym_defect, float(np.max(np.abs(vals - vals.mean()))))
            q[nu] = q.get(nu, np.zeros(n, dtype=complex)) + vec
    Wt = _pullback_series(derivs, S, q, maxdeg)
    kill = 0.0
    zero = tuple([0] * n)
    for d in range(1, order + 1):
        for mu in _monomials(n, d):
            kill = max(kill, float(np.max(np.abs(Wt.get(mu, zero)))))
    H2 = np.empty((n, n, n, n), dtype=complex)
    for j in range(n):
        for k in range(n):
            H2[j, k] = -Wt.get(_unit(n, j), _unit(n, k))
    H3 = None
    if order >= 3:
        H3 = np.zeros((n, n, n, n, n), dtype=complex)
        for p in range(n):
            for j in range(n):
                nu = _madd(_unit(n, p), _unit(n, j))
                cnt = 2.0 if p != j else 1.0
                for k in range(n):
                    H3[p, j, k] = -Wt.get(nu, _unit(n, k)) / cnt
    nf = NormalForm(center=center, order=order, frame=S, coordinate_change=q,
                    H2=H2, H3=H3, residual=np.nan,
                    kahler_defect=max(sym_defect, kill))
    nf.residual = normal_form_residual(nf, patch, sample_radius, samples, rng)
    return nf


def normal_form_residual(nf: NormalForm, patch: MetricPatch, radius: float,
                         samples: int = 40, rng=None) -> float:
    """Sup over a sphere |w| = radius of |pullback - model|."""
    rng = rng or np.random.default_rng(0)
    n = patch.n
    sup = 0.0
    for _ in range(samples):
        v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        w = radius * v / np.linalg.norm(v)
        sup = max(sup, float(np.max(np.abs(nf.pullback_coeff(patch, w) - nf.model_coeff(w)))))
    return sup


def volume_density_expansion_check(patch: MetricPatch, center, radius: float = 0.05,
                                   samples: int = 60, rng=None) -> float:
    """Sup of |det W~(w) - (1 - Ric'_{k,lbar} w_k wbar_l)| / |w|^3 on a sphere.

    Ric' is the Ricci array at the center in the geodesic frame, in the
    ``Ric = i R_{k,lbar} dz ^ dzbar`` convention (half the (i/2)-array).
    """
    rng = rng or np.random.default_rng(1)
    nf = geodesic_normal_form(patch, center, order=2, rng=rng)
    ric = np.einsum('jkll->jk', nf.H2)      # trace of H2 = Ricci in the i-convention
    n = patch.n
    sup = 0.0
    for _ in range(samples):
        v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        w = radius * v / np.linalg.norm(v)
        dens = float(np.real(np.linalg.det(nf.pullback_coeff(patch, w))))
        model = 1.0 - float(np.real(np.einsum('jk,j,k->', ric, w, np.conj(w))))
        sup = max(sup, abs(dens - model) / radius ** 3)
    return sup
