"""Energy functionals, integral identities and spectral bounds.

Every functional is evaluated through the reduced quadrature of
:mod:`kahlerflow.geometry`.  Where a quantity admits two displayed forms
(mass vs Dirichlet for the Aubin energies, sum vs potential form for J) both
are computed and cross-checked by the verification suites.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Optional

import numpy as np
from scipy.linalg import eigh

from . import geometry as geo
from .geometry import MetricData, SymmetricGeometry, metric_from_potential


@dataclass
class FunctionalRecord:
    t: float
    I: float
    J: float
    nu: float
    W: float
    lambda1: float
    futaki: float
    bochner_residual: float


def mixed_volume_ratio(md: MetricData, k: int) -> np.ndarray:
    """(omega^k ^ omega_phi^{n-k}) / omega^n as a grid profile.

    Invariant forms diagonalize into one radial and n-1 tangential
    eigenvalues, so the ratio is an elementary symmetric polynomial in
    lambda_tan = mbar/(n+1) (multiplicity n-1) and lambda_rad = m_x/(n+1).
    """
    n = md.geom.n
    lam_t = md.mbar / (n + 1.0)
    lam_r = md.mx / (n + 1.0)
    j = n - k
    ej = comb(n - 1, j) * lam_t ** j if j <= n - 1 else np.zeros_like(lam_t)
    if j >= 1:
        ej = ej + comb(n - 1, j - 1) * lam_t ** (j - 1) * lam_r
    return ej / comb(n, j)


def dirichlet_energies(geom: SymmetricGeometry, md: MetricData) -> list:
    """E_k = mean of i d phi ^ dbar phi ^ omega^k ^ omega_phi^{n-k-1}.

    Reduced closed form: E_k = (n+1)^{k-n} int_0^1 x^n (1-x) mbar^{n-1-k}
    phi_x^2 dx (the rank-one form occupies the radial slot, tangential slots
    split between the two metrics).
    """
    g = geom
    n = g.n
    phix = g.D @ md.phi
    base = g.x_grid ** n * (1.0 - g.x_grid) * phix ** 2
    return [
        float((n + 1.0) ** (k - n) * np.sum(g.plain_weights * base * md.mbar ** (n - 1 - k)))
        for k in range(n)
    ]


def aubin_I_J(geom: SymmetricGeometry, phi, return_forms: bool = False):
    """Aubin energies (I, J), each evaluated two ways.

    I: mass form mean of phi (omega^n - omega_phi^n) and the Dirichlet sum;
    J: weighted Dirichlet sum and the potential form.  The returned values
    are the mass/potential forms; ``return_forms`` exposes all four.
    """
    phi = geo._values(phi)
    md = metric_from_potential(geom, phi)
    V = geom.V
    I_mass = float(np.sum(geom.quadrature_weights * phi * (1.0 - md.f)) / V)
    E = dirichlet_energies(geom, md)
    I_dir = float(sum(E))
    J_sum = float(sum((k + 1.0) / (geom.n + 1.0) * E[k] for k in range(geom.n)))
    mixed = sum(
        float(np.sum(geom.quadrature_weights * phi * mixed_volume_ratio(md, k)) / V)
        for k in range(geom.n + 1)
    )
    J_pot = float(np.sum(geom.quadrature_weights * phi) / V - mixed / (geom.n + 1.0))
    if return_forms:
        return (I_mass, I_dir), (J_pot, J_sum)
    return I_mass, J_pot


def k_energy(geom: SymmetricGeometry, phi) -> float:
    """Mabuchi energy of the anticanonical class relative to the reference.

    nu(phi) = mean (log f + phi - h_ref) omega_phi^n
              - (1/(n+1)) sum_k mean phi omega^k omega_phi^{n-k}
              + mean h_ref omega^n;  nu(0) = 0.
    """
    phi = geo._values(phi)
    md = metric_from_potential(geom, phi)
    V = geom.V
    t1 = md.integrate(md.logf + phi - geom.h_ref) / V
    mixed = sum(
        float(np.sum(geom.quadrature_weights * phi * mixed_volume_ratio(md, k)) / V)
        for k in range(geom.n + 1)
    )
    t3 = float(np.sum(geom.quadrature_weights * geom.h_ref) / V)
    return float(t1 - mixed / (geom.n + 1.0) + t3)


def k_energy_derivative(geom: SymmetricGeometry, md: MetricData, direction) -> float:
    """-(1/2) mean of direction * (Scal - 2n) omega_phi^n."""
    d = geo._values(direction)
    return float(-0.5 * md.integrate(d * (md.scal - 2.0 * geom.n)) / geom.V)


def k_energy_flow_identity(state) -> float:
    """|nu(phi_t) - [mean u omega_t^n + J - mean (phi+c) omega^n + mean h omega^n]|."""
    geom = state.geom
    md = state.metric
    nu = k_energy(geom, state.phi)
    _, J = aubin_I_J(geom, state.phi)
    rhs = (md.integrate(state.u) / geom.V
           + J
           - float(np.sum(geom.quadrature_weights * (state.phi + state.c)) / geom.V)
           + float(np.sum(geom.quadrature_weights * geom.h_ref) / geom.V))
    return abs(nu - rhs)


def perelman_W(md: MetricData, f_field) -> float:
    """Entropy at scale 1/2: mean [ (|grad f|^2 + Scal)/2 + f - 2n ] e^{-f} omega^n."""
    f = geo._values(f_field)
    _, gradsq = geo.gradient_norms(md, f)
    integrand = (0.5 * (gradsq + md.scal) + f - 2.0 * md.geom.n) * np.exp(-f)
    return float(md.integrate(integrand) / md.geom.V)


def bochner_kodaira_residual(md: MetricData, u, h, return_sides: bool = False):
    """Defect of the weighted Hessian-energy identity.

    int |dbar grad^{1,0} u|^2 e^h omega^n
        = - int <d Lap_{w,h} u, d u> e^h omega^n
          - int (Ric - i ddbar h)(grad u, J grad u) e^h omega^n,

    with each of the three integrals evaluated independently.  The Hessian
    norm carries the factor-8 orthonormal-frame convention.
    """
    g = md.geom
    u = geo._values(u)
    h = geo._values(h)
    lhs = md.integrate(geo.hessian20_norm(md, u), h=h)
    lwh = geo.weighted_laplacian(md, h, u)
    t1 = -geo.pairing_du_dv(md, lwh, u)
    ux = g.D @ u
    _, qx_ric = geo.ricci_profiles(md)
    q_alpha_x = qx_ric - g.sderiv(h)
    t2 = -((ux / md.mx) ** 2) * 2.0 * q_alpha_x * g.beta
    rhs = md.integrate(t1 + t2, h=h)
    if return_sides:
        return abs(lhs - rhs), lhs, rhs
    return abs(lhs - rhs)


def first_eigenvalue(md: MetricData, h, fano_normalized: Optional[bool] = None) -> float:
    """Smallest nonzero eigenvalue of the weighted Laplacian on mean-zero data.

    Assembled variationally on a strictly positive Gauss rule, symmetrized in
    the weighted inner product; the zero mode (constants) is checked and
    discarded.  When (omega, h) is a curvature-normalized pair the value is
    bounded below by 2; for arbitrary h no bound is asserted.
    """
    K, M = geo.first_eigenvalue_forms(md, geo._values(h))
    vals = eigh(K, M, eigvals_only=True)
    if abs(vals[0]) > 1e-6:
        raise geo.SolverError("constant mode missing from the weighted spectrum", vals[0])
    return float(vals[1])


def poincare_residual(md: MetricData, h, phi_field) -> float:
    """LHS - RHS of the weighted spectral-gap inequality (nonnegative when
    the pair is curvature normalized):

    int |d phi|^2 e^h omega^n >= int phi^2 e^h omega^n
                                 - (1/V_h) (int phi e^h omega^n)^2.
    """
    h = geo._values(h)
    p = geo._values(phi_field)
    dsq, _ = geo.gradient_norms(md, p)
    lhs = md.integrate(dsq, h=h)
    Vh = md.integrate(np.ones_like(p), h=h)
    mean = md.integrate(p, h=h)
    rhs = md.integrate(p ** 2, h=h) - mean ** 2 / Vh
    return float(lhs - rhs)


def futaki_pairing(md: MetricData) -> float:
    """-2 mean |grad u|^2 omega^n at the gradient of the Ricci potential.

    Here u solves omega - Ric(omega) = 2 i ddbar u, i.e. u = -h/2 for the
    normalized Ricci potential h; the value is nonpositive and vanishes only
    at Einstein metrics.
    """
    h = geo.ricci_potential(md.geom, md)
    u = -0.5 * h.values
    _, gradsq = geo.gradient_norms(md, u)
    return float(-2.0 * geo.mean_integral(md, gradsq))


def evaluate_record(state) -> FunctionalRecord:
    """Per-snapshot functional row for a flow state."""
    geom = state.geom
    md = state.metric
    I, J = aubin_I_J(geom, state.phi)
    nu = k_energy(geom, state.phi)
    W = perelman_W(md, state.u)
    lam1 = first_eigenvalue(md, -state.u)
    fut = futaki_pairing(md)
    boch = bochner_kodaira_residual(md, state.u, -state.u)
    return FunctionalRecord(t=state.t, I=I, J=J, nu=nu, W=W,
                            lambda1=lam1, futaki=fut, bochner_residual=boch)
