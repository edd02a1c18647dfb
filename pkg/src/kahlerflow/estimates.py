"""A-priori-estimate monitors along flow runs.

These are diagnostics: pointwise curvature inequalities that hold for every
admissible potential, uniform-bound quantities reported per snapshot, and the
oscillation/moment machinery.  Nothing here is asserted beyond what is a
theorem for smooth invariant data; empirical constants are outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .geometry import MetricData, SymmetricGeometry, metric_from_potential


@dataclass
class MonitorRecord:
    t: float
    sup_u: float
    sup_grad_u: float
    sup_lap_u: float
    sup_scal: float
    diam: float
    density_min: float
    c2_trace: float
    c2_residual: float
    c3_norm: float
    osc_phi: float
    lp_norm: float
    theta_moments: list = field(default_factory=list)


def _metric_of(geom, phi_or_md) -> MetricData:
    if isinstance(phi_or_md, MetricData):
        return phi_or_md
    return metric_from_potential(geom, phi_or_md)


def perelman_monitor(state) -> dict:
    """The five uniform-bound quantities of a snapshot.

    sup|u|, sup|grad u|_t, sup|Lap_t u|, sup|Scal_t| and the meridian
    diameter, all in the flow metric.
    """
    md, u = state.metric, state.u
    _, gradsq = geo.gradient_norms(md, u)
    return {
        "sup_u": float(np.max(np.abs(u))),
        "sup_grad_u": float(np.sqrt(np.max(gradsq))),
        "sup_lap_u": float(np.max(np.abs(geo.laplacian(md, u)))),
        "sup_scal": float(np.max(np.abs(md.scal))),
        "diam": geo.diameter(md),
    }


def density_ratio(state) -> float:
    """Min over the grid of omega_t^n / omega^n."""
    return float(np.min(state.metric.f))


def density_log_crosscheck(state) -> float:
    """Relative disagreement of min density against the flow-equation path.

    log f = u - (phi + c) + h_ref pointwise, so min log f must equal
    -(sup of (phi + c) - u - h_ref).
    """
    direct = np.log(density_ratio(state))
    alg = -float(np.max(state.phi + state.c - state.u - state.geom.h_ref))
    return abs(direct - alg) / max(1e-30, abs(direct))


def yau_c2_residual(geom: SymmetricGeometry, phi_or_md) -> float:
    """Min over the grid of LHS - RHS of the second-order curvature inequality

        2 Tr_omega Ric(omega_phi) >= - Lap_phi Lap_omega phi
            + 2 lambda1 (2n + Lap_omega phi) Tr_phi omega
            + 2 |d Lap_omega phi|^2_phi / (2n + Lap_omega phi),

    with lambda1 the (constant) smallest curvature-form eigenvalue of the
    reference.  The coefficient 2 on the lambda1 term makes the bound exact
    at phi = 0 on CP^1 with the trace convention Tr_omega(omega) = 2n.
    """
    md = _metric_of(geom, phi_or_md)
    n = geom.n
    md0 = geom.reference_metric
    lap0_phi = geo.laplacian(md0, md.phi)
    qbar_r, qx_r = geo.ricci_profiles(md)
    tr_om_ric = 2.0 * ((n - 1) * qbar_r / (n + 1.0) + qx_r / (n + 1.0))
    lhs = 2.0 * tr_om_ric
    tw = 2.0 * n + lap0_phi
    tr_phi_om = 2.0 * ((n - 1) * (n + 1.0) / md.mbar + (n + 1.0) / md.mx)
    dlap_sq, _ = geo.gradient_norms(md, lap0_phi)
    lam1 = geom.lambda1_reference
    rhs = -geo.laplacian(md, lap0_phi) + 2.0 * lam1 * tw * tr_phi_om + 2.0 * dlap_sq / tw
    return float(np.min(lhs - rhs))


def yau_third_order_residual(geom: SymmetricGeometry, phi_or_md) -> float:
    """Min residual of the third-derivative Cauchy-Schwarz step, pointwise.

    The exact curvature-and-metric diagonal term is subtracted from
    2 Tr Ric + Lap_phi Lap phi, leaving 32 T3; the bound is
    32 T3 >= 2 |d Lap phi|^2_phi / (2n + Lap phi).
    """
    md = _metric_of(geom, phi_or_md)
    n = geom.n
    md0 = geom.reference_metric
    c = 1.0 / (2.0 * (n + 1.0))  # reference curvature constant: C_diag = c (1 + delta)
    d = np.stack([md.mx / (n + 1.0)] + [md.mbar / (n + 1.0)] * (n - 1))
    sum_d = d.sum(axis=0)
    sum_inv = (1.0 / d).sum(axis=0)
    middle = 4.0 * c * (sum_d * sum_inv + n)
    lap0_phi = geo.laplacian(md0, md.phi)
    qbar_r, qx_r = geo.ricci_profiles(md)
    tr_om_ric = 2.0 * ((n - 1) * qbar_r / (n + 1.0) + qx_r / (n + 1.0))
    t3_block = 2.0 * tr_om_ric + geo.laplacian(md, lap0_phi) - 2.0 * middle
    tw = 2.0 * n + lap0_phi
    dlap_sq, _ = geo.gradient_norms(md, lap0_phi)
    return float(np.min(t3_block - 2.0 * dlap_sq / tw))


def c3_norm(geom: SymmetricGeometry, phi_or_md, frame: str = "mixed") -> float:
    """Sup of |grad^{1,0} ddbar phi|^2 in the mixed (reference, metric) norm.

    The invariant tensor has one radial-radial-radial component and n-1
    copies of two mixed radial/tangential components; the reduced closed
    forms below are smooth on [0, 1] after the stated cancellations (the
    radial bracket vanishes at x = 1, so the endpoint value is the limit 0).
    With ``frame='flow'`` all three slots contract with the evolving metric.
    """
    md = _metric_of(geom, phi_or_md)
    g = geom
    n, x = g.n, g.x_grid
    phix = g.D @ md.phi
    phixx = g.D2 @ md.phi
    phixxx = g.D @ phixx
    G = (1.0 - x) * phixx - 2.0 * phix
    Gp = (1.0 - x) * phixxx - 3.0 * phixx
    p = md.mx - (n + 1.0)
    B = 2.0 * G + g.beta * Gp - 3.0 * x * G + 2.0 * p
    C1 = (1.0 - x) * phixx - phix
    termA = np.zeros_like(x)
    sl = slice(None, -1)  # B vanishes linearly at x = 1; the limit there is 0
    if frame == "mixed":
        termA[sl] = x[sl] * B[sl] ** 2 / ((n + 1.0) * md.mx[sl] ** 2 * (1.0 - x[sl]))
        termB = (n - 1) * g.beta * C1 ** 2 / ((n + 1.0) * md.mbar ** 2)
        termC = (n - 1) * g.beta * C1 ** 2 / ((n + 1.0) * md.mx * md.mbar)
    elif frame == "flow":
        termA[sl] = x[sl] * B[sl] ** 2 / (md.mx[sl] ** 3 * (1.0 - x[sl]))
        termB = (n - 1) * g.beta * C1 ** 2 / (md.mx * md.mbar ** 2)
        termC = termB
    else:
        raise ValueError("frame must be 'mixed' or 'flow'")
    return float(np.max(termA + termB + termC))


def c2_trace(geom: SymmetricGeometry, phi_or_md) -> float:
    """Max of 2n + Lap_omega phi (positive for admissible potentials)."""
    md = _metric_of(geom, phi_or_md)
    return float(np.max(2.0 * geom.n + geo.laplacian(geom.reference_metric, md.phi)))


def oscillation_and_lp(geom: SymmetricGeometry, phi, eps: float = 0.5):
    """(Osc(phi + c), ||f||_{L^{1+eps}} against the reference volume form)."""
    if not (0.0 < eps <= 1.0):
        raise ValueError("eps must lie in (0, 1]")
    phi = geo._values(phi)
    md = metric_from_potential(geom, phi)
    osc = float(np.max(phi) - np.min(phi))
    lp = float(np.sum(geom.quadrature_weights * md.f ** (1.0 + eps)) ** (1.0 / (1.0 + eps)))
    return osc, lp


def theta_moment_chain(state, P: int = 12):
    """Moments of theta = max phi - phi and the gradient-moment inequality.

    Returns (moments, residuals) with moments[p-1] the mean of theta^p
    against omega_t^n and residuals[p-1] the slack of

        mean |d theta^{(p+1)/2}|^2_t omega_t^n
            <= n (p+1)^2 / (4p) * mean theta^p omega_t^n.

    Moments accumulate in the log domain when theta is large.
    """
    if P > 12:
        raise ValueError("moment order capped at 12")
    md = state.metric
    geom = state.geom
    n = geom.n
    theta = float(np.max(state.phi)) - state.phi
    dsq_theta, _ = geo.gradient_norms(md, theta)
    moments, residuals = [], []
    tmax = float(np.max(theta))
    for p in range(1, P + 1):
        if tmax > 0 and p * np.log(max(tmax, 1e-300)) > 300.0:
            logt = np.log(np.maximum(theta, 1e-300))
            w = geom.quadrature_weights * md.f
            s = p * logt + np.log(np.maximum(w, 1e-300))
            smax = s.max()
            Mp = float(np.exp(smax) * np.sum(np.exp(s - smax)) / geom.V)
        else:
            Mp = md.integrate(theta ** p) / geom.V
        grad_int = ((p + 1) ** 2 / 4.0) * theta ** (p - 1) * dsq_theta
        lhs = md.integrate(grad_int) / geom.V
        moments.append(Mp)
        residuals.append(n * (p + 1) ** 2 / (4.0 * p) * Mp - lhs)
    return moments, residuals


def empirical_moment_constant(moments) -> float:
    """Max of m_{p+1} / ((p+1) m_p): the geometric growth constant."""
    vals = [moments[p] / ((p + 1) * moments[p - 1])
            for p in range(1, len(moments)) if moments[p - 1] > 0]
    return float(max(vals)) if vals else 0.0


def monitor(state, eps: float = 0.5, P: int = 12) -> MonitorRecord:
    """Full monitor row for one snapshot."""
    geom = state.geom
    md = state.metric
    per = perelman_monitor(state)
    moments, _ = theta_moment_chain(state, P)
    osc, lp = oscillation_and_lp(geom, state.phi, eps)
    return MonitorRecord(
        t=state.t,
        density_min=density_ratio(state),
        c2_trace=c2_trace(geom, md),
        c2_residual=yau_c2_residual(geom, md),
        c3_norm=c3_norm(geom, md),
        osc_phi=osc,
        lp_norm=lp,
        theta_moments=moments,
        **per,
    )
