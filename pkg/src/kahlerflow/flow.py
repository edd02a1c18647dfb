"""Normalized Kahler-Ricci flow in potential form, limits, and the elliptic solver.

The flow evolves an invariant potential by

    d phi / dt = log(omega_phi^n / omega^n) + phi + c - h_ref,

where ``c`` is the unique constant making ``mean of e^{-u} omega_t^n`` equal
to one for ``u = d phi / dt``.  The reference here is Einstein, so
``h_ref = 0``; the term is kept explicit so the formulas read like their
definitions.  The stationary points solve ``log f + phi - h_ref = 0``, i.e.
``Ric(omega_phi) = omega_phi``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import lu_factor, lu_solve, solve

from . import geometry as geo
from .geometry import (AdmissibilityError, MetricData, SymmetricGeometry,
                       metric_from_potential)

NORMALIZATION_TOL = 1e-10


class StabilityError(RuntimeError):
    """Time step produced a non-finite or runaway state."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class NewtonError(RuntimeError):
    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = residuals


def normalization_constant(geom: SymmetricGeometry, phi) -> float:
    """c with mean of exp(-(log f + phi + c - h_ref)) omega_phi^n equal to 1.

    Reduces to a log-mean of exp(h_ref - phi) against the reference volume;
    the exponent is shifted by its maximum before averaging.
    """
    phi = geo._values(phi)
    e = geom.h_ref - phi
    s = float(e.max())
    return s + float(np.log(np.sum(geom.quadrature_weights * np.exp(e - s)) / geom.V))


@dataclass
class FlowState:
    """One flow time slice: potential, Ricci potential, and normalizations."""

    t: float
    phi: np.ndarray
    u: np.ndarray
    c: float
    a: float
    metric: MetricData
    step_size: float = np.nan

    @property
    def geom(self) -> SymmetricGeometry:
        return self.metric.geom

    def normalization_defect(self) -> float:
        return abs(self.metric.integrate(np.exp(-self.u)) / self.geom.V - 1.0)

    def ke_residual(self) -> float:
        """Sup norm of Ric(omega_t) - omega_t, which equals -i ddbar u."""
        return geo.form_sup_norm(self.metric, self.u)


def flow_state(geom: SymmetricGeometry, phi, t: float = 0.0,
               step_size: float = np.nan) -> FlowState:
    phi = geo._values(phi)
    md = metric_from_potential(geom, phi)
    c = normalization_constant(geom, phi)
    u = md.logf + phi + c - geom.h_ref
    a = -md.integrate(u * np.exp(-u)) / geom.V
    state = FlowState(t=t, phi=phi, u=u, c=c, a=a, metric=md, step_size=step_size)
    defect = state.normalization_defect()
    if defect > NORMALIZATION_TOL:
        raise StabilityError(f"normalization defect {defect:.3e} exceeds tolerance")
    return state


def _flow_jacobian(state: FlowState) -> np.ndarray:
    """Exact linearization of the flow right-hand side at the state.

    d(rhs)(v) = (1/2) Lap_t v + v + dc(v); the constant-functional derivative
    is minus the weighted mean of v with weight e^{h_ref - phi} omega^n.
    """
    geom = state.geom
    J = 0.5 * geo.laplacian_matrix(state.metric) + np.eye(geom.N)
    wgt = geom.quadrature_weights * np.exp(geom.h_ref - state.phi)
    wgt = wgt / wgt.sum()
    return J - np.outer(np.ones(geom.N), wgt)


def step(state: FlowState, dt: float, scheme: str = "semi-implicit") -> FlowState:
    """Advance one time step; raises on admissibility or stability loss."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    geom = state.geom
    if scheme == "semi-implicit":
        # Rosenbrock midpoint: one linear solve, second order, A-stable
        J = _flow_jacobian(state)
        k = solve(np.eye(geom.N) - 0.5 * dt * J, state.u)
        phi_new = state.phi + dt * k
    elif scheme == "rk4":
        def rhs(p):
            md = metric_from_potential(geom, p)
            return md.logf + p + normalization_constant(geom, p) - geom.h_ref
        k1 = state.u
        k2 = rhs(state.phi + 0.5 * dt * k1)
        k3 = rhs(state.phi + 0.5 * dt * k2)
        k4 = rhs(state.phi + dt * k3)
        phi_new = state.phi + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    if not np.all(np.isfinite(phi_new)):
        raise StabilityError(f"non-finite potential after step at t = {state.t:.4f}")
    growth = float(np.max(np.abs(phi_new - state.phi)))
    if growth > 50.0 * (1.0 + float(np.max(np.abs(state.phi)))):
        raise StabilityError(f"runaway step (|dphi| = {growth:.2e}) at t = {state.t:.4f}")
    return flow_state(geom, phi_new, t=state.t + dt, step_size=dt)


def ricci_potential_constants(state: FlowState):
    """(a, W): the normalizing-constant derivative and the entropy at tau = 1/2.

    a is the mean of -u e^{-u} against omega_t^n; W is evaluated from its full
    integrand mean of [ (|grad u|^2 + Scal)/2 + u - 2n ] e^{-u} omega_t^n.
    The two are tied by W = -a - n, which callers may assert.
    """
    md, u = state.metric, state.u
    geom = state.geom
    a = -md.integrate(u * np.exp(-u)) / geom.V
    _, gradsq = geo.gradient_norms(md, u)
    integrand = (0.5 * (gradsq + md.scal) + u - 2.0 * geom.n) * np.exp(-u)
    W = md.integrate(integrand) / geom.V
    return a, W


def evolution_identity_residual(state1: FlowState, state2: FlowState) -> float:
    """Sup of Lap_t u - 2 du/dt + 2u + 2a across a snapshot pair (midpoint)."""
    dt = state2.t - state1.t
    if dt <= 0:
        raise ValueError("states must be time ordered")
    lap_mid = 0.5 * (geo.laplacian(state1.metric, state1.u)
                     + geo.laplacian(state2.metric, state2.u))
    dudt = (state2.u - state1.u) / dt
    r = lap_mid - 2.0 * dudt + (state1.u + state2.u) + (state1.a + state2.a)
    return float(np.max(np.abs(r)))


def soliton_residual(state: FlowState) -> float:
    """Global sup of |covariant (2,0)-Hessian of u_t|^2 in the flow metric."""
    return float(np.max(geo.hessian20_norm(state.metric, state.u)))


def newton_ke_solve(geom: SymmetricGeometry, phi0, tol: float = 1e-11,
                    max_iter: int = 50, return_info: bool = False):
    """Solve log(omega_phi^n / omega^n) + phi - h_ref = 0 by Newton iteration.

    The linearization (1/2) Lap_phi v + v is singular along the first
    eigenfunction at the solution (the metric sits in a one-parameter family),
    so the system is bordered with the reference eigendirection
    psi = x - n/(n+1): iterates keep the psi-average of phi fixed and the
    multiplier converges to zero.  Terminal convergence is quadratic.
    """
    phi = geo._values(phi0).copy()
    n, N = geom.n, geom.N
    psi = geom.x_grid - n / (n + 1.0)
    residuals = []
    for _ in range(max_iter):
        md = metric_from_potential(geom, phi)
        F = md.logf + phi - geom.h_ref
        r = float(np.max(np.abs(F)))
        residuals.append(r)
        if r < tol:
            result = geo.KahlerPotential(phi, geom)
            return (result, residuals) if return_info else result
        J = 0.5 * geo.laplacian_matrix(md) + np.eye(N)
        A = np.zeros((N + 1, N + 1))
        A[:N, :N] = J
        A[:N, N] = psi
        A[N, :N] = geom.quadrature_weights * psi
        delta = solve(A, np.r_[-F, 0.0])[:N]
        t = 1.0
        while t > 1e-4:
            try:
                metric_from_potential(geom, phi + t * delta)
                break
            except AdmissibilityError:
                t *= 0.5
        else:
            raise NewtonError("line search hit the admissibility boundary", residuals)
        phi = phi + t * delta
    raise NewtonError(
        f"no convergence after {max_iter} iterations (residual {residuals[-1]:.3e})",
        residuals,
    )


# ---------------------------------------------------------------------------
# initial data catalog and full runs
# ---------------------------------------------------------------------------

def _legendre_profile(geom, k):
    c = np.zeros(k + 1)
    c[k] = 1.0
    return np.polynomial.legendre.legval(2.0 * geom.x_grid - 1.0, c)


def near_boundary_amplitude(geom, profile, target: float = 0.1) -> float:
    """Amplitude that puts min metric eigenvalue at target times the reference."""

    def min_ratio(eps):
        try:
            md = metric_from_potential(geom, eps * profile)
        except AdmissibilityError:
            return -1.0
        return min(md.mx.min(), md.mbar.min()) / (geom.n + 1.0)

    lo, hi = 0.0, 1.0
    while min_ratio(hi) > target:
        hi *= 2.0
        if hi > 1e3:
            raise RuntimeError("profile never reaches the admissibility boundary")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if min_ratio(mid) > target:
            lo = mid
        else:
            hi = mid
    return lo


def initial_potential_catalog(geom: SymmetricGeometry, seed: int = 0):
    """Named initial potentials: zero, fixed modes, a seeded mix, near-boundary."""
    rng = np.random.default_rng(seed)
    p2 = _legendre_profile(geom, 2)
    p3 = _legendre_profile(geom, 3)
    mix_a = geo.random_admissible_potential(geom, rng, amplitude=0.12, degree=5, margin=0.5)
    mix_b = geo.random_admissible_potential(geom, rng, amplitude=0.12, degree=5, margin=0.5)
    entries = [
        ("zero", np.zeros(geom.N)),
        ("p2", 0.10 * p2),
        ("p3", 0.05 * p3),
        ("mix-a", mix_a),
        ("mix-b", mix_b),
        ("near-boundary", near_boundary_amplitude(geom, p2, 0.1) * p2),
    ]
    return entries


@dataclass
class FlowRun:
    """Snapshot and record streams of one flow integration."""

    config: "object"
    snapshots: list
    functional_records: list
    monitor_records: list
    termination: str
    error: Optional[str] = None

    @property
    def times(self):
        return np.array([s.t for s in self.snapshots])


def run(config, geom: Optional[SymmetricGeometry] = None,
        initial_phi=None, collect_records: bool = True) -> FlowRun:
    """Integrate the flow per a RunConfig; classify the termination.

    Snapshots are recorded every ``snapshot_stride`` accepted steps (plus the
    initial and final states).  Record evaluation is delegated to the
    functionals and estimates modules when enabled.
    """
    from . import estimates, functionals
    from .config import RunConfig

    assert isinstance(config, RunConfig)
    if geom is None:
        geom = geo.fubini_study(config.n, config.N)
    if initial_phi is None:
        initial_phi = resolve_initial_potential(config, geom)

    state = flow_state(geom, initial_phi, t=0.0)
    snapshots = [state]
    func_records, mon_records = [], []

    def record(s):
        if not collect_records:
            return
        if "functionals" in config.monitors:
            func_records.append(functionals.evaluate_record(s))
        if "estimates" in config.monitors:
            mon_records.append(estimates.monitor(s))

    record(state)
    n_steps = int(round(config.t_max / config.dt))
    consecutive = 1 if state.ke_residual() <= config.tol_convergence else 0
    termination = "horizon_reached"
    try:
        for i in range(n_steps):
            try:
                state = step(state, config.dt, scheme=config.scheme)
            except AdmissibilityError as exc:
                termination = "admissibility_lost"
                return FlowRun(config, snapshots, func_records, mon_records,
                               termination, error=str(exc))
            if (i + 1) % config.snapshot_stride == 0 or i == n_steps - 1:
                snapshots.append(state)
                record(state)
                ke = state.ke_residual()
                sol = soliton_residual(state)
                if ke <= config.tol_convergence:
                    consecutive += 1
                else:
                    consecutive = 0
                    if sol <= config.tol_convergence:
                        termination = "converged_soliton"
                        break
                if consecutive >= 10:
                    termination = "converged_KE"
                    break
    except StabilityError as exc:
        exc.partial = FlowRun(config, snapshots, func_records, mon_records,
                              "horizon_reached", error=str(exc))
        raise
    return FlowRun(config, snapshots, func_records, mon_records, termination)


def resolve_initial_potential(config, geom: SymmetricGeometry) -> np.ndarray:
    from .config import RunConfig

    assert isinstance(config, RunConfig)
    if config.initial_kind == "zero":
        return np.zeros(geom.N)
    if config.initial_kind == "perturbation":
        profile = _legendre_profile(geom, config.profile)
        return config.amplitude * profile
    if config.initial_kind == "file":
        import json

        with open(config.initial_file) as fh:
            doc = json.load(fh)
        vals = np.asarray(doc["phi"], dtype=float)
        if vals.shape != (geom.N,):
            raise ValueError("initial potential file does not match the grid")
        return vals
    raise ValueError(f"unknown initial kind {config.initial_kind!r}")
