"""Boundary-layer correctors, their residual splits, and the bulk problem.

All corrector fields are represented per chart as layer expansions in
contravariant components.  The leading corrector is built from its vector
potential so incompressibility and the boundary blocks hold by construction:

  psi0 = -(eps eta g sqrtV / a3) * (rho e^{-a3 xi3/eps} - P)
  phi0 = curl psi0

with P the plateau profile (P = rho reproduces the printed closed form; a
gentler switch is available for desk-scale studies).  The corrector residual
L0 is assembled symbolically, split into -eps Q - M + R by exact trace
decomposition, the bulk response v1 is marched numerically, and the
first-order layer corrector phi1 is derived by solving the constant-trace
two-point problem in closed form and integrating its potential exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import sympy as sp

from .geometry import Geometry, TANGENTIAL_INDICES, NORMAL_INDEX
from .grids import GridPolicy, PoissonSolver, TensorGrid
from .layer_algebra import (EST_GUARD_SUP, XI1, XI3, LayerExpansion, LayerTerm,
                            T as TSYM, atom, _ATOM_CLASSES,
                            integrate_xi3_decaying, integrate_xi3_from_zero,
                            trace_decompose)

IDX = (*TANGENTIAL_INDICES, NORMAL_INDEX)


class UnsupportedOrderError(ValueError):
    pass


@dataclass(frozen=True)
class BoundaryData:
    """Traces and the decay-rate field on the outflow boundary."""

    alpha3: sp.Expr        # alpha . n as a function of chart XI1
    alpha0: float
    trace_v0: sp.Expr      # contravariant tangential Euler trace (XI1, T)

    @staticmethod
    def from_scenario(sc):
        return BoundaryData(sp.sympify(sc.alpha3_chart), float(sc.alpha0),
                            sp.sympify(sc.trace_v0_chart))


@dataclass
class VectorLayer:
    """Contravariant layer-expansion components on one chart."""

    chart_id: int
    comps: dict

    def comp(self, i) -> LayerExpansion:
        return self.comps[i]

    def map(self, fn):
        return VectorLayer(self.chart_id, {i: fn(e) for i, e in self.comps.items()})

    def __add__(self, other):
        return VectorLayer(self.chart_id, {
            i: self.comps[i] + other.comps[i] for i in self.comps})

    def order(self):
        return min(e.order for e in self.comps.values())


# ----------------------------------------------------------- construction


def _plateau(geom: Geometry, mode):
    if mode == "paper":
        return _ATOM_CLASSES["rho"](XI3)
    if mode == "spread":
        return _ATOM_CLASSES["stilde"](XI3)
    raise ValueError(f"unknown potential plateau mode {mode!r}")


def build_phi0(trace_v0, geom: Geometry, bdata: BoundaryData,
               plateau="paper"):
    """Leading corrector: potentials and fields per chart.

    Returns (psi0_list, phi0_list); psi0 entries are scalar layer expansions
    (the out-of-plane covariant potential), phi0 entries are VectorLayer.
    """
    rho = _ATOM_CLASSES["rho"](XI3)
    P = _plateau(geom, plateau)
    a3 = bdata.alpha3
    psis, phis = [], []
    for k, md in enumerate(geom.metric):
        g_k = sp.expand(geom.eta[k] * trace_v0)
        amp = -g_k * md.sqrtV / a3
        psi = LayerExpansion(a3, [
            LayerTerm(sp.expand(amp * rho), 1, 0, 1),
            LayerTerm(sp.expand(-amp * P), 1, 0, 0),
        ])
        phi = curl_of_potential(psi, md, k)
        psis.append(psi)
        phis.append(phi)
    return psis, phis


def curl_of_potential(psi: LayerExpansion, md, chart_id) -> VectorLayer:
    """phi = curl psi for the out-of-plane covariant potential psi."""
    inv = 1 / md.sqrtV
    comp1 = psi.diff_xi3().scaled(-inv)
    comp3 = psi.diff_xi1().scaled(inv)
    return VectorLayer(chart_id, {1: comp1, 3: comp3})


def divergence_layer(F: VectorLayer, md) -> LayerExpansion:
    """(1/sqrtV)[d1(sqrtV F^1) + d3(sqrtV F^3)] on layer expansions."""
    a = F.comp(1).scaled(md.sqrtV).diff_xi1()
    b = F.comp(3).scaled(md.sqrtV).diff_xi3()
    return (a + b).scaled(1 / md.sqrtV)


def prandtl_residual(phi: VectorLayer, bdata: BoundaryData,
                     component=1) -> LayerExpansion:
    """-eps d33 phi^i - alpha3 d3 phi^i, exactly."""
    e = phi.comp(component)
    visc = e.diff_xi3().diff_xi3().scaled(-1, eps_shift=1)
    adv = e.diff_xi3().scaled(-bdata.alpha3)
    return visc + adv


# --------------------------------------------------------- L0 assembly


def dd_smooth_layer(F_comps: dict, G: VectorLayer, md,
                    normal_split=True) -> VectorLayer:
    """(F . grad) G for a smooth contravariant F and a layer G.

    With normal_split the normal advection coefficient F^3 is written as
    F^3(xi3=0) + xi3 * remainder via exact trace decomposition, so the
    leading Prandtl term appears with the boundary-trace coefficient and the
    remainder carries an explicit xi3 power.
    """
    out = {}
    if normal_split:
        f3_tr, f3_rem = trace_decompose(F_comps[3])
    for i in IDX:
        acc = LayerExpansion.zero(G.comp(1).alpha3)
        for j in IDX:
            dG = G.comp(i).diff_xi1() if j == 1 else G.comp(i).diff_xi3()
            couple = LayerExpansion.zero(acc.alpha3)
            for ell in IDX:
                gam = md.gamma(i, ell, j)
                if gam != 0:
                    couple = couple + G.comp(ell).scaled(gam)
            if j == 3 and normal_split:
                acc = acc + dG.scaled(f3_tr)
                acc = acc + (dG + couple).with_terms(
                    [replace(t, amp=sp.expand(t.amp * f3_rem), t=t.t + 1)
                     for t in (dG + couple).terms])
                acc = acc + couple.scaled(f3_tr)
            else:
                acc = acc + (dG + couple).scaled(F_comps[j])
        out[i] = acc
    return VectorLayer(G.chart_id, out)


def dd_layer_smooth(F: VectorLayer, G_comps: dict, md) -> VectorLayer:
    """(F . grad) G for a layer F and smooth G: amplitudes only."""
    out = {}
    for i in IDX:
        acc = LayerExpansion.zero(F.comp(1).alpha3)
        for j in IDX:
            coef = sp.diff(G_comps[i], XI1 if j == 1 else XI3)
            for ell in IDX:
                coef += md.gamma(i, ell, j) * G_comps[ell]
            acc = acc + F.comp(j).scaled(sp.expand(coef))
        out[i] = acc
    return VectorLayer(F.chart_id, out)


def dd_layer_layer(F: VectorLayer, G: VectorLayer, md) -> VectorLayer:
    out = {}
    for i in IDX:
        acc = LayerExpansion.zero(F.comp(1).alpha3)
        for j in IDX:
            dG = G.comp(i).diff_xi1() if j == 1 else G.comp(i).diff_xi3()
            for ell in IDX:
                gam = md.gamma(i, ell, j)
                if gam != 0:
                    dG = dG + G.comp(ell).scaled(gam)
            acc = acc + F.comp(j) * dG
        out[i] = acc
    return VectorLayer(F.chart_id, out)


def laplacian_layer(F: VectorLayer, md) -> VectorLayer:
    """Vector Laplacian on layer expansions (standard zeroth-order form)."""
    Einv = {(1, 1): md.E11_inv, (3, 3): sp.Integer(1)}
    out = {}
    for i in IDX:
        acc = LayerExpansion.zero(F.comp(1).alpha3)
        for (j, k), w in Einv.items():
            second = (F.comp(i).diff_xi1().diff_xi1() if j == 1
                      else F.comp(i).diff_xi3().diff_xi3())
            acc = acc + second.scaled(w)
            for h in IDX:
                g = md.gamma(h, j, k)
                if g != 0:
                    dF = F.comp(i).diff_xi1() if h == 1 else F.comp(i).diff_xi3()
                    acc = acc + dF.scaled(sp.expand(-w * g))
            for h in IDX:
                g = md.gamma(i, h, j)
                if g != 0:
                    dF = F.comp(h).diff_xi1() if k == 1 else F.comp(h).diff_xi3()
                    acc = acc + dF.scaled(sp.expand(2 * w * g))
            for h in IDX:
                coef = sp.diff(md.gamma(i, h, k), XI1 if j == 1 else XI3)
                for ell in IDX:
                    coef += (md.gamma(i, ell, j) * md.gamma(ell, h, k)
                             - md.gamma(ell, k, j) * md.gamma(i, h, ell))
                coef = sp.expand(w * coef)
                if coef != 0:
                    acc = acc + F.comp(h).scaled(coef)
        out[i] = acc
    return VectorLayer(F.chart_id, out)


def assemble_L0(scenario, phi0_charts, geom: Geometry,
                bdata: BoundaryData) -> list:
    """L0_(k) per chart, assembled exactly from the five terms."""
    fields = scenario.chart_fields()
    U = fields["U"]
    v0 = fields["v0"]
    Upv0 = {i: sp.expand(U[i] + v0[i]) for i in IDX}
    out = []
    for k, md in enumerate(geom.metric):
        phi = phi0_charts[k]
        dt_phi = phi.map(lambda e: e.diff_t())
        lap = laplacian_layer(phi, md).map(lambda e: e.scaled(-1, eps_shift=1))
        adv_U = dd_smooth_layer(U, phi, md)
        stretch = dd_layer_smooth(phi, Upv0, md)
        adv_v0 = dd_smooth_layer(v0, phi, md)
        quad = None
        for kk, other in enumerate(phi0_charts):
            term = dd_layer_layer(phi, other, md)
            quad = term if quad is None else quad + term
        total = dt_phi + lap + adv_U + stretch + adv_v0 + quad
        out.append(total)
    return out


def classify_L0(L0: VectorLayer):
    """Check the classified structure: r in {1,2}, s+t>=0, or r=0 with s>=1."""
    bad = []
    for i in IDX:
        for tm in L0.comp(i).terms:
            if tm.order_exempt:
                continue
            if tm.r == 0:
                if tm.s < 1:
                    bad.append((i, tm))
            elif tm.r in (1, 2):
                if tm.s + tm.t < 0:
                    bad.append((i, tm))
            else:
                bad.append((i, tm))
    return bad


# ----------------------------------------------------------- Q / M / R


M_PROFILES = ((0, 0, 1), (-1, 1, 1), (0, 0, 2), (-1, 1, 2))   # (s, t, r) slots


@dataclass
class QMR:
    """Split L0 = -eps Q - M + R with boundary-trace M amplitudes."""

    Q: VectorLayer           # smooth bucket, stored with eps powers >= 0
    M: VectorLayer
    R: VectorLayer
    sigma: dict              # (component, slot j=1..4) -> trace expr (XI1, T)


def decompose_QMR(L0: VectorLayer, geom: Geometry) -> QMR:
    a3 = L0.comp(1).alpha3
    Qc, Mc, Rc = {}, {}, {}
    sigma = {}
    for i in IDX:
        q_terms, m_terms, r_terms = [], [], []
        for j in range(1, 5):
            sigma[(i, j)] = sp.Integer(0)
        for tm in L0.comp(i).terms:
            if tm.r == 0:
                if tm.s < 1 and not tm.order_exempt:
                    raise ValueError(f"unclassifiable smooth term {tm}")
                q_terms.append(LayerTerm(sp.expand(-tm.amp), tm.s - 1, tm.t, 0,
                                         order_exempt=tm.order_exempt))
                continue
            if tm.r not in (1, 2) and not tm.order_exempt:
                raise ValueError(f"unclassifiable decay multiplier in {tm}")
            if tm.s + tm.t == 0 and tm.r in (1, 2):
                tr, rem = trace_decompose(tm.amp)
                if tr != 0:
                    m_terms.append(LayerTerm(sp.expand(-tr), tm.s, tm.t, tm.r))
                    slot = 1 + (tm.t > 0) + 2 * (tm.r - 1)
                    sigma[(i, slot)] = sp.expand(sigma[(i, slot)] - tr)
                if rem != 0:
                    r_terms.append(LayerTerm(sp.expand(rem), tm.s, tm.t + 1,
                                             tm.r, order_exempt=tm.order_exempt))
            else:
                r_terms.append(tm)
        Qc[i] = LayerExpansion(a3, q_terms)
        Mc[i] = LayerExpansion(a3, m_terms)
        Rc[i] = LayerExpansion(a3, r_terms)
    cid = L0.chart_id
    return QMR(VectorLayer(cid, Qc), VectorLayer(cid, Mc), VectorLayer(cid, Rc),
               sigma)


def qmr_reconstruction(qmr: QMR) -> VectorLayer:
    """-eps Q - M + R (should merge back to L0 exactly)."""
    negQ = qmr.Q.map(lambda e: e.scaled(-1, eps_shift=1))
    negM = qmr.M.map(lambda e: e.scaled(-1))
    return negQ + negM + qmr.R


# ------------------------------------------------------------ bulk v1


@dataclass
class BulkSolution:
    """v1 on a uniform staggered grid plus its Gamma_- trace spline."""

    grid: TensorGrid
    times: list
    states: list             # FlowState-like (us, uq arrays)
    trace_times: np.ndarray
    trace_vals: np.ndarray   # physical tangential trace on Gamma_-
    p1: np.ndarray

    def trace_spline(self):
        from scipy.interpolate import CubicSpline
        return CubicSpline(self.trace_times, self.trace_vals, axis=0)


def solve_bulk_v1(Q_native, scenario, eps, n_q=256, n_out=32, cfl=0.30,
                  forcing_extra=None):
    """March the linearized Euler system for the bulk corrector v1.

    dt v + (u0 . grad) v + (v . grad) u0 + grad p1 = Q + lap(u0),
    div v = 0, full trace 0 on Gamma_+, normal trace 0 on Gamma_-.

    Q_native(s_grid, q_grid, t) -> (Q_s, Q_q) gives the physical components
    of the smooth residual source at the requested points.  RK3 with
    2nd-order upwinded advection on a uniform staggered grid; projection
    enforces the divergence constraint each stage.
    """
    from .solvers import vector_laplacian

    sc = scenario
    geo = sc.geometry
    pol = GridPolicy(n_tangential=geo.mesh.n_tangential,
                     wall_cells_per_scale=1e9, growth=1.0,
                     bulk_cell_frac=1.0 / n_q, min_layer_cells=0)
    if geo.kind == "channel":
        grid = TensorGrid.channel(sc.params["length"], sc.params["height"],
                                  1.0, 1.0, pol)
    else:
        grid = TensorGrid.annulus(sc.params["r_in"], sc.params["r_out"],
                                  1.0, 1.0, pol, outflow=geo.gamma_minus)
    g = grid
    poisson = PoissonSolver(g)
    # closed-form coefficient fields
    u0s_f, u0q_f = sc.fn(sc.u0[0]), sc.fn(sc.u0[1])
    lap_s, lap_q = vector_laplacian(sc.h_expr, sc.u0)
    from .solvers import S as SS, Q as QQ
    lps, lpq = sc.fn(lap_s), sc.fn(lap_q)
    du0 = {key: sc.fn(sp.diff(sc.u0[c], var))
           for key, (c, var) in {
               "ss_s": (0, SS), "ss_q": (0, QQ),
               "qq_s": (1, SS), "qq_q": (1, QQ)}.items()}
    Sf, Qc = np.meshgrid(g.s_faces, g.q_centers, indexing="ij")
    Sc, Qfi = np.meshgrid(g.s_centers, g.q_faces[1:-1], indexing="ij")
    Scf, Qff = np.meshgrid(g.s_centers, g.q_faces, indexing="ij")
    ds = g.ds
    dq = float(g.dq[0])
    hc = g.h_c[None, :]
    hf = g.h_f[None, 1:-1]
    hpc = g.hp_c[None, :]
    hpf = g.hp_f[None, 1:-1]
    gm_lo = (g.gamma_minus_end == 0)

    def upwind_s(f, c):
        fp = (1.5 * f - 2.0 * np.roll(f, 1, axis=0)
              + 0.5 * np.roll(f, 2, axis=0)) / ds
        fm = (-1.5 * f + 2.0 * np.roll(f, -1, axis=0)
              - 0.5 * np.roll(f, -2, axis=0)) / ds
        return np.where(c > 0, fp, fm)

    def upwind_q(f, c, lo_ghosts, hi_ghosts):
        ext = np.concatenate([lo_ghosts, f, hi_ghosts], axis=1)
        j0 = lo_ghosts.shape[1]
        idx = np.arange(f.shape[1]) + j0
        fp = (1.5 * ext[:, idx] - 2.0 * ext[:, idx - 1] + 0.5 * ext[:, idx - 2]) / dq
        fm = (-1.5 * ext[:, idx] + 2.0 * ext[:, idx + 1] - 0.5 * ext[:, idx + 2]) / dq
        return np.where(c > 0, fp, fm)

    def ghosts_us(us, t):
        # tangential condition only on Gamma_+ (full trace zero); Gamma_-
        # side is outflow: extrapolate
        lo = np.stack([3 * us[:, 0] - 3 * us[:, 1] + us[:, 2],
                       2 * us[:, 0] - us[:, 1]], axis=1)[:, ::-1]
        hi = np.stack([2 * us[:, -1] - us[:, -2],
                       3 * us[:, -1] - 3 * us[:, -2] + us[:, -3]], axis=1)
        if gm_lo:     # Gamma_+ is the high wall: mirror to zero there
            hi = np.stack([-us[:, -1], -us[:, -2]], axis=1)
        else:
            lo = np.stack([-us[:, 1], -us[:, 0]], axis=1)
        return lo, hi

    def rhs(us, uq, t):
        uq_c = g.q_face_to_center(uq)
        uq_at_us = 0.5 * (uq_c + np.roll(uq_c, 1, axis=0))
        us_c = g.s_face_to_center(us)
        us_at_uq = g.q_center_to_face(us_c)
        U0s_us = u0s_f(Sf, Qc, t)
        U0q_us = 0.5 * (g.q_face_to_center(u0q_f(Scf, Qff, t))
                        + np.roll(g.q_face_to_center(u0q_f(Scf, Qff, t)), 1, 0))
        U0s_uq = u0s_f(Sc, Qfi, t)
        U0q_uq = u0q_f(Sc, Qfi, t)
        # advection of v by u0 (upwind on u0 directions)
        lo, hi = ghosts_us(us, t)
        adv_s = (U0s_us / hc * upwind_s(us, U0s_us)
                 + U0q_us * upwind_q(us, U0q_us, lo, hi)
                 + hpc / hc * U0s_us * uq_at_us)
        uqi = uq[:, 1:-1]
        lo_q = np.stack([uq[:, 0], uq[:, 0]], axis=1)
        hi_q = np.stack([uq[:, -1], uq[:, -1]], axis=1)
        adv_q = (U0s_uq / hf * upwind_s(uqi, U0s_uq)
                 + U0q_uq * upwind_q(uqi, U0q_uq, lo_q, hi_q)
                 - hpf / hf * U0s_uq * us_at_uq)
        # stretching (v . grad) u0 in physical components
        str_s = (us * du0["ss_s"](Sf, Qc, t) / hc
                 + uq_at_us * du0["ss_q"](Sf, Qc, t)
                 + hpc / hc * us * U0q_us * 0
                 + hpc / hc * uq_at_us * U0s_us * 0
                 + hpc / hc * us * u0q_f(Sf, Qc, t))
        str_q = (us_at_uq * du0["qq_s"](Sc, Qfi, t) / hf
                 + uqi * du0["qq_q"](Sc, Qfi, t)
                 - 2.0 * hpf / hf * us_at_uq * U0s_uq)
        Qs, Qq = Q_native((Sf, Qc), (Sc, Qfi), t)
        if forcing_extra is not None:
            Fs, Fq = forcing_extra((Sf, Qc), (Sc, Qfi), t)
            Qs = Qs + Fs
            Qq = Qq + Fq
        r_s = -adv_s - str_s + Qs + lps(Sf, Qc, t)
        r_q = -adv_q - str_q + Qq + lpq(Sc, Qfi, t)
        return r_s, r_q

    def project(us, uq):
        phi = poisson.solve(g.divergence(us, uq))
        us2 = us - g.grad_s(phi)
        uq2 = uq.copy()
        uq2[:, 1:-1] -= g.grad_q(phi)
        return us2, uq2, phi

    umax = max(float(np.max(np.abs(u0s_f(Sf, Qc, t))))
               for t in np.linspace(0, sc.T, 9)) + 1e-12
    dt = min(cfl * ds * float(np.min(g.h_c)) / umax, cfl * dq / umax, 2.5e-3)
    per = max(1, int(math.ceil(sc.T / (n_out * dt))))
    nsteps = per * n_out
    dt = sc.T / nsteps
    us = np.zeros((g.ns, g.nq))
    uq = np.zeros((g.ns, g.nq + 1))
    p1 = np.zeros((g.ns, g.nq))
    times = [0.0]
    states = [(us.copy(), uq.copy())]
    tr_t = [0.0]
    tr_v = [np.zeros(g.ns)]
    wall = (slice(None), 0) if not gm_lo else (slice(None), -1)
    for k in range(nsteps):
        t0 = k * dt
        # SSP RK3
        r1s, r1q = rhs(us, uq, t0)
        a_s = us + dt * r1s
        a_q = uq.copy()
        a_q[:, 1:-1] += dt * r1q
        a_s, a_q, _ = project(a_s, a_q)
        r2s, r2q = rhs(a_s, a_q, t0 + dt)
        b_s = 0.75 * us + 0.25 * (a_s + dt * r2s)
        b_q = uq.copy()
        b_q[:, 1:-1] = 0.75 * uq[:, 1:-1] + 0.25 * (a_q[:, 1:-1] + dt * r2q)
        b_s, b_q, _ = project(b_s, b_q)
        r3s, r3q = rhs(b_s, b_q, t0 + 0.5 * dt)
        us_n = us / 3.0 + 2.0 / 3.0 * (b_s + dt * r3s)
        uq_n = uq.copy()
        uq_n[:, 1:-1] = uq[:, 1:-1] / 3.0 + 2.0 / 3.0 * (b_q[:, 1:-1] + dt * r3q)
        us, uq, phi = project(us_n, uq_n)
        p1 = phi / dt
        t1 = t0 + dt
        if gm_lo:
            tr = 1.5 * us[:, 0] - 0.5 * us[:, 1]
        else:
            tr = 1.5 * us[:, -1] - 0.5 * us[:, -2]
        tr_t.append(t1)
        tr_v.append(tr.copy())
        if (k + 1) % per == 0:
            times.append(t1)
            states.append((us.copy(), uq.copy()))
    return BulkSolution(g, times, states, np.array(tr_t),
                        np.array(tr_v), p1)


# -------------------------------------------------------------- phi1, q1


def register_trace_atom(name, spline, geom, theta_symmetric=True):
    """Expose a numeric Gamma_- trace as a differentiable atom g(t).

    The spline carries the physical tangential trace; the atom returns the
    contravariant trace (divided by |e1| at the wall).
    """
    atom(name, nargs=1, derivs={1: f"{name}_d1"})
    atom(f"{name}_d1", nargs=1, derivs={1: f"{name}_d2"})
    atom(f"{name}_d2", nargs=1)
    sv0 = float(geom.metric[0].sqrtV.subs({XI3: 0, XI1: 0.25}))
    geom.ctx.register(name, lambda t: np.asarray(spline(np.asarray(t)), float) / sv0)
    geom.ctx.register(f"{name}_d1",
                      lambda t: np.asarray(spline(np.asarray(t), 1), float) / sv0)
    geom.ctx.register(f"{name}_d2",
                      lambda t: np.asarray(spline(np.asarray(t), 2), float) / sv0)
    return _ATOM_CLASSES[name](TSYM)


def phi1_ode_profile(sigma, comp, a3, trace_v1_k):
    """Closed-form solution of -eps f'' - a3 f' = M^i/eps with f(0) trace.

    Returns the layer expansion  A e1 + (B chi + C chi^2) e1 + (D + E chi) e2
    with chi = xi3/eps, e_r = exp(-r a3 xi3 / eps).
    """
    s1 = sigma.get((comp, 1), sp.Integer(0))
    s2 = sigma.get((comp, 2), sp.Integer(0))
    s3 = sigma.get((comp, 3), sp.Integer(0))
    s4 = sigma.get((comp, 4), sp.Integer(0))
    B = sp.expand(s1 / a3 + s2 / a3**2)
    C = sp.expand(s2 / (2 * a3))
    D = sp.expand(-(s3 / (2 * a3**2) + 3 * s4 / (4 * a3**3)))
    E = sp.expand(-s4 / (2 * a3**2))
    A = sp.expand(-trace_v1_k - D)
    terms = []
    if A != 0:
        terms.append(LayerTerm(A, 0, 0, 1))
    if B != 0:
        terms.append(LayerTerm(B, -1, 1, 1))
    if C != 0:
        terms.append(LayerTerm(C, -2, 2, 1))
    if D != 0:
        terms.append(LayerTerm(D, 0, 0, 2))
    if E != 0:
        terms.append(LayerTerm(E, -1, 1, 2))
    return LayerExpansion(a3, terms)


def build_phi1(qmr_charts, trace_v1, geom: Geometry, bdata: BoundaryData,
               plateau="paper", order=1):
    """First-order layer corrector from the M traces and the v1 trace.

    trace_v1: sympy expr (atom) for the contravariant tangential trace of v1.
    Returns (psi1_list, phi1_list).
    """
    if order >= 2:
        raise UnsupportedOrderError(
            "correctors of order n >= 2 are reserved but not implemented")
    rho = _ATOM_CLASSES["rho"](XI3)
    P = _plateau(geom, plateau)
    a3 = bdata.alpha3
    psis, phis = [], []
    for k, md in enumerate(geom.metric):
        qmr = qmr_charts[k]
        tr_k = sp.expand(geom.eta[k] * trace_v1)
        prof = phi1_ode_profile(qmr.sigma, 1, a3, tr_k)
        J = integrate_xi3_from_zero(prof)
        Jtilde = J.layer_part()
        Jinf = J.smooth_part()
        psi_terms = []
        for tm in Jtilde.terms:
            psi_terms.append(LayerTerm(
                sp.expand(-tm.amp * rho * md.sqrtV), tm.s, tm.t, tm.r))
        for tm in Jinf.terms:
            psi_terms.append(LayerTerm(
                sp.expand(-tm.amp * P * md.sqrtV), tm.s, tm.t, 0))
        psi = LayerExpansion(a3, psi_terms)
        phi = curl_of_potential(psi, md, k)
        psis.append(psi)
        phis.append(phi)
    return psis, phis


def build_q1(M_normal: LayerExpansion, bdata: BoundaryData) -> tuple:
    """Pressure corrector: exact decaying antiderivative of M^3/eps."""
    if M_normal.smooth_part().terms:
        raise ValueError("M^3 contains r = 0 terms; not integrable with decay")
    q1 = integrate_xi3_decaying(M_normal.scaled(1, eps_shift=-1))
    return q1, q1


def grad_q1(q1: LayerExpansion, md) -> VectorLayer:
    return VectorLayer(0, {1: q1.diff_xi1().scaled(md.E11_inv),
                           3: q1.diff_xi3()})


# ------------------------------------------------------------ packaging


@dataclass
class CorrectorSet:
    """Everything the harness needs for one scenario at one order."""

    order: int
    bdata: BoundaryData
    psi0: list
    phi0: list
    L0: list = None
    qmr: list = None
    bulk: BulkSolution = None
    psi1: list = None
    phi1: list = None
    q1: LayerExpansion = None
    plateau: str = "paper"
    meta: dict = field(default_factory=dict)

    def serialize(self, path, geom: Geometry, samples=17):
        """Self-describing JSON archive of the symbolic content."""
        xs = np.linspace(0.0, 1.0, samples)
        doc = {"order": self.order, "plateau": self.plateau,
               "alpha0": self.bdata.alpha0,
               "alpha3": sp.srepr(self.bdata.alpha3),
               "charts": []}
        for k, phi in enumerate(self.phi0):
            entry = {"chart": k, "fields": {}}
            for name, vec in (("phi0", phi),
                              ("phi1", self.phi1[k] if self.phi1 else None)):
                if vec is None:
                    continue
                comps = {}
                for i, e in vec.comps.items():
                    comps[str(i)] = {
                        "terms": [{"amp": sp.srepr(t.amp), "s": t.s, "t": t.t,
                                   "r": t.r, "est": t.order_exempt}
                                  for t in e.terms],
                        "amp_samples_t1_xi30": [
                            float(v) for v in e.evaluate(
                                1e-2, xs, 0 * xs, 1.0, geom.ctx)],
                    }
                entry["fields"][name] = comps
            doc["charts"].append(entry)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
        return path


def build_corrector_set(scenario, order=0, plateau="paper", eps_for_guard=None,
                        v1_kwargs=None) -> CorrectorSet:
    """Full pipeline: phi0 (+ L0, Q/M/R, v1, phi1, q1 when order = 1)."""
    if order not in (0, 1):
        raise UnsupportedOrderError(
            "correctors of order n >= 2 are reserved but not implemented")
    geom = scenario.geometry
    bdata = BoundaryData.from_scenario(scenario)
    psi0, phi0 = build_phi0(bdata.trace_v0, geom, bdata, plateau=plateau)
    cs = CorrectorSet(order=order, bdata=bdata, psi0=psi0, phi0=phi0,
                      plateau=plateau)
    if order == 0:
        return cs
    cs.L0 = assemble_L0(scenario, phi0, geom, bdata)
    if eps_for_guard:
        cs.L0 = [vl.map(lambda e: e.apply_est_guard(
            eps_for_guard, geom.ctx, geom.delta)) for vl in cs.L0]
    cs.qmr = [decompose_QMR(vl, geom) for vl in cs.L0]
    Q_native = make_Q_evaluator(cs.qmr, scenario)
    cs.bulk = solve_bulk_v1(Q_native, scenario, eps=None, **(v1_kwargs or {}))
    tr_atom = register_trace_atom(f"g1trace_{scenario.name}",
                                  cs.bulk.trace_spline(), geom)
    cs.meta["trace_atom"] = f"g1trace_{scenario.name}"
    cs.psi1, cs.phi1 = build_phi1(cs.qmr, tr_atom, geom, bdata,
                                  plateau=plateau)
    M3 = cs.qmr[0].M.comp(3)
    cs.q1, _ = build_q1(M3, bdata)
    return cs


def make_Q_evaluator(qmr_charts, scenario, eps_value=None):
    """Native-component evaluator of Q summed over charts.

    Q's eps powers are >= 0; eps_value fixes the (tiny) higher-order part.
    When eps_value is None those terms are evaluated at eps = 0, keeping the
    bulk problem viscosity independent.
    """
    geom = scenario.geometry
    ctx = geom.ctx
    evalue = 0.0 if eps_value is None else float(eps_value)

    def Q_native(us_pts, uq_pts, t):
        out = []
        for pts, comp in ((us_pts, 1), (uq_pts, 3)):
            s_arr, q_arr = pts
            xi1, xi3 = scenario.chart_of_native(s_arr, q_arr)
            total = np.zeros(np.broadcast(s_arr, q_arr).shape)
            inside = xi3 <= geom.delta
            if inside.any():
                for qmr in qmr_charts:
                    e = qmr.Q.comp(comp)
                    for tm in e.terms:
                        amp = ctx.lambdify(tm.amp)(xi1, xi3, np.asarray(t))
                        w = amp * (evalue ** tm.s if tm.s else 1.0) \
                            * xi3 ** tm.t
                        total += np.where(inside, w, 0.0)
            if comp == 1:
                sv = scenario.sqrtv_of_q(q_arr)
                out.append(total * sv)
            else:
                out.append(total * scenario.params.get("normal_sign", 1.0))
        return out[0], out[1]

    return Q_native
