"""Flow scenarios, manufactured forcing, and the incompressible solvers.

Native solver coordinates are (s, q) with metric factor h(q): the channel has
(s, q) = (x, y), h = 1; the annulus has (s, q) = (theta, r), h = r.  Velocity
components are physical (orthonormal-frame) components (u_s, u_q).

The Navier-Stokes march is an incremental pressure-correction scheme on the
staggered wall-clustered grid: normal-direction advection and diffusion are
Crank-Nicolson implicit (banded solves, no wall-cell time-step restriction),
tangential terms are Adams-Bashforth explicit, and the pressure Poisson solve
is FFT-exact in s, so the discrete divergence is at round-off after every
projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import sympy as sp

from .geometry import Geometry, build_annulus_geometry, build_channel_geometry
from .grids import GridPolicy, PoissonSolver, TensorGrid, thomas_batch
from .layer_algebra import T as TSYM
from .layer_algebra import XI1, XI3

S, Q = sp.symbols("s q", real=True)
TWO_PI = 2 * sp.pi


class CompatibilityError(ValueError):
    pass


class ResolutionError(RuntimeError):
    pass


class CFLError(RuntimeError):
    pass


# ------------------------------------------------------------- scenarios


@dataclass
class Scenario:
    """Closed-form flow data satisfying the inflow/outflow hypotheses."""

    name: str
    geometry: Geometry
    h_expr: sp.Expr               # metric factor h(q)
    U: tuple                      # background lift (U_s, U_q)(s, q, t)
    v0: tuple                     # Euler perturbation (v0_s, v0_q)
    p0: sp.Expr
    forcing: tuple                # exact Euler forcing (f_s, f_q)
    alpha: tuple                  # Gamma_- trace of the NSE data (s, t)
    beta: tuple                   # Gamma_+ trace (s, t)
    alpha3_chart: sp.Expr         # alpha.n as a function of chart XI1
    alpha0: float
    T_requested: float
    T: float
    trace_v0_chart: sp.Expr       # contravariant tangential trace, (XI1, T)
    params: dict = field(default_factory=dict)
    _lamcache: dict = field(default_factory=dict, repr=False)

    @property
    def u0(self):
        return tuple(sp.expand(a + b) for a, b in zip(self.U, self.v0))

    def fn(self, expr, args=(S, Q, TSYM)):
        key = (sp.srepr(sp.sympify(expr)), tuple(map(str, args)))
        f = self._lamcache.get(key)
        if f is None:
            raw = sp.lambdify(args, expr, modules="numpy")
            def f(*vals, _raw=raw):
                out = _raw(*vals)
                return (np.broadcast_to(out, np.broadcast(*vals).shape).astype(float)
                        if np.ndim(out) == 0 else np.asarray(out, dtype=float))
            self._lamcache[key] = f
        return f

    # chart <-> native maps for the collar
    def chart_of_native(self, s, q):
        if self.geometry.kind == "channel":
            return np.asarray(s, float), np.asarray(q, float)
        R = self.params["r_out"]
        return np.asarray(s, float) / (2 * np.pi), R - np.asarray(q, float)

    def native_of_chart(self, xi1, xi3):
        if self.geometry.kind == "channel":
            return np.asarray(xi1, float), np.asarray(xi3, float)
        R = self.params["r_out"]
        return 2 * np.pi * np.asarray(xi1, float), R - np.asarray(xi3, float)

    def sqrtv_of_q(self, q):
        """|e1| along the collar, as a function of the native q."""
        if self.geometry.kind == "channel":
            return np.ones_like(np.asarray(q, float))
        return 2 * np.pi * np.asarray(q, float)

    def verify_compatibility(self, order=0, n=256, tol=1e-10):
        """All §-level gates: signs, flux balance, traces at t = 0."""
        ss = np.linspace(0.0, float(self.s_period()), n, endpoint=False)
        tt = np.linspace(0.0, self.T, 9)
        a_n = self.alpha_dot_n(ss)
        if np.min(a_n) <= 0:
            raise CompatibilityError("alpha . n must be positive on Gamma_-")
        b_n = self.beta_dot_n(ss, tt[:, None])
        if np.max(b_n) >= 0:
            raise CompatibilityError("beta . n must be negative on Gamma_+")
        if np.min(a_n) < self.alpha0 - 1e-12:
            raise CompatibilityError("alpha3 falls below alpha0")
        flux = self.net_flux(n)
        if abs(flux) > tol * max(1.0, np.max(np.abs(a_n))):
            raise CompatibilityError(f"net boundary flux {flux:.3e} != 0")
        tr0 = self.fn(self.trace_v0_chart, (XI1, TSYM))(np.linspace(0, 1, n), 0.0)
        if np.max(np.abs(tr0)) > 1e-12:
            raise CompatibilityError("tangential Euler trace nonzero at t = 0")
        if order >= 1:
            dtr = sp.diff(self.trace_v0_chart, TSYM)
            d0 = self.fn(dtr, (XI1, TSYM))(np.linspace(0, 1, n), 0.0)
            if np.max(np.abs(d0)) > 1e-12:
                raise CompatibilityError(
                    "d/dt of tangential Euler trace nonzero at t = 0")
        return True

    def s_period(self):
        return 2 * np.pi if self.geometry.kind == "annulus" else \
            self.params["length"]

    def alpha_dot_n(self, s, t=0.0):
        sgn = self.params["alpha_n_sign"]
        return sgn * self.fn(self.alpha[1], (S, TSYM))(s, t)

    def beta_dot_n(self, s, t=0.0):
        sgn = self.params["beta_n_sign"]
        return sgn * self.fn(self.beta[1], (S, TSYM))(s, t)

    def net_flux(self, n=512):
        ss = np.linspace(0.0, float(self.s_period()), n, endpoint=False)
        ds = float(self.s_period()) / n
        h_minus = self.params["h_gamma_minus"]
        h_plus = self.params["h_gamma_plus"]
        return float(np.sum(self.alpha_dot_n(ss)) * ds * h_minus
                     + np.sum(self.beta_dot_n(ss)) * ds * h_plus)

    def small_time_gate(self, n_charts=None):
        """Largest horizon satisfying sup |trace| <= e alpha0 / (8 N)."""
        N = n_charts or len(self.geometry.atlas)
        bound = math.e * self.alpha0 / (8.0 * N)
        xs = np.linspace(0.0, 1.0, 257)
        ts = np.linspace(0.0, self.T_requested, 2049)
        tr = np.abs(self.fn(self.trace_v0_chart, (XI1, TSYM))(
            xs[:, None], ts[None, :]))
        sup_t = tr.max(axis=0)
        ok = sup_t <= bound
        if ok.all():
            return self.T_requested, bound
        first_bad = int(np.argmin(ok))
        return float(ts[max(first_bad - 1, 1)]), bound


def _h_and_div_check(h_expr, us, uq):
    div = sp.simplify((sp.diff(us, S) + sp.diff(h_expr * uq, Q)) / h_expr)
    if div != 0:
        raise ValueError(f"manufactured field is not divergence free: {div}")


def make_annulus_scenario(Qf=4 * math.pi, kappa=2 * math.pi, A=3.0,
                          omega=4 * math.pi, T=0.5, r_in=1.0, r_out=2.0,
                          delta_frac=0.9, policy=None, auto_shorten=True):
    """Swirl-pulse family on the annulus; exact Euler solution for any eps.

    U is simultaneously a Stokes field (with constant pressure) and a steady
    Euler field; u0 = U + a(t)/(2 pi r) e_theta with a = A sin^2(omega t).
    Gamma_- is the outer circle; alpha3 = Qf / (2 pi r_out).
    """
    if Qf <= 0:
        raise CompatibilityError("outflow flux Qf must be positive")
    if A < 0 or r_in <= 0 or r_out <= r_in:
        raise CompatibilityError("invalid annulus scenario parameters")
    geo = build_annulus_geometry(r_in, r_out, "outer",
                                 delta=delta_frac * (r_out - r_in),
                                 policy=policy)
    a_t = A * sp.sin(omega * TSYM) ** 2
    Us = kappa / (TWO_PI * Q)
    Uq = Qf / (TWO_PI * Q)
    v0s = a_t / (TWO_PI * Q)
    u0s = Us + v0s
    p0 = -(u0s**2 + Uq**2) / 2
    f_s = sp.diff(a_t, TSYM) / (TWO_PI * Q)
    alpha = (Us.subs(Q, r_out), Uq.subs(Q, r_out))
    beta = (u0s.subs(Q, r_in), Uq.subs(Q, r_in))
    alpha3 = sp.Float(Qf / (2 * math.pi * r_out))
    trace = a_t / (4 * sp.pi**2 * r_out**2)
    sc = Scenario(
        name="annulus", geometry=geo, h_expr=Q,
        U=(Us, Uq), v0=(v0s, sp.Integer(0)), p0=p0,
        forcing=(f_s, sp.Integer(0)),
        alpha=alpha, beta=beta,
        alpha3_chart=alpha3, alpha0=float(alpha3),
        T_requested=float(T), T=float(T),
        trace_v0_chart=trace.subs(TSYM, TSYM),
        params={"r_in": float(r_in), "r_out": float(r_out), "Qf": Qf,
                "kappa": kappa, "A": A, "omega": omega,
                "alpha_n_sign": 1.0, "beta_n_sign": -1.0,
                "h_gamma_minus": float(r_out), "h_gamma_plus": float(r_in)},
    )
    if auto_shorten:
        T_ok, _ = sc.small_time_gate()
        sc.T = min(sc.T, T_ok)
    sc.verify_compatibility(order=1)
    return sc


def make_channel_scenario(V0=1.0, b=0.1, omega=2 * math.pi, T=0.25,
                          length=1.0, height=1.0, n_charts=1,
                          delta_frac=0.9, policy=None, auto_shorten=True):
    """Oblique suction channel with a variable outflow angle alpha3(x).

    u0 = perp-grad of (Psi0 + h(t) Phi) with Psi0 = V0 x + b sin(2 pi x)(1-y)^2
    and Phi = sin(2 pi x) y (1-y)^3; the time profile is h = sin^2(omega t).
    The vertical factor of Phi vanishes to second order at the top wall so the
    perturbation has zero full trace on Gamma_+ and the lift stays steady.
    """
    if V0 <= 2 * math.pi * b:
        raise CompatibilityError("need V0 > 2 pi b for alpha0 > 0")
    geo = build_channel_geometry(length, height, n_charts,
                                 delta=delta_frac * height, policy=policy)
    x, y = S, Q
    psi0 = V0 * x + b * sp.sin(TWO_PI * x) * (1 - y) ** 2
    phit = sp.sin(TWO_PI * x) * y * (1 - y) ** 3
    h_t = sp.sin(omega * TSYM) ** 2
    Us, Uq = sp.diff(psi0, y), -sp.diff(psi0, x)
    v0s, v0q = h_t * sp.diff(phit, y), -h_t * sp.diff(phit, x)
    _h_and_div_check(sp.Integer(1), Us, Uq)
    _h_and_div_check(sp.Integer(1), v0s, v0q)
    u0s, u0q = Us + v0s, Uq + v0q
    p0 = sp.Integer(0)
    f_s, f_q = euler_forcing((u0s, u0q), p0, sp.Integer(1))
    alpha = (Us.subs(y, 0), Uq.subs(y, 0))
    beta = (sp.expand(u0s.subs(y, 1)), sp.expand(u0q.subs(y, 1)))
    alpha3 = V0 + 2 * sp.pi * b * sp.cos(TWO_PI * XI1)
    trace = h_t * sp.sin(TWO_PI * XI1)
    sc = Scenario(
        name="channel", geometry=geo, h_expr=sp.Integer(1),
        U=(Us, Uq), v0=(v0s, v0q), p0=p0, forcing=(f_s, f_q),
        alpha=alpha, beta=beta,
        alpha3_chart=alpha3, alpha0=float(V0 - 2 * math.pi * b),
        T_requested=float(T), T=float(T),
        trace_v0_chart=trace,
        params={"length": float(length), "height": float(height),
                "V0": V0, "b": b, "omega": omega,
                "alpha_n_sign": -1.0, "beta_n_sign": 1.0,
                "h_gamma_minus": 1.0, "h_gamma_plus": 1.0},
    )
    if auto_shorten:
        T_ok, _ = sc.small_time_gate()
        sc.T = min(sc.T, T_ok)
    sc.verify_compatibility(order=1)
    return sc


# ---------------------------------------------------------- MMS machinery


def convective(h_expr, u, a):
    """(u . grad a) in physical components on the h(q) metric."""
    hs = h_expr
    hp = sp.diff(hs, Q)
    us, uq = u
    as_, aq = a
    cs = uq * sp.diff(as_, Q) + us / hs * sp.diff(as_, S) + hp / hs * us * aq
    cq = uq * sp.diff(aq, Q) + us / hs * sp.diff(aq, S) - hp / hs * us * as_
    return sp.expand(cs), sp.expand(cq)


def vector_laplacian(h_expr, u):
    hs = h_expr
    hp = sp.diff(hs, Q)
    us, uq = u

    def scal(f):
        return sp.diff(hs * sp.diff(f, Q), Q) / hs + sp.diff(f, S, 2) / hs**2

    ls = scal(us) - (hp / hs) ** 2 * us + 2 * hp / hs**2 * sp.diff(uq, S)
    lq = scal(uq) - (hp / hs) ** 2 * uq - 2 * hp / hs**2 * sp.diff(us, S)
    return sp.expand(ls), sp.expand(lq)


def euler_forcing(u, p, h_expr):
    cs, cq = convective(h_expr, u, u)
    fs = sp.diff(u[0], TSYM) + cs + sp.diff(p, S) / h_expr
    fq = sp.diff(u[1], TSYM) + cq + sp.diff(p, Q)
    return sp.expand(fs), sp.expand(fq)


def mms_forcing(exact_u, exact_p, eps, h_expr):
    """f making exact_u an exact solution: viscous if eps > 0, Euler if 0."""
    fs, fq = euler_forcing(exact_u, exact_p, h_expr)
    if eps:
        ls, lq = vector_laplacian(h_expr, exact_u)
        fs = sp.expand(fs - eps * ls)
        fq = sp.expand(fq - eps * lq)
    return fs, fq


# ------------------------------------------------------------- flow state


@dataclass
class FlowState:
    """Staggered velocity/pressure sample at one output time."""

    t: float
    us: np.ndarray          # (ns, nq) at s-faces x q-centers
    uq: np.ndarray          # (ns, nq+1) at s-centers x q-faces
    p: np.ndarray           # (ns, nq), mean-zero gauge

    def copy(self):
        return FlowState(self.t, self.us.copy(), self.uq.copy(), self.p.copy())


def _nonuniform_d1_rows(nodes):
    """3-pt first-derivative weights (lo, di, up) at interior of `nodes`."""
    hm = nodes[1:-1] - nodes[:-2]
    hp = nodes[2:] - nodes[1:-1]
    lo = -hp / (hm * (hm + hp))
    di = (hp - hm) / (hm * hp)
    up = hm / (hp * (hm + hp))
    return lo, di, up


class _ImplicitQ:
    """CN-implicit normal-direction operator rows for u_s and u_q."""

    def __init__(self, grid: TensorGrid, eps):
        g = grid
        self.g = g
        self.eps = eps
        # u_s at q-centers with ghost mirror across both walls
        nodes = np.concatenate([[2 * g.q_faces[0] - g.q_centers[0]],
                                g.q_centers,
                                [2 * g.q_faces[-1] - g.q_centers[-1]]])
        self.s_adv = _nonuniform_d1_rows(nodes)
        # diffusion flux rows for u_s (centers)
        nq = g.nq
        lo = np.zeros(nq)
        di = np.zeros(nq)
        up = np.zeros(nq)
        for j in range(nq):
            vol = g.h_c[j] * g.dq[j]
            dm = (g.q_centers[j] - g.q_centers[j - 1]) if j > 0 else g.dq[0]
            dp = (g.q_centers[j + 1] - g.q_centers[j]) if j < nq - 1 else g.dq[-1]
            wm = g.h_f[j] / dm / vol
            wp = g.h_f[j + 1] / dp / vol
            if j > 0:
                lo[j] = wm
            if j < nq - 1:
                up[j] = wp
            di[j] = -(wm + wp)
        self.s_dif = (lo, di, up)
        self.s_dif_wall = (g.h_f[0] / g.dq[0] / (g.h_c[0] * g.dq[0]),
                           g.h_f[-1] / g.dq[-1] / (g.h_c[-1] * g.dq[-1]))
        self.s_curv = (g.hp_c / g.h_c) ** 2
        # u_q at interior faces (Dirichlet walls)
        self.q_adv = _nonuniform_d1_rows(g.q_faces)
        nqi = nq - 1
        loq = np.zeros(nqi)
        diq = np.zeros(nqi)
        upq = np.zeros(nqi)
        for jj in range(nqi):
            j = jj + 1          # face index
            vol = g.h_f[j] * g.dq_c[j - 1]
            wm = g.h_c[j - 1] / g.dq[j - 1] / vol
            wp = g.h_c[j] / g.dq[j] / vol
            loq[jj] = wm
            upq[jj] = wp
            diq[jj] = -(wm + wp)
        self.q_dif = (loq, diq, upq)
        self.q_curv = (g.hp_f[1:-1] / g.h_f[1:-1]) ** 2

    # --- u_s operator: A u = cq * du/dq - eps*(flux_lap u - curv u)
    def us_matrix(self, cq):
        """(lower, diag, upper, wall_rhs_factors); cq at u_s points (ns, nq)."""
        g = self.g
        ns, nq = cq.shape
        loA, diA, upA = (np.zeros((ns, nq)) for _ in range(3))
        la, da, ua = self.s_adv
        lo, di, up = self.s_dif
        wall0, wall1 = self.s_dif_wall
        loA[:, 1:] = cq[:, 1:] * la[1:] - self.eps * lo[1:]
        upA[:, :-1] = cq[:, :-1] * ua[:-1] - self.eps * up[:-1]
        diA = cq * da[None, :] - self.eps * (di[None, :] - self.s_curv[None, :])
        # ghost elimination: u_gh = 2*data - u_0 (and top)
        gl0 = cq[:, 0] * la[0] - self.eps * wall0      # coefficient of u_gh at j=0
        gl1 = cq[:, -1] * ua[-1] - self.eps * wall1
        diA[:, 0] -= gl0
        diA[:, -1] -= gl1
        return loA, diA, upA, (2.0 * gl0, 2.0 * gl1)

    def us_apply(self, u, cq, data0, data1):
        loA, diA, upA, (g0, g1) = self.us_matrix(cq)
        out = diA * u
        out[:, 1:] += loA[:, 1:] * u[:, :-1]
        out[:, :-1] += upA[:, :-1] * u[:, 1:]
        out[:, 0] += g0 * data0
        out[:, -1] += g1 * data1
        return out

    # --- u_q operator on interior faces
    def uq_matrix(self, cq):
        ns, nqi = cq.shape
        loA, diA, upA = (np.zeros((ns, nqi)) for _ in range(3))
        la, da, ua = self.q_adv
        lo, di, up = self.q_dif
        loA[:, 1:] = cq[:, 1:] * la[1:] - self.eps * lo[1:]
        upA[:, :-1] = cq[:, :-1] * ua[:-1] - self.eps * up[:-1]
        diA = cq * da[None, :] - self.eps * (di[None, :] - self.q_curv[None, :])
        bnd0 = cq[:, 0] * la[0] - self.eps * lo[0]     # multiplies wall value
        bnd1 = cq[:, -1] * ua[-1] - self.eps * up[-1]
        return loA, diA, upA, (bnd0, bnd1)

    def uq_apply(self, u, cq, wall0, wall1):
        loA, diA, upA, (b0, b1) = self.uq_matrix(cq)
        out = diA * u
        out[:, 1:] += loA[:, 1:] * u[:, :-1]
        out[:, :-1] += upA[:, :-1] * u[:, 1:]
        out[:, 0] += b0 * wall0
        out[:, -1] += b1 * wall1
        return out


class NSESolver:
    """Incremental pressure-correction march for one scenario and viscosity."""

    def __init__(self, scenario: Scenario, eps, policy: GridPolicy = None,
                 dt_params=None):
        self.sc = scenario
        self.eps = float(eps)
        geo = scenario.geometry
        policy = policy or geo.mesh
        if geo.kind == "channel":
            self.grid = TensorGrid.channel(scenario.params["length"],
                                           scenario.params["height"],
                                           eps, scenario.alpha0, policy)
        else:
            self.grid = TensorGrid.annulus(scenario.params["r_in"],
                                           scenario.params["r_out"],
                                           eps, scenario.alpha0, policy,
                                           outflow=geo.gamma_minus)
        got = self.grid.layer_cells(eps, scenario.alpha0)
        if got < policy.min_layer_cells:
            raise ResolutionError(
                f"wall layer unresolved: {got} cells in [0, 4 eps/alpha0], "
                f"need >= {policy.min_layer_cells}")
        self.poisson = PoissonSolver(self.grid)
        self.imp = _ImplicitQ(self.grid, self.eps)
        self.dtp = {"cfl": 0.35, "dt_max": 2.5e-3, "dt": None, "theta": 0.5,
                    "n_out": 32, "scheme": "cnab2"}
        self.dtp.update(dt_params or {})
        self._build_data_functions()

    # ------------------------------------------------------------ data
    def _build_data_functions(self):
        sc = self.sc
        g = self.grid
        self.f_s = sc.fn(sc.forcing[0])
        self.f_q = sc.fn(sc.forcing[1])
        self.u0_s = sc.fn(sc.u0[0])
        self.u0_q = sc.fn(sc.u0[1])
        al_s, al_q = sc.fn(sc.alpha[0], (S, TSYM)), sc.fn(sc.alpha[1], (S, TSYM))
        be_s, be_q = sc.fn(sc.beta[0], (S, TSYM)), sc.fn(sc.beta[1], (S, TSYM))
        if g.gamma_minus_end == 0:
            self.wall_lo = (al_s, al_q)
            self.wall_hi = (be_s, be_q)
        else:
            self.wall_lo = (be_s, be_q)
            self.wall_hi = (al_s, al_q)

    def initial_state(self):
        g = self.grid
        Sf, Qc = np.meshgrid(g.s_faces, g.q_centers, indexing="ij")
        Sc, Qf = np.meshgrid(g.s_centers, g.q_faces, indexing="ij")
        us = self.u0_s(Sf, Qc, 0.0)
        uq = self.u0_q(Sc, Qf, 0.0)
        return FlowState(0.0, us, uq, np.zeros((g.ns, g.nq)))

    def choose_dt(self):
        if self.dtp["dt"]:
            return float(self.dtp["dt"])
        g = self.grid
        ts = np.linspace(0.0, self.sc.T, 17)
        Sf, Qc = np.meshgrid(g.s_faces, g.q_centers, indexing="ij")
        umax = max(float(np.max(np.abs(self.u0_s(Sf, Qc, t)))) for t in ts) + 1e-12
        ds_phys = float(np.min(g.h_c)) * g.ds
        dt_adv = self.dtp["cfl"] * ds_phys / (1.5 * umax)
        dt_vs = 0.4 * ds_phys**2 / max(self.eps, 1e-12)
        return min(self.dtp["dt_max"], dt_adv, dt_vs)

    # -------------------------------------------------------- explicit rhs
    def explicit_terms(self, st: FlowState):
        g = self.grid
        us, uq = st.us, st.uq
        ds = g.ds
        # interpolations
        uq_c = g.q_face_to_center(uq)                      # (ns, nq) at s-centers
        uq_at_us = 0.5 * (uq_c + np.roll(uq_c, 1, axis=0))  # s-face
        us_c = g.s_face_to_center(us)                       # s-centers, q-centers
        us_at_uq = g.q_center_to_face(us_c)                 # interior q-faces
        # --- u_s explicit: tangential advection + curvature + s-viscous
        dus_ds = (np.roll(us, -1, axis=0) - np.roll(us, 1, axis=0)) / (2 * ds)
        adv_s = us / g.h_c[None, :] * dus_ds \
            + (g.hp_c / g.h_c)[None, :] * us * uq_at_us
        d2us = (np.roll(us, -1, axis=0) - 2 * us + np.roll(us, 1, axis=0)) / ds**2
        duqc_ds = (uq_c - np.roll(uq_c, 1, axis=0)) / ds    # at s-faces
        visc_s = d2us / (g.h_c**2)[None, :] \
            + 2 * (g.hp_c / g.h_c**2)[None, :] * duqc_ds
        E_s = -adv_s + self.eps * visc_s
        # --- u_q explicit (interior faces)
        uqi = uq[:, 1:-1]
        duq_ds = (np.roll(uqi, -1, axis=0) - np.roll(uqi, 1, axis=0)) / (2 * ds)
        hf = g.h_f[1:-1]
        hpf = g.hp_f[1:-1]
        adv_q = us_at_uq / hf[None, :] * duq_ds \
            - (hpf / hf)[None, :] * us_at_uq**2
        d2uq = (np.roll(uqi, -1, axis=0) - 2 * uqi + np.roll(uqi, 1, axis=0)) / ds**2
        dus_dsc = (np.roll(us, -1, axis=0) - us) / ds       # d(us)/ds at s-centers
        dusf_ds = g.q_center_to_face(dus_dsc)
        visc_q = d2uq / (hf**2)[None, :] - 2 * (hpf / hf**2)[None, :] * dusf_ds
        E_q = -adv_q + self.eps * visc_q
        return E_s, E_q

    def _wall_values(self, t):
        g = self.grid
        lo_s = self.wall_lo[0](g.s_faces, t)
        lo_q = self.wall_lo[1](g.s_centers, t)
        hi_s = self.wall_hi[0](g.s_faces, t)
        hi_q = self.wall_hi[1](g.s_centers, t)
        return (np.broadcast_to(lo_s, (g.ns,)).copy(),
                np.broadcast_to(lo_q, (g.ns,)).copy(),
                np.broadcast_to(hi_s, (g.ns,)).copy(),
                np.broadcast_to(hi_q, (g.ns,)).copy())

    # ------------------------------------------------------------- march
    def run(self, n_out=None, collect=None, check_div=True):
        sc = self.sc
        g = self.grid
        n_out = n_out or self.dtp["n_out"]
        dt0 = self.choose_dt()
        per = max(1, int(math.ceil(sc.T / (n_out * dt0))))
        nsteps = per * n_out
        dt = sc.T / nsteps
        st = self.initial_state()
        out_times = [0.0]
        states = [st.copy()]
        E_prev = None
        Sf, Qc = np.meshgrid(g.s_faces, g.q_centers, indexing="ij")
        Sc, Qfi = np.meshgrid(g.s_centers, g.q_faces[1:-1], indexing="ij")
        cfl_limit = 0.95 * g.ds * float(np.min(g.h_c)) / dt
        theta = self.dtp["theta"]
        for k in range(nsteps):
            t0 = k * dt
            t1 = t0 + dt
            th = t0 + 0.5 * dt
            if float(np.max(np.abs(st.us))) > cfl_limit:
                raise CFLError(f"advective CFL violated at t={t0:.4f}")
            E_s, E_q = self.explicit_terms(st)
            if E_prev is None:
                Ex_s, Ex_q = E_s, E_q
            else:
                Ex_s = 1.5 * E_s - 0.5 * E_prev[0]
                Ex_q = 1.5 * E_q - 0.5 * E_prev[1]
            E_prev = (E_s, E_q)
            lo_s0, lo_q0, hi_s0, hi_q0 = self._wall_values(t0)
            lo_s1, lo_q1, hi_s1, hi_q1 = self._wall_values(t1)
            # frozen normal-velocity coefficients at the half step
            uq_c = g.q_face_to_center(st.uq)
            cq_us = 0.5 * (uq_c + np.roll(uq_c, 1, axis=0))
            cq_uq = st.uq[:, 1:-1]
            # --- u_s update
            rhs = (st.us - (1 - theta) * dt * self.imp.us_apply(
                st.us, cq_us, lo_s0, hi_s0)
                + dt * (Ex_s + self.f_s(Sf, Qc, th) - g.grad_s(st.p)))
            loA, diA, upA, (g0, g1) = self.imp.us_matrix(cq_us)
            loA *= theta * dt
            upA *= theta * dt
            diA = 1.0 + theta * dt * diA
            rhs[:, 0] -= theta * dt * g0 * lo_s1
            rhs[:, -1] -= theta * dt * g1 * hi_s1
            us_star = thomas_batch(loA, diA, upA, rhs)
            # --- u_q update (interior faces)
            gq_p = g.grad_q(st.p)
            rhs = (st.uq[:, 1:-1] - (1 - theta) * dt * self.imp.uq_apply(
                st.uq[:, 1:-1], cq_uq, st.uq[:, 0], st.uq[:, -1])
                + dt * (Ex_q + self.f_q(Sc, Qfi, th) - gq_p))
            loA, diA, upA, (b0, b1) = self.imp.uq_matrix(cq_uq)
            loA *= theta * dt
            upA *= theta * dt
            diA = 1.0 + theta * dt * diA
            rhs[:, 0] -= theta * dt * b0 * lo_q1
            rhs[:, -1] -= theta * dt * b1 * hi_q1
            uq_star = np.empty_like(st.uq)
            uq_star[:, 1:-1] = thomas_batch(loA, diA, upA, rhs)
            uq_star[:, 0] = lo_q1
            uq_star[:, -1] = hi_q1
            # --- projection
            rhs_p = g.divergence(us_star, uq_star) / dt
            phi = self.poisson.solve(rhs_p)
            us_new = us_star - dt * g.grad_s(phi)
            uq_new = uq_star.copy()
            uq_new[:, 1:-1] -= dt * g.grad_q(phi)
            p_new = st.p + phi
            p_new -= g.integrate_centers(p_new) / g.integrate_centers(
                np.ones_like(p_new))
            st = FlowState(t1, us_new, uq_new, p_new)
            if (k + 1) % per == 0:
                if check_div:
                    div = g.divergence(st.us, st.uq)
                    scale = max(1.0, float(np.max(np.abs(st.us))))
                    if float(np.max(np.abs(div))) > 1e-9 * scale / g.min_phys_cell():
                        raise RuntimeError("projection failed to reach tolerance")
                states.append(st.copy())
                out_times.append(t1)
                if collect:
                    collect(st)
        return out_times, states


def solve_nse(scenario, eps, policy=None, dt_params=None, n_out=32):
    """Incremental-projection Navier-Stokes solve; states at output times."""
    solver = NSESolver(scenario, eps, policy, dt_params)
    return solver.run(n_out=n_out)


# -------------------------------------------------------- Stokes lift


def solve_stokes_lift(scenario, policy=None, tol=1e-9, max_time=6.0):
    """Pseudo-time march of the Stokes problem to steady state.

    Validation mode: confirms the scenario's analytic lift is admissible
    (matching traces); for the annulus the analytic lift is itself an exact
    Stokes solution and the discrete solution converges to it in the grid.
    """
    sc = scenario
    flux = sc.net_flux()
    if abs(flux) > 1e-8:
        raise CompatibilityError(f"incompatible net flux {flux:.3e}")
    solver = NSESolver(sc, 1.0, policy,
                       {"dt_max": 2e-2, "cfl": 1e9, "dt": 2e-2})
    g = solver.grid

    # freeze boundary data at t = 0 and disable advection/forcing
    def zerof(*a):
        return np.zeros(np.broadcast(*a).shape)

    solver.f_s = zerof
    solver.f_q = zerof
    wl = solver._wall_values(0.0)
    solver._wall_values = lambda t, _w=wl: _w
    solver.explicit_terms = lambda st: _stokes_explicit(solver, st)
    st = solver.initial_state()
    st.us *= 0.0
    st.uq *= 0.0
    st.uq[:, 0] = wl[1]
    st.uq[:, -1] = wl[3]
    # march in chunks until the update stalls
    n_chunk = 40
    dt = 2e-2
    prev = None
    for _ in range(int(max_time / (n_chunk * dt))):
        _, states = _stokes_chunk(solver, st, n_chunk, dt)
        st = states[-1]
        cur = st.us.copy()
        if prev is not None and                 float(np.max(np.abs(cur - prev))) < tol * n_chunk * dt:
            break
        prev = cur
    return st, g


def _stokes_explicit(solver, st):
    g = solver.grid
    us, uq = st.us, st.uq
    ds = g.ds
    uq_c = g.q_face_to_center(uq)
    us_c = g.s_face_to_center(us)
    d2us = (np.roll(us, -1, axis=0) - 2 * us + np.roll(us, 1, axis=0)) / ds**2
    duqc_ds = (uq_c - np.roll(uq_c, 1, axis=0)) / ds
    E_s = (d2us / (g.h_c**2)[None, :]
           + 2 * (g.hp_c / g.h_c**2)[None, :] * duqc_ds)
    uqi = uq[:, 1:-1]
    hf = g.h_f[1:-1]
    hpf = g.hp_f[1:-1]
    d2uq = (np.roll(uqi, -1, axis=0) - 2 * uqi + np.roll(uqi, 1, axis=0)) / ds**2
    dusf_ds = (np.roll(us_c, -1, axis=0) - us_c) / ds
    dusf_ds = g.q_center_to_face(dusf_ds)
    E_q = d2uq / (hf**2)[None, :] - 2 * (hpf / hf**2)[None, :] * dusf_ds
    return E_s, E_q


def _stokes_chunk(solver, st0, nsteps, dt):
    """Short fixed-dt march reusing the CN machinery, zero advection."""
    g = solver.grid
    st = st0.copy()
    theta = 0.5
    wl = solver._wall_values(0.0)
    assert nsteps > 0
    zero_cq_us = np.zeros_like(st.us)
    zero_cq_uq = np.zeros_like(st.uq[:, 1:-1])
    out = [st.copy()]
    for _ in range(nsteps):
        E_s, E_q = solver.explicit_terms(st)
        rhs = (st.us - (1 - theta) * dt * solver.imp.us_apply(
            st.us, zero_cq_us, wl[0], wl[2]) + dt * (E_s - g.grad_s(st.p)))
        loA, diA, upA, (g0, g1) = solver.imp.us_matrix(zero_cq_us)
        loA *= theta * dt
        upA *= theta * dt
        diA = 1.0 + theta * dt * diA
        rhs[:, 0] -= theta * dt * g0 * wl[0]
        rhs[:, -1] -= theta * dt * g1 * wl[2]
        us_star = thomas_batch(loA, diA, upA, rhs)
        rhs = (st.uq[:, 1:-1] - (1 - theta) * dt * solver.imp.uq_apply(
            st.uq[:, 1:-1], zero_cq_uq, st.uq[:, 0], st.uq[:, -1])
            + dt * (E_q - g.grad_q(st.p)))
        loA, diA, upA, (b0, b1) = solver.imp.uq_matrix(zero_cq_uq)
        loA *= theta * dt
        upA *= theta * dt
        diA = 1.0 + theta * dt * diA
        rhs[:, 0] -= theta * dt * b0 * wl[1]
        rhs[:, -1] -= theta * dt * b1 * wl[3]
        uq_star = st.uq.copy()
        uq_star[:, 1:-1] = thomas_batch(loA, diA, upA, rhs)
        phi = solver.poisson.solve(g.divergence(us_star, uq_star) / dt)
        st = FlowState(st.t + dt,
                       us_star - dt * g.grad_s(phi),
                       uq_star, st.p + phi)
        st.uq[:, 1:-1] -= dt * g.grad_q(phi)
    out.append(st.copy())
    return None, out


def manufactured_scenario(kind, exact_us, exact_uq, exact_p, eps, T=0.2,
                          policy=None, delta_frac=0.5, params=None):
    """Scenario carrying a manufactured exact solution (verification mode).

    Boundary data are the traces of the exact field; the forcing makes it an
    exact solution of the viscous equations.  Compatibility gates do not
    apply (verification fields need not satisfy inflow/outflow signs).
    """
    params = dict(params or {})
    if kind == "channel":
        L = params.get("length", 1.0)
        H = params.get("height", 1.0)
        geo = build_channel_geometry(L, H, 1, delta=delta_frac * H,
                                     policy=policy)
        h_expr = sp.Integer(1)
        q_lo, q_hi = 0.0, H
        base = {"length": L, "height": H,
                "alpha_n_sign": -1.0, "beta_n_sign": 1.0,
                "h_gamma_minus": 1.0, "h_gamma_plus": 1.0}
    else:
        r_in = params.get("r_in", 1.0)
        r_out = params.get("r_out", 2.0)
        geo = build_annulus_geometry(r_in, r_out, "outer",
                                     delta=delta_frac * (r_out - r_in),
                                     policy=policy)
        h_expr = Q
        q_lo, q_hi = r_in, r_out
        base = {"r_in": r_in, "r_out": r_out,
                "alpha_n_sign": 1.0, "beta_n_sign": -1.0,
                "h_gamma_minus": r_out, "h_gamma_plus": r_in}
    div = sp.simplify((sp.diff(exact_us, S)
                       + sp.diff(h_expr * exact_uq, Q)) / h_expr)
    if div != 0:
        raise ValueError(f"manufactured field is not divergence-free: {div}")
    fs, fq = mms_forcing((exact_us, exact_uq), exact_p, eps, h_expr)
    if kind == "channel":
        alpha = (exact_us.subs(Q, q_lo), exact_uq.subs(Q, q_lo))
        beta = (exact_us.subs(Q, q_hi), exact_uq.subs(Q, q_hi))
    else:
        alpha = (exact_us.subs(Q, q_hi), exact_uq.subs(Q, q_hi))
        beta = (exact_us.subs(Q, q_lo), exact_uq.subs(Q, q_lo))
    base.update(params)
    return Scenario(
        name=f"mms-{kind}", geometry=geo, h_expr=h_expr,
        U=(exact_us, exact_uq), v0=(sp.Integer(0), sp.Integer(0)),
        p0=exact_p, forcing=(fs, fq), alpha=alpha, beta=beta,
        alpha3_chart=sp.Integer(1), alpha0=params.get("alpha0", 1.0),
        T_requested=float(T), T=float(T),
        trace_v0_chart=sp.Integer(0), params=base)


def mms_error(kind, eps, policy, dt=None, T=0.1, n_out=4, time_dep=True):
    """Max-norm error of the NSE march against a manufactured solution."""
    wob = sp.sin(TSYM) if time_dep else sp.Integer(0)
    if kind == "channel":
        psi = sp.sin(TWO_PI * S) * (1 - sp.cos(TWO_PI * Q)) * (1 + wob / 2) \
            / (4 * sp.pi)
        us = sp.diff(psi, Q)
        uq = -sp.diff(psi, S)
        p = sp.cos(TWO_PI * S) * sp.sin(sp.pi * Q) / 4
    else:
        psi = sp.sin(S) * (1 - sp.cos(TWO_PI * (Q - 1))) * (1 + wob / 2) / 8
        us = -sp.diff(psi, Q)
        uq = sp.diff(psi, S) / Q
        p = sp.cos(S) * sp.sin(sp.pi * Q) / 4
    sc = manufactured_scenario(kind, us, uq, p, eps, T=T)
    dtp = {"dt": dt} if dt else None
    solver = NSESolver(sc, eps, policy, dtp)
    times, states = solver.run(n_out=n_out)
    g = solver.grid
    Sf, Qc = np.meshgrid(g.s_faces, g.q_centers, indexing="ij")
    Sc, Qf = np.meshgrid(g.s_centers, g.q_faces, indexing="ij")
    fs = sc.fn(us)
    fq = sc.fn(uq)
    err = 0.0
    for t, st in zip(times[1:], states[1:]):
        err = max(err, float(np.max(np.abs(st.us - fs(Sf, Qc, t)))),
                  float(np.max(np.abs(st.uq - fq(Sc, Qf, t)))))
    return err, g
