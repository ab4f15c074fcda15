"""Boundary-normal chart geometry for the 2D channel and annulus domains.

A chart maps a tangential parameter xi1 to the outflow boundary Gamma_-;
the collar map  Phibar(xi) = Phi(xi1) - xi3 * n(xi1)  extends it inward a
distance xi3 along the outward unit normal n, so xi3 is Euclidean distance
to Gamma_-.  With e1 = d Phibar/d xi1 and e3 = -n the metric is
block-diagonal, E13 = 0 and E33 = 1; V is its determinant (working
definition, see the repository notes on the determinant convention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import sympy as sp

from .grids import GridPolicy
from .layer_algebra import XI1, XI3, EvalContext
from .profiles import StepDown

TANGENTIAL_INDICES = (1,)   # d = 2; the paper's {1,2} collapses to {1}
NORMAL_INDEX = 3


@dataclass
class Chart:
    """One boundary-normal chart of Gamma_-."""

    chart_id: int
    phi: tuple            # sympy exprs (x(xi1), y(xi1)) on Gamma_-
    normal: tuple         # outward unit normal (nx(xi1), ny(xi1))
    interval: tuple       # xi1 -> (lo, hi), the parameter domain
    periodic: bool
    period: float | None = None   # xi1-period of the underlying boundary

    def __post_init__(self):
        self.phibar = tuple(p - XI3 * n for p, n in zip(self.phi, self.normal))
        nn = sp.simplify(self.normal[0] ** 2 + self.normal[1] ** 2)
        if sp.simplify(nn - 1) != 0:
            raise ValueError("chart normal is not unit length")
        self._phibar_fn = sp.lambdify((XI1, XI3), self.phibar, modules="numpy")

    def to_physical(self, xi1, xi3):
        x, y = self._phibar_fn(np.asarray(xi1, float), np.asarray(xi3, float))
        return np.broadcast_arrays(x, y)


@dataclass
class MetricData:
    """Covariant basis, metric, inverse, determinant quantity and symbols."""

    e1: tuple
    e3: tuple
    E11: sp.Expr
    E11_inv: sp.Expr
    V: sp.Expr
    sqrtV: sp.Expr
    christoffel: dict     # (i, j, k) -> expr for Gamma^i_{jk}; missing = 0

    @staticmethod
    def from_chart(chart: Chart, sqrtv_expr):
        e1 = tuple(sp.diff(c, XI1) for c in chart.phibar)
        e3 = tuple(-n for n in chart.normal)
        E11 = sp.simplify(e1[0] ** 2 + e1[1] ** 2)
        ortho = sp.simplify(e1[0] * e3[0] + e1[1] * e3[1])
        if ortho != 0:
            raise ValueError("basis not orthogonal: E13 != 0")
        sqrtv = sp.sympify(sqrtv_expr)
        if sp.simplify(sqrtv**2 - E11) != 0:
            raise ValueError("supplied sqrt(V) does not square to det(E)")
        dE1 = sp.diff(E11, XI1)
        dE3 = sp.diff(E11, XI3)
        chris = {
            (1, 1, 1): sp.cancel(dE1 / (2 * E11)),
            (1, 1, 3): sp.cancel(dE3 / (2 * E11)),
            (1, 3, 1): sp.cancel(dE3 / (2 * E11)),
            (3, 1, 1): sp.cancel(-dE3 / 2),
        }
        chris = {k: v for k, v in chris.items() if v != 0}
        return MetricData(e1, e3, E11, sp.cancel(1 / E11), E11, sqrtv, chris)

    def gamma(self, i, j, k):
        return self.christoffel.get((i, j, k), sp.Integer(0))


@dataclass
class Geometry:
    """Atlas, collar data, partition of unity and evaluation context."""

    kind: str
    atlas: list
    metric: list
    delta: float
    eta: list                  # sympy expr in XI1 per chart
    ctx: EvalContext
    gamma_plus: str            # label of the inflow boundary
    gamma_minus: str
    dist_walls: float
    mesh: GridPolicy = field(default_factory=GridPolicy)
    params: dict = field(default_factory=dict)

    # -- cutoff profile ------------------------------------------------
    def rho_profile(self):
        return self.ctx.impls["rho"]

    # -- coordinate transforms ------------------------------------------
    def to_physical(self, chart_id, xi):
        xi1, xi3 = xi
        return self.atlas[chart_id].to_physical(xi1, xi3)

    def to_curvilinear(self, point):
        """(chart_id, (xi1, xi3)) for a collar point, else None."""
        x, y = point
        if self.kind == "channel":
            L = self.params["length"]
            xi3 = float(y)
            if xi3 < -1e-12 or xi3 > self.delta + 1e-12:
                return None
            xw = float(x) % L
            best = None
            for ch in self.atlas:
                lo, hi = ch.interval
                for cand in (xw, xw - L, xw + L):
                    if lo - 1e-12 <= cand <= hi + 1e-12:
                        depth = min(cand - lo, hi - cand)
                        if best is None or depth > best[0]:
                            best = (depth, ch.chart_id, cand)
            if best is None:
                return None
            return best[1], (best[2], xi3)
        r = math.hypot(float(x), float(y))
        theta = math.atan2(float(y), float(x)) % (2.0 * math.pi)
        if self.params["outflow_side"] == "outer":
            xi3 = self.params["r_out"] - r
        else:
            xi3 = r - self.params["r_in"]
        if xi3 < -1e-12 or xi3 > self.delta + 1e-12:
            return None
        return 0, (theta / (2.0 * math.pi), xi3)

    # -- invariant verification ------------------------------------------
    def verify(self, n_samples=1000):
        rng = np.random.default_rng(7)
        for ch, md in zip(self.atlas, self.metric):
            lo, hi = ch.interval
            xi1 = rng.uniform(lo, hi, n_samples)
            xi3 = rng.uniform(0.0, self.delta, n_samples)
            nfun = sp.lambdify((XI1,), ch.normal, modules="numpy")
            nx, ny = nfun(xi1)
            if np.max(np.abs(np.hypot(nx, ny) - 1.0)) > 1e-12:
                raise AssertionError("normal not unit length")
            E11 = self.ctx.lambdify(md.E11)(xi1, xi3, 0 * xi1)
            Einv = self.ctx.lambdify(md.E11_inv)(xi1, xi3, 0 * xi1)
            if np.max(np.abs(E11 * Einv - 1.0)) > 1e-10:
                raise AssertionError("metric inverse identity failed")
            V = self.ctx.lambdify(md.V)(xi1, xi3, 0 * xi1)
            if np.min(V) <= 0:
                raise AssertionError("V must be positive on the collar")
            # injectivity of the boundary map (coarse pairwise check)
            xs, ys = ch.to_physical(np.linspace(lo, hi, 64, endpoint=False), 0.0)
            pts = np.stack([xs, ys], axis=1)
            dd = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
            np.fill_diagonal(dd, np.inf)
            if dd.min() <= 0:
                raise AssertionError("chart map not injective")
        # partition of unity
        xi1 = np.linspace(0.0, self._boundary_period(), 257)
        tot = np.zeros_like(xi1)
        for k, ch in enumerate(self.atlas):
            tot += self._eta_on_boundary(k, xi1)
        if np.max(np.abs(tot - 1.0)) > 1e-12:
            raise AssertionError("partition of unity does not sum to 1")
        self._verify_rho()
        return True

    def _boundary_period(self):
        return self.params["length"] if self.kind == "channel" else 1.0

    def _eta_on_boundary(self, k, x):
        """eta_k evaluated at the physical boundary parameter x."""
        ch = self.atlas[k]
        L = self._boundary_period()
        lo, hi = ch.interval
        xw = np.mod(x, L)
        val = np.zeros_like(xw)
        fn = self.ctx.lambdify(self.eta[k], (XI1,))
        for shift in (-L, 0.0, L):
            cand = xw + shift
            mask = (cand >= lo - 1e-12) & (cand <= hi + 1e-12)
            val = np.where(mask, fn(np.clip(cand, lo, hi)), val)
        return val

    def _verify_rho(self):
        rho = self.ctx.impls["rho"]
        d = self.delta
        x = np.linspace(0.0, d, 1001)
        r = rho(x)
        if np.max(np.abs(r[x <= 0.5 * d] - 1.0)) > 1e-14:
            raise AssertionError("rho must be 1 on [0, delta/2]")
        if np.max(np.abs(r[x >= 0.75 * d])) > 1e-14:
            raise AssertionError("rho must vanish on [3 delta/4, delta]")
        for k in (1, 2):
            dk = self.ctx.impls[f"rho_d{k}"](np.array([0.75 * d, d]))
            if np.max(np.abs(dk)) > 1e-12:
                raise AssertionError("rho derivatives must vanish at 3 delta/4")


# ---------------------------------------------------------------- cutoffs


def _register_profiles(ctx: EvalContext, delta, st_band=(0.06, 0.72)):
    """Register rho (collar cutoff) and stilde (plateau switch) numerics."""
    rho = StepDown(0.5 * delta, 0.75 * delta)
    st = StepDown(st_band[0] * delta, st_band[1] * delta)
    for base, prof in (("rho", rho), ("stilde", st)):
        ctx.register(base, prof)
        ctx.register(f"{base}m1", lambda x, p=prof: p(x) - 1.0)
        safe = lambda f: (lambda x, _f=f: np.where(
            np.asarray(x) > 0.0, _f(np.asarray(x)) / np.where(
                np.asarray(x) == 0.0, 1.0, np.asarray(x)), 0.0))
        ctx.register(f"{base}m1_ox", safe(lambda x, p=prof: p(x) - 1.0))
        for k in range(1, 5):
            dk = lambda x, p=prof, kk=k: p.deriv(x, kk)
            ctx.register(f"{base}_d{k}", dk)
            ctx.register(f"{base}_d{k}_ox", safe(dk))


def build_channel_geometry(length_x, height, n_charts=1,
                           delta=None, policy=None) -> Geometry:
    """Periodic channel; Gamma_- is the bottom wall, coordinates (x, y)."""
    if length_x <= 0 or height <= 0:
        raise ValueError("channel dimensions must be positive")
    if n_charts not in (1, 2):
        raise ValueError("n_charts must be 1 or 2")
    L = float(length_x)
    delta = 0.25 * height if delta is None else float(delta)
    if not 0 < delta < height:
        raise ValueError("collar width must lie in (0, dist(walls))")
    ctx = EvalContext(name=f"channel-{L}x{height}-{n_charts}")
    _register_profiles(ctx, delta)
    phi = (XI1, sp.Integer(0))
    nrm = (sp.Integer(0), sp.Integer(-1))
    if n_charts == 1:
        atlas = [Chart(0, phi, nrm, (0.0, L), True, L)]
        eta = [sp.Integer(1)]
    else:
        atlas = [Chart(0, phi, nrm, (-0.10 * L, 0.60 * L), True, L),
                 Chart(1, phi, nrm, (0.40 * L, 1.10 * L), True, L)]
        # eta0: 1 on [0, 0.45L], down over [0.45L, 0.55L], 0 on [0.55L, 0.90L],
        # back up over [0.90L, L]; C^2 across the periodic wrap.
        down = StepDown(0.45 * L, 0.55 * L)
        up = StepDown(0.90 * L, 1.00 * L)

        def eta0_impl(x, L=L, down=down, up=up):
            x = np.mod(np.asarray(x, dtype=float), L)
            return np.where(x >= 0.75 * L, 1.0 - up(x), down(x))

        def eta0_deriv(x, order, L=L, down=down, up=up):
            x = np.mod(np.asarray(x, dtype=float), L)
            return np.where(x >= 0.75 * L, -up.deriv(x, order),
                            down.deriv(x, order))

        from .layer_algebra import atom
        for nm in ("eta0", "eta1"):
            atom(nm, nargs=1, derivs={1: f"{nm}_d1"})
            for k in (1, 2, 3):
                atom(f"{nm}_d{k}", nargs=1,
                     derivs={1: f"{nm}_d{k+1}"} if k < 3 else None)
        ctx.register("eta0", eta0_impl)
        ctx.register("eta1", lambda x: 1.0 - eta0_impl(x))
        for k in (1, 2, 3):
            ctx.register(f"eta0_d{k}", lambda x, kk=k: eta0_deriv(x, kk))
            ctx.register(f"eta1_d{k}", lambda x, kk=k: -eta0_deriv(x, kk))
        from .layer_algebra import _ATOM_CLASSES
        eta = [_ATOM_CLASSES["eta0"](XI1), _ATOM_CLASSES["eta1"](XI1)]
    metric = [MetricData.from_chart(ch, sp.Integer(1)) for ch in atlas]
    geo = Geometry("channel", atlas, metric, delta, eta, ctx,
                   gamma_plus="top", gamma_minus="bottom",
                   dist_walls=float(height),
                   mesh=policy or GridPolicy(),
                   params={"length": L, "height": float(height),
                           "n_charts": n_charts})
    geo.verify()
    return geo


def build_annulus_geometry(r_in, r_out, outflow_side="outer",
                           delta=None, policy=None) -> Geometry:
    """Annulus; Gamma_- is the circle with outward flow (alpha.n > 0)."""
    if not 0 < r_in < r_out:
        raise ValueError("need 0 < R_in < R_out")
    if outflow_side not in ("inner", "outer"):
        raise ValueError("outflow_side must be 'inner' or 'outer'")
    dist = r_out - r_in
    delta = 0.25 * dist if delta is None else float(delta)
    if not 0 < delta < dist:
        raise ValueError("collar width must lie in (0, R_out - R_in)")
    ctx = EvalContext(name=f"annulus-{r_in}-{r_out}-{outflow_side}")
    _register_profiles(ctx, delta)
    ang = 2 * sp.pi * XI1
    if outflow_side == "outer":
        R = sp.Float(r_out)
        phi = (R * sp.cos(ang), R * sp.sin(ang))
        nrm = (sp.cos(ang), sp.sin(ang))
        rad = R - XI3
    else:
        R = sp.Float(r_in)
        phi = (R * sp.cos(ang), R * sp.sin(ang))
        nrm = (-sp.cos(ang), -sp.sin(ang))
        rad = R + XI3
    chart = Chart(0, phi, nrm, (0.0, 1.0), True, 1.0)
    metric = [MetricData.from_chart(chart, 2 * sp.pi * rad)]
    geo = Geometry("annulus", [chart], metric, delta, [sp.Integer(1)], ctx,
                   gamma_plus="inner" if outflow_side == "outer" else "outer",
                   gamma_minus=outflow_side,
                   dist_walls=dist,
                   mesh=policy or GridPolicy(),
                   params={"r_in": float(r_in), "r_out": float(r_out),
                           "outflow_side": outflow_side})
    geo.verify()
    return geo
