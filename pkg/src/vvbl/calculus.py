"""Curvilinear differential operators on boundary-normal charts.

Two backends share the same component formulas:

- closed form: fields are sympy expressions in (xi1, xi3, t); derivatives are
  exact, so corrector identities can be tested without discretization noise;
- grid: fields are samples on a per-chart collar grid; derivatives use
  2nd-order stencils (non-uniform aware), one-sided at the walls.

Vector fields are stored contravariant (components along e1, e3); covariant
components are formed on demand through the metric, matching the curl
convention.  Index loops run over the parameterized tangential set so the
three-dimensional shape of the formulas is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import sympy as sp

from .geometry import MetricData, TANGENTIAL_INDICES, NORMAL_INDEX
from .layer_algebra import XI1, XI3, T

IDX = (*TANGENTIAL_INDICES, NORMAL_INDEX)
_COORD = {1: XI1, 3: XI3}


# ------------------------------------------------------------ closed form


@dataclass(frozen=True)
class ScalarField:
    chart_id: int
    expr: sp.Expr


@dataclass(frozen=True)
class VectorField:
    """Contravariant components keyed by index in IDX."""

    chart_id: int
    comps: dict

    def comp(self, i):
        return self.comps.get(i, sp.Integer(0))

    def covariant(self, md: MetricData):
        return {1: sp.expand(md.E11 * self.comp(1)), 3: self.comp(3)}


def _d(expr, i):
    return sp.diff(expr, _COORD[i])


def gradient(f: ScalarField, md: MetricData) -> VectorField:
    comps = {3: _d(f.expr, 3)}
    for i in TANGENTIAL_INDICES:
        acc = sp.Integer(0)
        for j in TANGENTIAL_INDICES:
            acc += _d(f.expr, j) * (md.E11_inv if (i, j) == (1, 1) else 0)
        comps[i] = acc
    return VectorField(f.chart_id, comps)


def divergence(F: VectorField, md: MetricData) -> ScalarField:
    acc = sp.Integer(0)
    for j in IDX:
        acc += _d(md.sqrtV * F.comp(j), j)
    return ScalarField(F.chart_id, sp.cancel(acc / md.sqrtV))


def directional_derivative(F: VectorField, G: VectorField, md: MetricData):
    """(full, normal_part, P_part): full = F^3 d3 G + P, P has no xi3-derivative of G."""
    if F.chart_id != G.chart_id:
        raise ValueError("fields live on different charts")
    full, normal, pterm = {}, {}, {}
    for i in IDX:
        tot = sp.Integer(0)
        for j in IDX:
            inner = _d(G.comp(i), j)
            for ell in IDX:
                inner += md.gamma(i, ell, j) * G.comp(ell)
            tot += F.comp(j) * inner
        nrm = F.comp(3) * _d(G.comp(i), 3)
        full[i] = sp.expand(tot)
        normal[i] = nrm
        pterm[i] = sp.expand(tot - nrm)
    cid = F.chart_id
    return (VectorField(cid, full), VectorField(cid, normal),
            VectorField(cid, pterm))


def _laplacian_terms(F: VectorField, md: MetricData, zeroth="standard"):
    """Bucketed terms of the vector Laplacian.

    zeroth='standard' uses the flat-space Ricci contraction
        dGamma^i_{hk}/dxi_j + Gamma^i_{lj} Gamma^l_{hk} - Gamma^l_{kj} Gamma^i_{hl}
    contracted with E^{jk}; zeroth='paper-variant' uses the printed
    F^h dGamma^i_{jk}/dxi_h form, kept for the logged cross-check.
    """
    Einv = {(1, 1): md.E11_inv, (3, 3): sp.Integer(1)}
    d33, S, Tm = {}, {}, {}
    for i in IDX:
        d33[i] = _d(_d(F.comp(i), 3), 3)
        s_acc = sp.Integer(0)
        t_acc = sp.Integer(0)
        for (j, k), w in Einv.items():
            if (j, k) == (1, 1):
                t_acc += w * _d(_d(F.comp(i), 1), 1)
            # -Gamma^h_{jk} d_h F^i
            for h in IDX:
                g = md.gamma(h, j, k)
                if g == 0:
                    continue
                term = -w * g * _d(F.comp(i), h)
                if h == 3:
                    s_acc += term
                else:
                    t_acc += term
            # 2 Gamma^i_{hj} d_k F^h
            for h in IDX:
                g = md.gamma(i, h, j)
                if g == 0:
                    continue
                term = 2 * w * g * _d(F.comp(h), k)
                if k == 3:
                    s_acc += term
                else:
                    t_acc += term
            # zeroth order
            for h in IDX:
                if zeroth == "standard":
                    coef = _d(md.gamma(i, h, k), j)
                    for ell in IDX:
                        coef += (md.gamma(i, ell, j) * md.gamma(ell, h, k)
                                 - md.gamma(ell, k, j) * md.gamma(i, h, ell))
                    t_acc += w * coef * F.comp(h)
                else:
                    t_acc += w * _d(md.gamma(i, j, k), h) * F.comp(h)
        S[i] = sp.expand(s_acc)
        Tm[i] = sp.expand(t_acc)
    return d33, S, Tm


def laplacian(F: VectorField, md: MetricData, zeroth="standard"):
    """(full, d33_part, S_part, T_part); d33 + S + T = full identically."""
    d33, S, Tm = _laplacian_terms(F, md, zeroth)
    full = {i: sp.expand(d33[i] + S[i] + Tm[i]) for i in IDX}
    cid = F.chart_id
    return (VectorField(cid, full), VectorField(cid, d33),
            VectorField(cid, S), VectorField(cid, Tm))


def curl_vector(F: VectorField, md: MetricData) -> ScalarField:
    """Out-of-plane curl component (1/sqrtV)(d1 F_3 - d3 F_1), F covariant."""
    cov = F.covariant(md)
    return ScalarField(F.chart_id,
                       sp.cancel((_d(cov[3], 1) - _d(cov[1], 3)) / md.sqrtV))


def curl_potential(psi: ScalarField, md: MetricData) -> VectorField:
    """Velocity of the out-of-plane covariant potential psi (stream form)."""
    return VectorField(psi.chart_id, {
        1: -sp.cancel(_d(psi.expr, 3) / md.sqrtV),
        3: sp.cancel(_d(psi.expr, 1) / md.sqrtV),
    })


def curl3_flat(comps, coords):
    """Cartesian cyclic curl on a flat 3D chart (test support)."""
    x1, x2, x3 = coords
    F1, F2, F3 = comps
    return (sp.diff(F3, x2) - sp.diff(F2, x3),
            sp.diff(F1, x3) - sp.diff(F3, x1),
            sp.diff(F2, x1) - sp.diff(F1, x2))


def vector_laplacian_via_cartesian(F: VectorField, chart, md: MetricData):
    """Coordinate-free oracle: push to Cartesian, Laplace, pull back."""
    J = sp.Matrix([[sp.diff(c, XI1) for c in chart.phibar],
                   [sp.diff(c, XI3) for c in chart.phibar]]).T
    vec = sp.Matrix([F.comp(1), F.comp(3)])
    cart = J * vec              # (u_x, u_y) as functions of xi
    Jinv = J.inv()

    def cart_grad(f):
        gxi = sp.Matrix([sp.diff(f, XI1), sp.diff(f, XI3)])
        return Jinv.T * gxi     # (d/dx, d/dy)

    lap = []
    for f in cart:
        gx, gy = cart_grad(f)
        lap.append(cart_grad(gx)[0] + cart_grad(gy)[1])
    back = Jinv * sp.Matrix(lap)
    return VectorField(F.chart_id, {1: back[0], 3: back[1]})


# ----------------------------------------------------------------- grid


def grid_diff(vals, coords, axis, order=1, periodic=False, period=None):
    """2nd-order first/second derivative along axis on a non-uniform grid."""
    vals = np.asarray(vals, dtype=float)
    x = np.asarray(coords, dtype=float)
    n = x.size
    if n < (4 if order == 1 else 5):
        raise ValueError("insufficient grid resolution for the stencil")
    vals = np.moveaxis(vals, axis, 0)
    out = np.empty_like(vals)
    if periodic:
        xp = np.concatenate([[x[0] - (period - (x[-1] - x[0]))], x,
                             [x[-1] + (period - (x[-1] - x[0]))]])
        vp = np.concatenate([vals[-1:], vals, vals[:1]], axis=0)
        hm = (xp[1:-1] - xp[:-2])[:, None] if vals.ndim > 1 else xp[1:-1] - xp[:-2]
        hp = (xp[2:] - xp[1:-1])[:, None] if vals.ndim > 1 else xp[2:] - xp[1:-1]
        vm, v0, vpl = vp[:-2], vp[1:-1], vp[2:]
        if order == 1:
            out = (-hp / (hm * (hm + hp)) * vm
                   + (hp - hm) / (hm * hp) * v0
                   + hm / (hp * (hm + hp)) * vpl)
        else:
            out = (2.0 / (hm * (hm + hp)) * vm
                   - 2.0 / (hm * hp) * v0
                   + 2.0 / (hp * (hm + hp)) * vpl)
        return np.moveaxis(out, 0, axis)
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    sh = (-1,) + (1,) * (vals.ndim - 1)
    hm = hm.reshape(sh)
    hp = hp.reshape(sh)
    vm, v0, vpl = vals[:-2], vals[1:-1], vals[2:]
    if order == 1:
        out[1:-1] = (-hp / (hm * (hm + hp)) * vm
                     + (hp - hm) / (hm * hp) * v0
                     + hm / (hp * (hm + hp)) * vpl)
        for edge, sl in ((0, (0, 1, 2)), (n - 1, (n - 1, n - 2, n - 3))):
            x0, x1_, x2_ = x[sl[0]], x[sl[1]], x[sl[2]]
            c0 = (2 * x0 - x1_ - x2_) / ((x0 - x1_) * (x0 - x2_))
            c1 = (x0 - x2_) / ((x1_ - x0) * (x1_ - x2_))
            c2 = (x0 - x1_) / ((x2_ - x0) * (x2_ - x1_))
            out[edge] = c0 * vals[sl[0]] + c1 * vals[sl[1]] + c2 * vals[sl[2]]
    else:
        out[1:-1] = (2.0 / (hm * (hm + hp)) * vm
                     - 2.0 / (hm * hp) * v0
                     + 2.0 / (hp * (hm + hp)) * vpl)
        out[0] = out[1]
        out[-1] = out[-2]
    return np.moveaxis(out, 0, axis)


@dataclass
class ChartGrid:
    """Tensor sampling of a chart collar: xi1 (periodic) x xi3."""

    xi1: np.ndarray
    xi3: np.ndarray
    periodic: bool = True
    period: float = 1.0

    def mesh(self):
        return np.meshgrid(self.xi1, self.xi3, indexing="ij")

    def d1(self, vals, order=1):
        return grid_diff(vals, self.xi1, 0, order, self.periodic, self.period)

    def d3(self, vals, order=1):
        return grid_diff(vals, self.xi3, 1, order)


class GridOps:
    """Grid-backend curvilinear operators with sampled metric coefficients."""

    def __init__(self, geometry, chart_id, grid: ChartGrid):
        self.geo = geometry
        self.cid = chart_id
        self.grid = grid
        md = geometry.metric[chart_id]
        X1, X3 = grid.mesh()
        ctx = geometry.ctx
        tz = np.zeros_like(X1)
        self.E11 = ctx.lambdify(md.E11)(X1, X3, tz)
        self.E11_inv = ctx.lambdify(md.E11_inv)(X1, X3, tz)
        self.sqrtV = ctx.lambdify(md.sqrtV)(X1, X3, tz)
        self.gam = {key: ctx.lambdify(expr)(X1, X3, tz)
                    for key, expr in md.christoffel.items()}
        self.md = md

    def gamma(self, i, j, k):
        return self.gam.get((i, j, k), 0.0)

    def gradient(self, f):
        return {1: self.E11_inv * self.grid.d1(f), 3: self.grid.d3(f)}

    def divergence(self, F):
        return (self.grid.d1(self.sqrtV * F[1])
                + self.grid.d3(self.sqrtV * F[3])) / self.sqrtV

    def directional(self, F, G):
        out = {}
        for i in IDX:
            tot = np.zeros_like(G[1])
            for j in IDX:
                inner = self.grid.d1(G[i]) if j == 1 else self.grid.d3(G[i])
                for ell in IDX:
                    inner = inner + self.gamma(i, ell, j) * G[ell]
                tot = tot + F[j] * inner
            out[i] = tot
        return out

    def laplacian(self, F):
        out = {}
        d1F = {h: self.grid.d1(F[h]) for h in IDX}
        d3F = {h: self.grid.d3(F[h]) for h in IDX}
        for i in IDX:
            acc = self.grid.d3(F[i], order=2) + self.E11_inv * self.grid.d1(F[i], order=2)
            for (j, k, w) in ((1, 1, self.E11_inv), (3, 3, 1.0)):
                for h in IDX:
                    g = self.gamma(h, j, k)
                    if np.ndim(g) or g:
                        acc = acc - w * g * (d1F[i] if h == 1 else d3F[i])
                for h in IDX:
                    g = self.gamma(i, h, j)
                    if np.ndim(g) or g:
                        acc = acc + 2.0 * w * g * (d1F[h] if k == 1 else d3F[h])
            acc = acc + self._zeroth(F, i)
            out[i] = acc
        return out

    def _zeroth(self, F, i):
        ctx = self.geo.ctx
        X1, X3 = self.grid.mesh()
        tz = np.zeros_like(X1)
        total = np.zeros_like(X1)
        Einv = {(1, 1): self.md.E11_inv, (3, 3): sp.Integer(1)}
        for (j, k), w in Einv.items():
            for h in IDX:
                coef = sp.diff(self.md.gamma(i, h, k), _COORD[j])
                for ell in IDX:
                    coef += (self.md.gamma(i, ell, j) * self.md.gamma(ell, h, k)
                             - self.md.gamma(ell, k, j) * self.md.gamma(i, h, ell))
                coef = sp.expand(w * coef)
                if coef != 0:
                    total = total + ctx.lambdify(coef)(X1, X3, tz) * F[h]
        return total
