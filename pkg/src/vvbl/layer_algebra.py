"""Exact algebra for boundary-layer term families.

A layer term is  amp(xi1, xi3, t) * eps^s * xi3^t * exp(-r * a3(xi1) * xi3 / eps)
with integer exponents s (any sign), t >= 0, r >= 0.  Amplitudes are sympy
expressions over the chart coordinates; non-polynomial profile functions
(collar cutoff, partition weights, numeric traces) enter as opaque function
atoms with registered derivative chains and numpy implementations.

An expansion is a merged list of such terms sharing one decay-rate field.
Terms with r = 0 form the smooth residual bucket; its eps-order is s.

Conventions:
- the *order* of a term is s + t for r >= 1 (membership in the class of
  terms bounded by eps^(s+t) in sup norm) and s for r = 0;
- terms whose amplitude carries a cutoff-derivative factor are candidates
  for the exponentially-small bucket; `apply_est_guard` exempts them from
  order bookkeeping once their sup over the collar passes a numeric guard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import sympy as sp
from sympy.core.function import AppliedUndef  # noqa: F401  (kept for callers)

XI1, XI3, T = sp.symbols("xi1 xi3 t", real=True)

EST_GUARD_SUP = 1e-14

# ------------------------------------------------------------------ atoms

_ATOM_CLASSES: dict[str, type] = {}

# name -> name of the companion atom representing f(x)/x (support away from 0)
OVER_XI3_PARTNER: dict[str, str] = {}
# atom names whose presence marks an exponentially-small candidate
EST_ATOM_NAMES: set[str] = set()


def atom(name, nargs, derivs=None, known=None):
    """Create (or fetch) a sympy function atom.

    derivs: dict argindex -> atom name of the derivative (1-based, as fdiff).
    known:  dict arg-tuple -> sympy value, auto-applied on construction.
    """
    if name in _ATOM_CLASSES:
        return _ATOM_CLASSES[name]
    derivs = dict(derivs or {})
    known = {tuple(sp.sympify(a) for a in k): sp.sympify(v)
             for k, v in (known or {}).items()}

    def fdiff(self, argindex=1):
        dname = derivs.get(argindex)
        if dname is None:
            raise NotImplementedError(
                f"no registered derivative of atom {name} in slot {argindex}")
        return _ATOM_CLASSES[dname](*self.args)

    @classmethod
    def _eval(cls, *args):
        key = tuple(args)
        if key in known:
            return known[key]
        return None

    cls = type(name, (sp.Function,), {"fdiff": fdiff, "eval": _eval, "nargs": nargs})
    _ATOM_CLASSES[name] = cls
    return cls


def profile_family(base, depth=4, base_at_zero=1):
    """Atoms for a cutoff profile: base, base_d1..d<depth>, basem1, *_ox.

    base(0) = base_at_zero and all derivatives vanish at 0 (flat start).
    basem1 = base - 1 and every derivative are exponentially-small markers
    with '<name>_ox' companions standing for the band-supported f(x)/x.
    """
    names = [base] + [f"{base}_d{k}" for k in range(1, depth + 1)]
    for k in range(depth, -1, -1):
        derivs = {1: names[k + 1]} if k < depth else None
        known = {(0,): base_at_zero if k == 0 else 0}
        atom(names[k], nargs=1, derivs=derivs, known=known)
    atom(f"{base}m1", nargs=1, derivs={1: names[1]}, known={(0,): 0})
    EST_ATOM_NAMES.add(f"{base}m1")
    for nm in [f"{base}m1"] + names[1:]:
        oxname = nm + "_ox"
        atom(oxname, nargs=1, known={(0,): 0})
        OVER_XI3_PARTNER[nm] = oxname
        EST_ATOM_NAMES.add(oxname)
        if nm != f"{base}m1":
            EST_ATOM_NAMES.add(nm)
    return _ATOM_CLASSES[base]


# Collar cutoff rho(xi3) and the plateau switch stilde(xi3).
profile_family("rho")
profile_family("stilde")


def registered_atoms(expr):
    """Applied registry atoms appearing in expr."""
    return {f for f in sp.sympify(expr).atoms(sp.Function)
            if f.func.__name__ in _ATOM_CLASSES}


def expr_atoms(expr):
    return {f.func.__name__ for f in registered_atoms(expr)}


def has_est_atom(expr):
    return bool(expr_atoms(expr) & EST_ATOM_NAMES)


class EvalContext:
    """Numeric implementations for function atoms plus a lambdify cache."""

    def __init__(self, impls=None, name=""):
        self.impls = dict(impls or {})
        self.name = name
        self._cache = {}

    def register(self, name, fn):
        self.impls[name] = fn
        self._cache.clear()

    def update(self, other):
        self.impls.update(other.impls if isinstance(other, EvalContext) else other)
        self._cache.clear()

    def lambdify(self, expr, args=(XI1, XI3, T)):
        key = (sp.srepr(expr), tuple(map(str, args)))
        fn = self._cache.get(key)
        if fn is None:
            missing = expr_atoms(expr) - set(self.impls)
            if missing:
                raise KeyError(f"no numeric impl for atoms {sorted(missing)}")
            raw = sp.lambdify(args, expr, modules=[self.impls, "numpy"])
            def fn(*vals, _raw=raw):
                out = _raw(*vals)
                return np.broadcast_to(out, np.broadcast(*vals).shape).astype(float) \
                    if np.ndim(out) == 0 else np.asarray(out, dtype=float)
            self._cache[key] = fn
        return fn


# ------------------------------------------------------------------ terms


@dataclass(frozen=True)
class LayerTerm:
    """amp * eps^s * xi3^t * exp(-r a3 xi3/eps); order_exempt marks guarded e.s.t."""

    amp: sp.Expr
    s: int
    t: int
    r: int
    order_exempt: bool = False

    def __post_init__(self):
        if self.t < 0 or self.r < 0:
            raise ValueError("xi3 power and decay multiplier must be nonnegative")
        if self.r == 0 and self.s + self.t < 0:
            raise ValueError("unbounded smooth term: r = 0 requires s + t >= 0")

    @property
    def order(self):
        return self.s + self.t if self.r >= 1 else self.s

    def est_candidate(self):
        return has_est_atom(self.amp)


class LayerExpansion:
    """Immutable merged sum of layer terms over one chart and decay field."""

    def __init__(self, alpha3, terms=(), merge=True):
        self.alpha3 = sp.sympify(alpha3)
        tl = [t for t in terms if t.amp != 0]
        self.terms = tuple(self._merge(tl) if merge else tl)

    @staticmethod
    def _merge(terms):
        groups = {}
        exempt = {}
        for tm in terms:
            key = (tm.s, tm.t, tm.r)
            groups[key] = groups.get(key, sp.Integer(0)) + tm.amp
            exempt[key] = exempt.get(key, True) and tm.order_exempt
        out = []
        for key in sorted(groups):
            amp = sp.expand(groups[key])
            if amp == 0:
                continue
            out.append(LayerTerm(amp, *key, order_exempt=exempt[key]))
        return out

    # -- constructors ------------------------------------------------
    def with_terms(self, terms, merge=True):
        return LayerExpansion(self.alpha3, terms, merge=merge)

    @staticmethod
    def zero(alpha3):
        return LayerExpansion(alpha3, ())

    # -- bookkeeping -------------------------------------------------
    def __len__(self):
        return len(self.terms)

    def is_zero(self):
        return not self.terms

    @property
    def order(self):
        counted = [t.order for t in self.terms if not t.order_exempt]
        return min(counted) if counted else math.inf

    def layer_part(self):
        return self.with_terms([t for t in self.terms if t.r >= 1], merge=False)

    def smooth_part(self):
        return self.with_terms([t for t in self.terms if t.r == 0], merge=False)

    def __add__(self, other):
        self._check_compat(other)
        return self.with_terms(list(self.terms) + list(other.terms))

    def __sub__(self, other):
        return self + other.scaled(-1)

    def scaled(self, factor, eps_shift=0):
        factor = sp.sympify(factor)
        return self.with_terms(
            [replace(t, amp=factor * t.amp, s=t.s + eps_shift) for t in self.terms])

    def _check_compat(self, other):
        if sp.simplify(self.alpha3 - other.alpha3) != 0:
            raise ValueError("mixed decay-rate fields without a common refinement")

    # -- calculus ----------------------------------------------------
    def diff_xi3(self):
        out = []
        for tm in self.terms:
            damp = sp.diff(tm.amp, XI3)
            if damp != 0:
                out.append(replace(tm, amp=damp))
            if tm.t > 0:
                out.append(replace(tm, amp=tm.t * tm.amp, t=tm.t - 1))
            if tm.r > 0:
                out.append(replace(tm, amp=-tm.r * self.alpha3 * tm.amp, s=tm.s - 1))
        return self.with_terms(out)

    def diff_xi1(self):
        da3 = sp.diff(self.alpha3, XI1)
        out = []
        for tm in self.terms:
            damp = sp.diff(tm.amp, XI1)
            if damp != 0:
                out.append(replace(tm, amp=damp))
            if tm.r > 0 and da3 != 0:
                out.append(replace(
                    tm, amp=-tm.r * da3 * tm.amp, s=tm.s - 1, t=tm.t + 1))
        return self.with_terms(out)

    def diff_t(self):
        out = []
        for tm in self.terms:
            damp = sp.diff(tm.amp, T)
            if damp != 0:
                out.append(replace(tm, amp=damp))
        return self.with_terms(out)

    def __mul__(self, other):
        if isinstance(other, LayerExpansion):
            self._check_compat(other)
            out = [LayerTerm(a.amp * b.amp, a.s + b.s, a.t + b.t, a.r + b.r,
                             order_exempt=a.order_exempt or b.order_exempt)
                   for a in self.terms for b in other.terms]
            return self.with_terms(out)
        return self.scaled(other)

    def shift_xi1(self, offset):
        """Reparameterize the tangential coordinate (chart translation)."""
        sub = {XI1: XI1 + offset}
        return LayerExpansion(
            self.alpha3.subs(sub),
            [replace(t, amp=t.amp.subs(sub)) for t in self.terms])

    # -- evaluation and norms ----------------------------------------
    def evaluate(self, eps, xi1, xi3, t, ctx):
        if eps <= 0:
            raise ValueError("eps must be positive")
        xi1 = np.asarray(xi1, dtype=float)
        xi3 = np.asarray(xi3, dtype=float)
        tt = np.asarray(t, dtype=float)
        xi1, xi3, tt = np.broadcast_arrays(xi1, xi3, tt)
        total = np.zeros(xi1.shape)
        a3 = ctx.lambdify(self.alpha3, (XI1,))(xi1) if self.alpha3.free_symbols \
            else float(self.alpha3) * np.ones_like(xi1)
        with np.errstate(under="ignore"):
            for tm in self.terms:
                amp = ctx.lambdify(tm.amp)(xi1, xi3, tt)
                prof = eps ** tm.s * xi3 ** tm.t
                if tm.r:
                    prof = prof * np.exp(-tm.r * a3 * xi3 / eps)
                total += amp * prof
        return total

    def sup_norm(self, eps, ctx, delta, xi1_samples=None, t_samples=(1.0,)):
        xi1v = np.linspace(0.0, 1.0, 65) if xi1_samples is None else xi1_samples
        xs = _xi3_samples(eps, float(sp.Integer(1)), delta)
        best = 0.0
        for tv in np.atleast_1d(t_samples):
            vals = self.evaluate(eps, xi1v[:, None], xs[None, :], tv, ctx)
            best = max(best, float(np.abs(vals).max()))
        return best

    def l2_norm(self, eps, ctx, delta, sqrtv=None, xi1_interval=(0.0, 1.0),
                t_value=1.0, add_tail=True):
        """Collar L2 norm with metric weight sqrtv(xi1, xi3); exact-form tail.

        The tail beyond the collar is added via termwise incomplete-gamma
        integrals whenever every amplitude is xi3-free (pure layer type).
        """
        lo, hi = xi1_interval
        xi1v = np.linspace(lo, hi, 129)
        xs, ws = _xi3_quadrature(eps, delta)
        vals = self.evaluate(eps, xi1v[:, None], xs[None, :], t_value, ctx)
        if sqrtv is None:
            wgt = np.ones_like(vals)
        else:
            wgt = ctx.lambdify(sqrtv)(xi1v[:, None], xs[None, :],
                                      np.asarray(t_value, dtype=float))
        inner = (vals * vals * wgt) @ ws
        total = np.trapezoid(inner, xi1v)
        if add_tail and all(not tm.amp.has(XI3) for tm in self.terms):
            total += self._tail_gram(eps, ctx, delta, xi1v, t_value, sqrtv)
        return math.sqrt(max(total, 0.0))

    def _tail_gram(self, eps, ctx, delta, xi1v, t_value, sqrtv):
        from scipy.special import gammaincc, gamma as gamma_fn
        a3 = ctx.lambdify(self.alpha3, (XI1,))(xi1v) if self.alpha3.free_symbols \
            else float(self.alpha3) * np.ones_like(xi1v)
        tv = np.asarray(t_value, dtype=float)
        sv = (ctx.lambdify(sqrtv)(xi1v, np.full_like(xi1v, delta), tv)
              if sqrtv is not None else np.ones_like(xi1v))
        total = np.zeros_like(xi1v)
        for a in self.terms:
            for b in self.terms:
                r = a.r + b.r
                if r == 0:
                    continue
                p = a.t + b.t
                beta = r * a3 / eps
                upper = (gamma_fn(p + 1) / beta ** (p + 1)
                         * gammaincc(p + 1, beta * delta))
                amp = (ctx.lambdify(a.amp)(xi1v, 0 * xi1v, tv)
                       * ctx.lambdify(b.amp)(xi1v, 0 * xi1v, tv))
                total += amp * eps ** (a.s + b.s) * upper * sv
        return float(np.trapezoid(total, xi1v))

    # -- est guard ----------------------------------------------------
    def apply_est_guard(self, eps_max, ctx, delta, sup_tol=EST_GUARD_SUP):
        """Exempt cutoff-band terms from order bookkeeping if numerically tiny."""
        out = []
        for tm in self.terms:
            if tm.est_candidate() and not tm.order_exempt:
                single = self.with_terms([tm], merge=False)
                if single.sup_norm(eps_max, ctx, delta) < sup_tol:
                    tm = replace(tm, order_exempt=True)
            out.append(tm)
        return self.with_terms(out, merge=False)

    # -- pretty ------------------------------------------------------
    def pretty(self):
        if not self.terms:
            return "0"
        bits = []
        for tm in self.terms:
            factors = [f"[{sp.sstr(tm.amp)}]"]
            if tm.s:
                factors.append(f"eps^{tm.s}")
            if tm.t:
                factors.append(f"xi3^{tm.t}")
            if tm.r:
                factors.append(f"exp(-{tm.r}*a3*xi3/eps)")
            tag = "  (e.s.t.)" if tm.order_exempt else ""
            bits.append(" * ".join(factors) + tag)
        return "\n+ ".join(bits)

    def __repr__(self):
        return f"<LayerExpansion {len(self.terms)} terms, order {self.order}>"


# ---------------------------------------------------------- derived ops


def differentiate_xi3(e: LayerExpansion) -> LayerExpansion:
    return e.diff_xi3()


def multiply(a: LayerExpansion, b: LayerExpansion) -> LayerExpansion:
    return a * b


def evaluate(e: LayerExpansion, eps, grid, ctx) -> np.ndarray:
    xi1, xi3, t = grid
    return e.evaluate(eps, xi1, xi3, t, ctx)


def trace_decompose(sigma, strict=True):
    """Split sigma(xi1, xi3, t) = sigma(.,0,.) + xi3 * remainder, exactly.

    Cutoff factors are first rewritten via rho = 1 + rhom1 so the analytic
    part is xi3-rational; band-supported factors are divided by xi3 through
    their registered '<atom>_ox' companions.
    """
    sigma = sp.sympify(sigma)
    rewrite = {}
    for f in registered_atoms(sigma):
        name = f.func.__name__
        if f"{name}m1" in _ATOM_CLASSES:
            rewrite[f] = 1 + _ATOM_CLASSES[f"{name}m1"](*f.args)
    sigma = sp.expand(sigma.xreplace(rewrite))
    an_terms, est_terms = [], []
    for term in sp.Add.make_args(sigma):
        (est_terms if has_est_atom(term) else an_terms).append(term)
    sig_an = sp.Add(*an_terms)
    for f in registered_atoms(sig_an):
        if XI3 in f.free_symbols:
            raise ValueError(f"cannot trace-decompose opaque xi3 atom {f}")
    trace = sig_an.subs(XI3, 0)
    rem = sp.cancel((sig_an - trace) / XI3)
    probe = rem.subs(XI3, 0)
    if probe.has(sp.zoo) or probe.has(sp.nan):
        # non-rational analytic amplitude: bridge the removable singularity
        # with the cubic Taylor polynomial of the difference quotient
        ds = [sp.diff(sig_an, XI3, k).subs(XI3, 0) for k in (1, 2, 3)]
        if any(d.has(sp.zoo) or d.has(sp.nan) for d in ds):
            if strict:
                raise ValueError("amplitude not smooth at xi3 = 0")
        taylor = ds[0] + XI3 * ds[1] / 2 + XI3**2 * ds[2] / 6
        rem = sp.Piecewise((taylor, sp.Abs(XI3) < 1e-4), (rem, True))
    for term in est_terms:
        fs = [f for f in registered_atoms(term)
              if f.func.__name__ in OVER_XI3_PARTNER]
        if not fs:
            raise ValueError(f"est term without divisible factor: {term}")
        f = fs[0]
        ox = _ATOM_CLASSES[OVER_XI3_PARTNER[f.func.__name__]](*f.args)
        rem += sp.cancel(term.xreplace({f: XI3 * ox}) / XI3)
    return trace, rem


def integrate_xi3_from_zero(e: LayerExpansion) -> LayerExpansion:
    """Exact antiderivative vanishing at xi3 = 0 (trace amplitudes only)."""
    out = []
    a3 = e.alpha3
    for tm in e.terms:
        if tm.amp.has(XI3):
            raise ValueError("integration requires xi3-free amplitudes")
        if tm.r == 0:
            raise ValueError("r = 0 term has no decaying antiderivative bookkeeping")
        # int_0^x s^t exp(-b s/eps) ds,  b = r a3:
        #   t! (eps/b)^(t+1) [ 1 - e^(-bx/eps) * sum_m (bx/eps)^m / m! ]
        b = tm.r * a3
        c = sp.factorial(tm.t)
        out.append(LayerTerm(tm.amp * c / b ** (tm.t + 1), tm.s + tm.t + 1, 0, 0,
                             order_exempt=tm.order_exempt))
        for m in range(tm.t + 1):
            coef = -tm.amp * c / (sp.factorial(m) * b ** (tm.t + 1 - m))
            out.append(LayerTerm(coef, tm.s + tm.t + 1 - m, m, tm.r,
                                 order_exempt=tm.order_exempt))
    return e.with_terms(out)


def integrate_xi3_decaying(e: LayerExpansion) -> LayerExpansion:
    """Exact antiderivative decaying as xi3 -> oo:  F' = e, F(oo) = 0."""
    out = []
    a3 = e.alpha3
    for tm in e.terms:
        if tm.amp.has(XI3):
            raise ValueError("integration requires xi3-free amplitudes")
        if tm.r == 0:
            raise ValueError("r = 0 term is not integrable against decay")
        b = tm.r * a3
        c = sp.factorial(tm.t)
        for m in range(tm.t + 1):
            coef = -tm.amp * c / (sp.factorial(m) * b ** (tm.t + 1 - m))
            out.append(LayerTerm(coef, tm.s + tm.t + 1 - m, m, tm.r,
                                 order_exempt=tm.order_exempt))
    return e.with_terms(out)


def norm_scaling_check(e: LayerExpansion, eps_sweep, ctx, delta,
                       xi1_interval=(0.0, 1.0)):
    """Fit L2 and sup norm scalings over a geometric eps sweep."""
    eps_sweep = list(eps_sweep)
    if len(eps_sweep) < 4:
        raise ValueError("sweep too short for a scaling fit")
    if e.smooth_part().terms:
        raise ValueError("norm scaling law applies to pure layer expansions")
    l2s = [e.l2_norm(eps, ctx, delta, xi1_interval=xi1_interval)
           for eps in eps_sweep]
    sups = [e.sup_norm(eps, ctx, delta) for eps in eps_sweep]
    return loglog_slope(eps_sweep, l2s), loglog_slope(eps_sweep, sups)


def loglog_slope(xs, ys):
    lx, ly = np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float))
    A = np.vstack([lx, np.ones_like(lx)]).T
    sol, *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(sol[0])


# ----------------------------------------------------------- quadrature


def _xi3_samples(eps, rmin, delta, per_scale=48):
    """Dense sampling resolving the eps scale, plus the polynomial maxima."""
    scale = eps
    xs = [np.linspace(0.0, min(8.0 * scale, delta), per_scale * 4)]
    if 8.0 * scale < delta:
        xs.append(np.geomspace(8.0 * scale, delta, per_scale))
    xs.append(np.array([min(k * eps, delta) for k in range(1, 9)]))
    return np.unique(np.concatenate(xs))


def _xi3_quadrature(eps, delta, n_panel=16):
    """Composite Gauss-Legendre panels graded from the eps scale to delta."""
    nodes, weights = np.polynomial.legendre.leggauss(n_panel)
    edges = [0.0]
    h = min(eps, delta / 4.0)
    while edges[-1] < delta:
        edges.append(min(edges[-1] + h, delta))
        h *= 2.0
    xs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        xs.append(mid + half * nodes)
        ws.append(half * weights)
    return np.concatenate(xs), np.concatenate(ws)
