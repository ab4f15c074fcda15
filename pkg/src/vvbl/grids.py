"""Wall-clustered staggered tensor-product grids.

Both production domains are periodic in a tangential coordinate s and bounded
by two walls in a normal coordinate q, with orthogonal metric
ds_phys = h(q) ds, dq_phys = dq:

  channel:  s = x in [0, L),    q = y in [0, H],       h(q) = 1
  annulus:  s = theta in [0,2pi), q = r in [Rin, Rout], h(q) = r

Layout (MAC): p at cell centers, u_s at s-faces x q-centers, u_q at
s-centers x q-faces.  The wall faces carry Dirichlet data for u_q.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridPolicy:
    """Wall-clustered grid parameters (the mesh description of a geometry)."""

    n_tangential: int = 128
    wall_cells_per_scale: float = 16.0   # cells per eps/alpha0 at Gamma_-
    growth: float = 1.13                 # geometric stretching ratio
    bulk_cell_frac: float = 1.0 / 64.0   # max cell = extent * frac
    min_layer_cells: int = 8             # required cells in [0, 4 eps/alpha0]

    def wall_cell(self, eps, alpha0):
        return eps / (self.wall_cells_per_scale * alpha0)

    def coarsened(self, factor=1.5):
        return GridPolicy(
            n_tangential=max(8, int(round(self.n_tangential / factor))),
            wall_cells_per_scale=self.wall_cells_per_scale / factor,
            growth=1.0 + (self.growth - 1.0) * factor,
            bulk_cell_frac=self.bulk_cell_frac * factor,
            min_layer_cells=max(4, int(self.min_layer_cells / factor)),
        )


def wall_clustered_nodes(extent, wall_cell, growth, h_max):
    """Node distances from the clustered wall: 0 = wall, last = extent."""
    if wall_cell >= h_max:
        n = max(4, int(np.ceil(extent / h_max)))
        return np.linspace(0.0, extent, n + 1)
    xs = [0.0]
    h = wall_cell
    while xs[-1] + h < extent:
        xs.append(xs[-1] + h)
        h = min(h * growth, h_max)
    # merge a short trailing sliver into the last cell
    if extent - xs[-1] < 0.4 * (xs[-1] - xs[-2]):
        xs[-1] = extent
    else:
        xs.append(extent)
    return np.asarray(xs)


@dataclass
class TensorGrid:
    """Staggered periodic-s x wall-bounded-q grid with metric factor h(q)."""

    kind: str                 # "channel" | "annulus"
    s_period: float
    ns: int
    q_faces: np.ndarray       # increasing, q_faces[0], q_faces[-1] are the walls
    gamma_minus_end: int      # 0 if Gamma_- is at q_faces[0], -1 if at q_faces[-1]
    h_is_q: bool              # h(q) = q (annulus) or 1 (channel)

    def __post_init__(self):
        self.ds = self.s_period / self.ns
        self.s_faces = np.arange(self.ns) * self.ds
        self.s_centers = self.s_faces + 0.5 * self.ds
        self.q_faces = np.asarray(self.q_faces, dtype=float)
        self.nq = self.q_faces.size - 1
        self.q_centers = 0.5 * (self.q_faces[1:] + self.q_faces[:-1])
        self.dq = np.diff(self.q_faces)                     # cell heights
        self.dq_c = np.diff(self.q_centers)                 # center spacings
        self.h_c = self.q_centers if self.h_is_q else np.ones(self.nq)
        self.h_f = self.q_faces if self.h_is_q else np.ones(self.nq + 1)
        self.hp_c = np.ones(self.nq) if self.h_is_q else np.zeros(self.nq)
        self.hp_f = np.ones(self.nq + 1) if self.h_is_q else np.zeros(self.nq + 1)

    # ---------------------------------------------------------- factories
    @staticmethod
    def channel(length, height, eps, alpha0, policy: GridPolicy):
        d = wall_clustered_nodes(
            height, policy.wall_cell(eps, alpha0), policy.growth,
            height * policy.bulk_cell_frac)
        return TensorGrid("channel", length, policy.n_tangential,
                          d, 0, False)

    @staticmethod
    def annulus(r_in, r_out, eps, alpha0, policy: GridPolicy, outflow="outer"):
        extent = r_out - r_in
        d = wall_clustered_nodes(
            extent, policy.wall_cell(eps, alpha0), policy.growth,
            extent * policy.bulk_cell_frac)
        if outflow == "outer":
            q = (r_out - d)[::-1].copy()
            gm = -1
        else:
            q = r_in + d
            gm = 0
        return TensorGrid("annulus", 2.0 * np.pi, policy.n_tangential, q, gm, True)

    # ------------------------------------------------------------- checks
    def layer_cells(self, eps, alpha0):
        """Number of q-cells within 4 eps/alpha0 of Gamma_-."""
        band = 4.0 * eps / alpha0
        dist = self.wall_distance(self.q_centers)
        return int(np.sum(dist <= band))

    def wall_distance(self, q):
        wall = self.q_faces[-1] if self.gamma_minus_end == -1 else self.q_faces[0]
        return np.abs(q - wall)

    def min_phys_cell(self):
        return min(float(np.min(self.h_c) * self.ds), float(np.min(self.dq)))

    # ------------------------------------------------- staggered operators
    def divergence(self, us, uq):
        """Discrete divergence at cell centers."""
        dus = (np.roll(us, -1, axis=0) - us) / self.ds
        flux = self.h_f[None, :] * uq
        duq = (flux[:, 1:] - flux[:, :-1]) / self.dq[None, :]
        return (dus + duq) / self.h_c[None, :]

    def grad_s(self, p):
        """d p / (h ds) at u_s points."""
        return (p - np.roll(p, 1, axis=0)) / (self.h_c[None, :] * self.ds)

    def grad_q(self, p):
        """dp/dq at interior q-faces (shape ns x nq-1)."""
        return (p[:, 1:] - p[:, :-1]) / self.dq_c[None, :]

    def integrate_centers(self, f):
        """Volume integral of a center field (metric-weighted)."""
        return float(np.sum(f * (self.h_c * self.dq)[None, :]) * self.ds)

    # interpolation helpers (2nd order on the stretched grid)
    def q_center_to_face(self, f):
        """Interpolate center field to interior q-faces."""
        w = self.dq[:-1] / (self.dq[:-1] + self.dq[1:])
        return f[:, :-1] * (1 - w)[None, :] + f[:, 1:] * w[None, :]

    def q_face_to_center(self, f):
        return 0.5 * (f[:, 1:] + f[:, :-1])

    def s_face_to_center(self, f):
        return 0.5 * (np.roll(f, -1, axis=0) + f)

    def s_center_to_face(self, f):
        return 0.5 * (f + np.roll(f, 1, axis=0))


def thomas_batch(lower, diag, upper, rhs):
    """Solve independent tridiagonal systems along the last axis.

    lower[..., 0] and upper[..., -1] are ignored.  Vectorized over the
    leading axes; deterministic elimination order.
    """
    n = diag.shape[-1]
    c = np.empty_like(diag)
    d = np.empty_like(rhs)
    c[..., 0] = upper[..., 0] / diag[..., 0]
    d[..., 0] = rhs[..., 0] / diag[..., 0]
    for k in range(1, n):
        m = diag[..., k] - lower[..., k] * c[..., k - 1]
        c[..., k] = upper[..., k] / m
        d[..., k] = (rhs[..., k] - lower[..., k] * d[..., k - 1]) / m
    x = np.empty_like(rhs)
    x[..., -1] = d[..., -1]
    for k in range(n - 2, -1, -1):
        x[..., k] = d[..., k] - c[..., k] * x[..., k + 1]
    return x


class PoissonSolver:
    """FFT-in-s + tridiagonal-in-q solver for div(grad p) = rhs, Neumann walls.

    Uses the discrete MAC Laplacian eigenvalues in s so the projected field
    is discretely divergence-free to round-off.  The s-mean mode is pinned.
    """

    def __init__(self, grid: TensorGrid):
        g = grid
        self.g = g
        k = np.arange(g.ns // 2 + 1)
        lam_s = -(2.0 - 2.0 * np.cos(2.0 * np.pi * k / g.ns)) / g.ds**2
        # q-operator: (1/h) d/dq (h dp/dq) in flux form at centers
        nq = g.nq
        lo = np.zeros(nq)
        di = np.zeros(nq)
        up = np.zeros(nq)
        for j in range(nq):
            vol = g.h_c[j] * g.dq[j]
            if j > 0:
                w = g.h_f[j] / g.dq_c[j - 1] / vol
                lo[j] = w
                di[j] -= w
            if j < nq - 1:
                e = g.h_f[j + 1] / g.dq_c[j] / vol
                up[j] = e
                di[j] -= e
        hc2 = g.h_c**2
        self.lower = np.broadcast_to(lo, (k.size, nq)).copy()
        self.upper = np.broadcast_to(up, (k.size, nq)).copy()
        self.diag = di[None, :] + lam_s[:, None] / hc2[None, :]
        # pin the mean mode's first cell
        self.diag[0, 0] = 1.0
        self.upper[0, 0] = 0.0

    def solve(self, rhs):
        g = self.g
        rhat = np.fft.rfft(rhs, axis=0)
        vol = g.h_c * g.dq
        rhat[0, :] -= (rhat[0, :] @ vol) / vol.sum()   # mean-mode compatibility
        rhat[0, 0] = 0.0
        phat = thomas_batch(self.lower, self.diag, self.upper, rhat)
        return np.fft.irfft(phat, n=g.ns, axis=0)
