"""Riemannian substrate: geodesics, parallel frames, Fermi charts, influence sets.

Metrics are Euclidean or conformally Euclidean g = c(x)^2 delta on an
interval (1D), a disk, or an axis-aligned rectangle (2D). Coefficients are
assumed evaluable on a padded neighbourhood of the domain (the enlarged
domain used to extend geodesics beyond the boundary).
"""

import math
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional

import numpy as np

from .errors import (ChartDomainError, ConfigError, ConjugatePointError,
                     GeometryError, TrappedRayError)


# ---------------------------------------------------------------------------
# metric and domains


class Metric:
    """Spatial metric c(x)^2 * delta over a 1D interval or 2D disk/rectangle.

    domain: ("interval", x0, x1) | ("rect", x0, x1, y0, y1)
          | ("disk", cx, cy, R)
    The conformal factor c must be positive on the padded domain.
    """

    def __init__(self, domain, c=None, pad=1.0):
        self.domain = tuple(domain)
        self.kind = "euclidean" if c is None else "conformal"
        self.c = c
        self.pad = float(pad)
        shape = self.domain[0]
        if shape == "interval":
            self.ndim = 1
        elif shape in ("rect", "disk"):
            self.ndim = 2
        else:
            raise ConfigError(f"unknown domain shape {shape!r}")

    # -- domain queries

    def sdf(self, x):
        """Signed distance to the boundary in coordinates (< 0 inside)."""
        x = np.asarray(x, dtype=float)
        kind = self.domain[0]
        if kind == "interval":
            x0, x1 = self.domain[1:]
            return np.maximum(x0 - x[..., 0], x[..., 0] - x1)
        if kind == "rect":
            x0, x1, y0, y1 = self.domain[1:]
            return np.maximum(np.maximum(x0 - x[..., 0], x[..., 0] - x1),
                              np.maximum(y0 - x[..., 1], x[..., 1] - y1))
        cx, cy, R = self.domain[1:]
        return np.hypot(x[..., 0] - cx, x[..., 1] - cy) - R

    def inside(self, x, tol=0.0):
        return self.sdf(x) < tol

    def in_padded(self, x):
        return self.sdf(x) < self.pad

    # -- metric evaluation (points are (..., ndim) arrays)

    def c_at(self, x):
        if self.c is None:
            return np.ones(np.shape(x)[:-1])
        x = np.asarray(x, dtype=float)
        if self.ndim == 1:
            return np.asarray(self.c(x[..., 0]), dtype=float)
        return np.asarray(self.c(x[..., 0], x[..., 1]), dtype=float)

    def grad_log_c(self, x, step=1e-5):
        if self.c is None:
            return np.zeros(np.shape(x))
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for k in range(self.ndim):
            e = np.zeros(self.ndim)
            e[k] = step
            fp = self.c_at(x + e)
            fm = self.c_at(x - e)
            fp2 = self.c_at(x + 2 * e)
            fm2 = self.c_at(x - 2 * e)
            out[..., k] = (-fp2 + 8 * fp - 8 * fm + fm2) / (12 * step)
        return out / self.c_at(x)[..., None]

    def g_norm(self, x, v):
        """|v|_g for a vector v attached at x."""
        v = np.asarray(v, dtype=float)
        return self.c_at(x) * np.linalg.norm(v, axis=-1)

    def g_inner(self, x, v, w):
        return self.c_at(x) ** 2 * np.sum(np.asarray(v) * np.asarray(w),
                                          axis=-1)

    def unit_vector(self, x, direction):
        """Rescale a coordinate direction to unit g-norm at x."""
        d = np.asarray(direction, dtype=float)
        return d / self.g_norm(x, d)

    def arclength_diameter(self):
        """Supremum of geodesic lengths (sampled estimate for conformal)."""
        kind = self.domain[0]
        if kind == "interval":
            x0, x1 = self.domain[1:]
            if self.c is None:
                return x1 - x0
            xs = np.linspace(x0, x1, 2049)
            return float(np.trapezoid(self.c(xs), xs))
        if kind == "rect":
            x0, x1, y0, y1 = self.domain[1:]
            diam = math.hypot(x1 - x0, y1 - y0)
        else:
            diam = 2.0 * self.domain[3]
        if self.c is None:
            return diam
        return diam * float(np.max(self._c_grid_sample()))

    def _c_grid_sample(self, n=64):
        kind = self.domain[0]
        if kind == "rect":
            x0, x1, y0, y1 = self.domain[1:]
            X, Y = np.meshgrid(np.linspace(x0, x1, n), np.linspace(y0, y1, n))
        else:
            cx, cy, R = self.domain[1:]
            X, Y = np.meshgrid(np.linspace(cx - R, cx + R, n),
                               np.linspace(cy - R, cy + R, n))
        return np.asarray(self.c(X, Y), dtype=float)


def padded_factor(c, domain, pad):
    """Extend an Omega-only conformal factor across the padding collar.

    First-order continuation whose argument saturates smoothly over the
    collar width, so the extension matches c to first order at the boundary
    and levels off to a constant. 1D interval domains; prefer passing a
    globally defined factor when one is available.
    """
    x0, x1 = domain[1], domain[2]
    fd = 1e-5
    c_lo, c_hi = float(c(np.array(x0))), float(c(np.array(x1)))
    d_lo = float((c(np.array(x0 + fd)) - c(np.array(x0 - fd))) / (2 * fd))
    d_hi = float((c(np.array(x1 + fd)) - c(np.array(x1 - fd))) / (2 * fd))

    def cp(x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(c(np.clip(x, x0, x1)), dtype=float)
        hi = x > x1
        lo = x < x0
        out = np.where(hi, c_hi + d_hi * pad * np.tanh((x - x1) / pad), out)
        out = np.where(lo, c_lo - d_lo * pad * np.tanh((x0 - x) / pad), out)
        return out
    return cp


# ---------------------------------------------------------------------------
# geodesics


@dataclass
class Geodesic:
    metric: Metric
    r: np.ndarray            # arc-length samples, r[0] = 0
    x: np.ndarray            # (n, ndim)
    v: np.ndarray            # (n, ndim), unit g-norm
    tau: float               # exit length (r of the boundary hit)

    def speed_error(self):
        return float(np.max(np.abs(self.metric.g_norm(self.x, self.v) - 1.0)))

    def interpolate(self, r):
        """Cubic Hermite interpolation of position/velocity at arc length r."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        xs = np.empty((len(r), self.x.shape[1]))
        vs = np.empty_like(xs)
        idx = np.clip(np.searchsorted(self.r, r) - 1, 0, len(self.r) - 2)
        r0, r1 = self.r[idx], self.r[idx + 1]
        hseg = r1 - r0
        t = (r - r0) / hseg
        h00 = (1 + 2 * t) * (1 - t) ** 2
        h10 = t * (1 - t) ** 2
        h01 = t * t * (3 - 2 * t)
        h11 = t * t * (t - 1)
        for k in range(self.x.shape[1]):
            p0, p1 = self.x[idx, k], self.x[idx + 1, k]
            m0, m1 = self.v[idx, k], self.v[idx + 1, k]
            xs[:, k] = h00 * p0 + h10 * hseg * m0 + h01 * p1 + h11 * hseg * m1
            # derivative of the Hermite polynomial
            d00 = 6 * t * (t - 1)
            d10 = (1 - t) * (1 - 3 * t)
            d01 = -d00
            d11 = t * (3 * t - 2)
            vs[:, k] = (d00 * p0 / hseg + d10 * m0 + d01 * p1 / hseg
                        + d11 * m1)
        return xs, vs


def _geo_rhs(metric, x, v):
    """Right-hand side of the unit-speed geodesic system."""
    if metric.kind == "euclidean":
        return v, np.zeros_like(v)
    gl = metric.grad_log_c(x)
    v2 = np.sum(v * v, axis=-1)
    acc = -2.0 * v * np.sum(v * gl, axis=-1)[..., None] + v2[..., None] * gl
    return v, acc


def _rk4_step(metric, x, v, dr):
    k1x, k1v = _geo_rhs(metric, x, v)
    k2x, k2v = _geo_rhs(metric, x + 0.5 * dr * k1x, v + 0.5 * dr * k1v)
    k3x, k3v = _geo_rhs(metric, x + 0.5 * dr * k2x, v + 0.5 * dr * k2v)
    k4x, k4v = _geo_rhs(metric, x + dr * k3x, v + dr * k3v)
    xn = x + (dr / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
    vn = v + (dr / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
    return xn, vn


def trace_geodesic(metric, x0, v0, step=None, max_len=None):
    """Integrate the unit-speed geodesic from x0 until it crosses Gamma.

    v0 must have unit g-norm (checked to 1e-10). The exit length tau is
    refined by bisection to 1e-8 * step.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    v0 = np.atleast_1d(np.asarray(v0, dtype=float))
    sp = float(metric.g_norm(x0, v0))
    if abs(sp - 1.0) > 1e-10:
        raise ConfigError(f"initial covector has g-norm {sp:.3e}, expected 1")
    if metric.sdf(x0) > 1e-12:
        raise ConfigError("initial point lies outside the closed domain")
    diam = metric.arclength_diameter()
    step = step or diam / 400.0
    max_len = max_len or 4.0 * diam

    rs, xs, vs = [0.0], [x0.copy()], [v0.copy()]
    x, v, r = x0.copy(), v0.copy(), 0.0
    while True:
        xn, vn = _rk4_step(metric, x, v, step)
        rn = r + step
        if rn > max_len:
            raise TrappedRayError(
                f"geodesic exceeded max length {max_len:.3g}")
        if metric.sdf(xn) >= 0.0:
            break
        x, v, r = xn, vn, rn
        rs.append(r)
        xs.append(x.copy())
        vs.append(v.copy())
    # bisection on the step fraction for the boundary crossing
    lo, hi = 0.0, step
    x_hi = xn
    while hi - lo > 1e-8 * step:
        mid = 0.5 * (lo + hi)
        xm, vm = _rk4_step(metric, x, v, mid)
        if metric.sdf(xm) >= 0.0:
            hi, x_hi = mid, xm
        else:
            lo = mid
    x_exit, v_exit = _rk4_step(metric, x, v, hi)
    tau = r + hi
    rs.append(tau)
    xs.append(x_exit)
    vs.append(v_exit)
    return Geodesic(metric, np.array(rs), np.array(xs), np.array(vs),
                    float(tau))


def extend_geodesic(geo, eps, step=None):
    """Continue a traced geodesic by eps into the padded domain, both ways.

    Returns a new Geodesic sampled on r in [-eps, tau + eps]; r keeps its
    origin at the original start point.
    """
    metric = geo.metric
    step = step or max(geo.tau, eps) / 400.0
    n_back = max(2, int(np.ceil(eps / step)))
    db = eps / n_back

    def march(x, v, dr, n):
        out_x, out_v = [], []
        for _ in range(n):
            x, v = _rk4_step(metric, x, v, dr)
            if not metric.in_padded(x):
                raise GeometryError(
                    "geodesic extension left the padded domain; increase pad")
            out_x.append(x.copy())
            out_v.append(v.copy())
        return out_x, out_v

    bx, bv = march(geo.x[0], -geo.v[0], db, n_back)
    rs_back = -db * np.arange(1, n_back + 1)
    fx, fv = march(geo.x[-1], geo.v[-1], db, n_back)
    rs_fwd = geo.tau + db * np.arange(1, n_back + 1)

    r_all = np.concatenate([rs_back[::-1], geo.r, rs_fwd])
    x_all = np.concatenate([np.array(bx)[::-1] if bx else
                            np.empty((0, geo.x.shape[1])), geo.x,
                            np.array(fx)])
    v_all = np.concatenate([-np.array(bv)[::-1] if bv else
                            np.empty((0, geo.v.shape[1])), geo.v,
                            np.array(fv)])
    return Geodesic(metric, r_all, x_all, v_all, geo.tau)


def _frame_with_deriv(geo):
    """Parallel frame samples together with their r-derivatives."""
    metric = geo.metric
    if metric.ndim == 1:
        z = np.zeros((len(geo.r), 0, 1))
        return z, z.copy()
    if len(geo.r) < 2:
        raise ConfigError("geodesic needs at least 2 samples")
    v0 = geo.v[0]
    perp = np.array([-v0[1], v0[0]])
    e0 = perp / metric.g_norm(geo.x[0], perp)

    if metric.kind == "euclidean":
        E = np.broadcast_to(e0[None, None, :], (len(geo.r), 1, 2)).copy()
        return E, np.zeros_like(E)

    def erhs(x, v, E):
        gl = metric.grad_log_c(x)
        return -(v * np.dot(E, gl) + E * np.dot(v, gl)
                 - gl * np.dot(v, E))

    E = e0.copy()
    out = [E.copy()]
    douts = [erhs(geo.x[0], geo.v[0], E)]
    x, v = geo.x[0].copy(), geo.v[0].copy()
    for i in range(1, len(geo.r)):
        dr = geo.r[i] - geo.r[i - 1]
        # joint RK4 on (x, v, E)
        k1x, k1v = _geo_rhs(metric, x, v)
        k1e = erhs(x, v, E)
        k2x, k2v = _geo_rhs(metric, x + 0.5 * dr * k1x, v + 0.5 * dr * k1v)
        k2e = erhs(x + 0.5 * dr * k1x, v + 0.5 * dr * k1v,
                   E + 0.5 * dr * k1e)
        k3x, k3v = _geo_rhs(metric, x + 0.5 * dr * k2x, v + 0.5 * dr * k2v)
        k3e = erhs(x + 0.5 * dr * k2x, v + 0.5 * dr * k2v,
                   E + 0.5 * dr * k2e)
        k4x, k4v = _geo_rhs(metric, x + dr * k3x, v + dr * k3v)
        k4e = erhs(x + dr * k3x, v + dr * k3v, E + dr * k3e)
        x = x + (dr / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + (dr / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
        E = E + (dr / 6.0) * (k1e + 2 * k2e + 2 * k3e + k4e)
        out.append(E.copy())
        douts.append(erhs(x, v, E))
    return np.array(out)[:, None, :], np.array(douts)[:, None, :]


def parallel_frame(geo, step=None):
    """Parallel transport of a transverse orthonormal frame along geo.

    Returns E samples of shape (n_samples, n-1, ndim); empty for 1D.
    The frame is re-integrated jointly with the geodesic for consistency.
    """
    return _frame_with_deriv(geo)[0]


@dataclass
class NullGeodesic:
    """Light ray beta(r) = (r + t_offset, gamma(r)), r in [0, tau]."""
    geodesic: Geodesic
    t_offset: float

    @property
    def tau(self):
        return self.geodesic.tau

    @property
    def t_minus(self):
        return self.t_offset

    @property
    def t_plus(self):
        return self.t_offset + self.geodesic.tau

    def samples(self):
        return self.geodesic.r, self.geodesic.r + self.t_offset, \
            self.geodesic.x

    def null_defect(self):
        """max | -1 + |dx/dr|_g^2 | over the samples."""
        sp = self.geodesic.metric.g_norm(self.geodesic.x, self.geodesic.v)
        return float(np.max(np.abs(sp ** 2 - 1.0)))


# ---------------------------------------------------------------------------
# Fermi charts


SQRT2 = math.sqrt(2.0)


@dataclass
class FermiChart:
    """Null coordinates (z0, z1, z'') along a light ray.

    z0 = (t+s)/sqrt(2) + a/2 and z1 = (-t+s)/sqrt(2) + a/2 with s the arc
    length from the extended start of the ray; on the axis z0 = sqrt(2)*t
    and z1 = 0, and the space-time metric takes the normal form
    2 dz0 dz1 + sum dz_k^2 with vanishing first derivatives.
    """
    ray: NullGeodesic
    eps: float
    delta_prime: float
    a: float
    b: float
    a0: float
    b0: float
    ext: Geodesic
    frame: np.ndarray        # (n_samples, n-1, ndim)
    frame_d: Optional[np.ndarray] = None
    fd_step: float = 1e-4

    # -- basic maps

    @property
    def ndim(self):
        return self.ray.geodesic.metric.ndim

    @property
    def n_trans(self):
        return self.ndim           # transverse indices 1..n

    @property
    def s_anchor(self):
        """z0 of the ray's entry point (Riccati anchor in the paper)."""
        return SQRT2 * self.ray.t_minus

    @property
    def is_flat(self):
        return self.ray.geodesic.metric.kind == "euclidean"

    def z0_of_t(self, t):
        return SQRT2 * np.asarray(t)

    def t_of_z0(self, z0):
        return np.asarray(z0) / SQRT2

    def axis_point(self, z0):
        """(t, x) on the ray at axis coordinate z0."""
        t = self.t_of_z0(z0)
        r = t - self.ray.t_offset
        x, _ = self.ext.interpolate(r)
        return t, x

    def _gamma(self, sigma):
        """Position/velocity/frame at arc length sigma from extended start."""
        r = np.atleast_1d(sigma) - self.eps
        x, v = self.ext.interpolate(r)
        if self.ndim == 1:
            return x, v, None
        idx = np.clip(np.searchsorted(self.ext.r, r) - 1, 0,
                      len(self.ext.r) - 2)
        r0, r1 = self.ext.r[idx], self.ext.r[idx + 1]
        hseg = (r1 - r0)[:, None]
        t = ((r - r0) / (r1 - r0))[:, None]
        p0, p1 = self.frame[idx, 0], self.frame[idx + 1, 0]
        if self.frame_d is None:
            E = (1 - t) * p0 + t * p1
        else:
            m0, m1 = self.frame_d[idx, 0], self.frame_d[idx + 1, 0]
            h00 = (1 + 2 * t) * (1 - t) ** 2
            h10 = t * (1 - t) ** 2
            h01 = t * t * (3 - 2 * t)
            h11 = t * t * (t - 1)
            E = h00 * p0 + h10 * hseg * m0 + h01 * p1 + h11 * hseg * m1
        # re-normalize the interpolated frame vector to unit g-norm
        E = E / self.ray.geodesic.metric.g_norm(x, E)[:, None]
        return x, v, E

    def from_fermi(self, z):
        """Inverse chart: z = (z0, z1[, z2]) -> (t, x)."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        t = (z[:, 0] - z[:, 1]) / SQRT2
        sigma = (z[:, 0] + z[:, 1] - self.a) / SQRT2
        if self.ndim == 1:
            x, _, _ = self._gamma(sigma)
            return t, x
        x0, _, E = self._gamma(sigma)
        y2 = z[:, 2]
        metric = self.ray.geodesic.metric
        if self.is_flat:
            return t, x0 + y2[:, None] * E
        return t, _exp_map_batch(metric, x0, E, y2)

    def to_fermi(self, t, x):
        """Forward chart (t, x) -> z, by projection/Newton inversion."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.atleast_2d(np.asarray(x, dtype=float))
        metric = self.ray.geodesic.metric
        if self.ndim == 1:
            sigma = self._sigma_of_x(x[:, 0])
            z0 = (t + sigma) / SQRT2 + self.a / 2
            z1 = (-t + sigma) / SQRT2 + self.a / 2
            return np.stack([z0, z1], axis=1)
        if self.is_flat:
            p0 = self.ext.x[0]
            d = self.ext.v[0]
            E = self.frame[0, 0]
            rel = x - p0
            sigma = rel @ d
            y2 = rel @ E
            z0 = (t + sigma) / SQRT2 + self.a / 2
            z1 = (-t + sigma) / SQRT2 + self.a / 2
            return np.stack([z0, z1, y2], axis=1)
        out = np.empty((len(t), 3))
        for i in range(len(t)):
            sig, y2 = self._invert_exp(x[i])
            z0 = (t[i] + sig) / SQRT2 + self.a / 2
            z1 = (-t[i] + sig) / SQRT2 + self.a / 2
            out[i] = (z0, z1, y2)
        return out

    def _sigma_of_x(self, x):
        """1D: arc length from the extended start at coordinate x."""
        xs = self.ext.x[:, 0]
        rs = self.ext.r
        if xs[0] > xs[-1]:
            xs, rs = xs[::-1], rs[::-1]
        r = np.interp(x, xs, rs)
        # one Newton polish: dr/dx = c(x)
        metric = self.ray.geodesic.metric
        for _ in range(3):
            xx, _ = self.ext.interpolate(r)
            r = r + (x - xx[:, 0]) * metric.c_at(xx)
        return r + self.eps

    def _invert_exp(self, x, tol=1e-12, max_iter=60):
        """2D curved: solve exp_{gamma(sigma)}(y2 E(sigma)) = x."""
        p0 = self.ext.x[0]
        d0 = self.ext.v[0]
        sig = float((x - p0) @ (d0 / np.linalg.norm(d0)))
        y2 = 0.0
        fd = self.fd_step
        # 2x2 Newton on F(sig, y2) = X(sig, y2) - x
        for it in range(max_iter):
            X = self._spatial(sig, y2)
            F = X - x
            if np.max(np.abs(F)) < tol:
                return sig, y2
            Xs = (self._spatial(sig + fd, y2)
                  - self._spatial(sig - fd, y2)) / (2 * fd)
            Xy = (self._spatial(sig, y2 + fd)
                  - self._spatial(sig, y2 - fd)) / (2 * fd)
            J = np.stack([Xs, Xy], axis=1)
            try:
                dd = np.linalg.solve(J, F)
            except np.linalg.LinAlgError:
                raise ConjugatePointError(
                    "chart Jacobian singular during inversion")
            sig -= dd[0]
            y2 -= dd[1]
        raise ConjugatePointError(
            "chart inversion did not converge (round-trip failure)")

    def _spatial(self, sigma, y2):
        """Spatial part of from_fermi at (sigma, y2)."""
        x0, _, E = self._gamma(np.array([sigma]))
        metric = self.ray.geodesic.metric
        if self.is_flat:
            return x0[0] + y2 * E[0]
        return _exp_map(metric, x0[0], E[0], y2)

    # -- chart metric

    def gbar(self, z):
        """Components of -dt^2 + g in Fermi coordinates at z."""
        z = np.asarray(z, dtype=float)
        n = self.ndim
        metric = self.ray.geodesic.metric
        if self.is_flat:
            G = np.zeros((n + 1, n + 1))
            G[0, 1] = G[1, 0] = 1.0
            for k in range(2, n + 1):
                G[k, k] = 1.0
            return G
        fd = self.fd_step
        pts = [z]
        for k in range(n + 1):
            e = np.zeros(n + 1)
            e[k] = fd
            pts.append(z + e)
            pts.append(z - e)
        _, xs = self.from_fermi(np.stack(pts))
        cols = [(xs[2 * k + 1] - xs[2 * k + 2]) / (2 * fd)
                for k in range(n + 1)]
        dx = np.stack(cols, axis=1)           # (ndim, n+1)
        dt = np.zeros(n + 1)
        dt[0] = 1.0 / SQRT2
        dt[1] = -1.0 / SQRT2
        c2 = metric.c_at(xs[0][None, :])[0] ** 2
        G = -np.outer(dt, dt) + c2 * (dx.T @ dx)
        return G

    def gbar_inv11(self, z):
        G = self.gbar(np.asarray(z, dtype=float))
        return float(np.linalg.inv(G)[1, 1])

    def coeff_B(self, z0):
        """B = (1/4) d^2 gbar^{11} over transverse coordinates, on the axis.

        Symmetrized; identically zero for Euclidean metrics.
        """
        n = self.n_trans
        if self.is_flat:
            return np.zeros((n, n))
        step = 1e-3 * self.delta_prime * 10.0
        base = np.zeros(self.ndim + 1)
        base[0] = z0

        def f(dz):
            return self.gbar_inv11(base + dz)

        B = np.zeros((n, n))
        f0 = f(np.zeros(self.ndim + 1))
        for i in range(n):
            ei = np.zeros(self.ndim + 1)
            ei[i + 1] = step
            # 4th-order second derivative
            B[i, i] = (-f(2 * ei) + 16 * f(ei) - 30 * f0 + 16 * f(-ei)
                       - f(-2 * ei)) / (12 * step ** 2)
            for j in range(i + 1, n):
                ej = np.zeros(self.ndim + 1)
                ej[j + 1] = step
                mixed = (f(ei + ej) - f(ei - ej) - f(-ei + ej)
                         + f(-ei - ej)) / (4 * step ** 2)
                B[i, j] = B[j, i] = mixed
        B *= 0.25
        return 0.5 * (B + B.T)

    def b_axis_values(self, coeff, z0_grid, T=None):
        """Sample a space-time coefficient b(x,t) along the axis."""
        if coeff is None:
            return np.zeros(len(z0_grid))
        t, x = self.axis_point(np.asarray(z0_grid))
        metric = self.ray.geodesic.metric
        if metric.ndim == 1:
            return np.asarray(coeff(x[:, 0], t), dtype=float)
        return np.asarray(coeff(x[:, 0], x[:, 1], t), dtype=float)

    def tube_time_range(self):
        tmin = (self.a0 - self.delta_prime) / SQRT2
        tmax = (self.b0 + self.delta_prime) / SQRT2
        return tmin, tmax

    def roundtrip_error(self, n_test=20, seed=0):
        rng = np.random.default_rng(seed)
        z0s = rng.uniform(self.a0, self.b0, n_test)
        z1s = rng.uniform(-self.delta_prime, self.delta_prime, n_test)
        if self.ndim == 1:
            z = np.stack([z0s, z1s], axis=1)
        else:
            z2s = rng.uniform(-self.delta_prime, self.delta_prime, n_test)
            z = np.stack([z0s, z1s, z2s], axis=1)
        t, x = self.from_fermi(z)
        z_back = self.to_fermi(t, x)
        return float(np.max(np.abs(z_back - z)))


def _exp_map(metric, p, direction, dist, n_steps=12):
    """exp_p(dist * direction) for a unit direction, by RK4 substeps."""
    if dist == 0.0:
        return p.copy()
    v = direction if dist > 0 else -direction
    x, vv = p.copy(), v.copy()
    dr = abs(dist) / n_steps
    for _ in range(n_steps):
        x, vv = _rk4_step(metric, x, vv, dr)
    return x


def _exp_map_batch(metric, p, direction, dist, n_steps=12):
    """Vectorized exp map: p, direction (m, ndim); dist (m,)."""
    dist = np.asarray(dist, dtype=float)
    sign = np.where(dist >= 0, 1.0, -1.0)
    v = direction * sign[:, None]
    x, vv = p.copy(), v.copy()
    dr = (np.abs(dist) / n_steps)[:, None]
    for _ in range(n_steps):
        x, vv = _rk4_step(metric, x, vv, dr)
    return x


def build_fermi_chart(beta, eps=None, delta_prime=None, time_bounds=None):
    """Fermi chart around a null geodesic, extended by eps past the boundary.

    Defaults: eps = 5% of tau, delta_prime = 10% of the tube's distance to
    the time boundary (when time_bounds is given) else 10% of tau.
    """
    tau = beta.tau
    eps = eps if eps is not None else 0.05 * tau
    ext = extend_geodesic(beta.geodesic, eps)
    frame, frame_d = _frame_with_deriv(ext)
    t_minus, t_plus = beta.t_minus, beta.t_plus
    a = SQRT2 * (t_minus - eps)
    b = SQRT2 * (t_plus + eps)
    a0 = SQRT2 * (t_minus - eps / SQRT2)
    b0 = SQRT2 * (t_plus + eps / SQRT2)
    if delta_prime is None:
        if time_bounds is not None:
            t0, t1 = time_bounds
            gap = min(t_minus - eps / SQRT2 - t0, t1 - t_plus - eps / SQRT2)
            delta_prime = 0.1 * gap * SQRT2
        else:
            delta_prime = 0.1 * tau
    chart = FermiChart(ray=beta, eps=eps, delta_prime=delta_prime,
                       a=a, b=b, a0=a0, b0=b0, ext=ext, frame=frame,
                       frame_d=frame_d)
    if time_bounds is not None:
        tmin, tmax = chart.tube_time_range()
        if tmin <= time_bounds[0] or tmax >= time_bounds[1]:
            raise ChartDomainError(
                f"chart tube t-range ({tmin:.3f}, {tmax:.3f}) touches the "
                f"time boundary {time_bounds}")
    err = chart.roundtrip_error(n_test=8)
    if err > 1e-8:
        raise ConjugatePointError(
            f"chart round-trip error {err:.2e} exceeds 1e-8")
    return chart


# ---------------------------------------------------------------------------
# influence sets


@dataclass
class InfluenceMasks:
    grid: object
    mask_D: np.ndarray      # (nt+1, spatial...) bool
    mask_E: np.ndarray
    D_g: np.ndarray         # spatial field
    dist_bdry: np.ndarray   # spatial field


def _dist_and_Dg(metric, grid, n_dirs=64):
    """Boundary distance and longest-geodesic length per grid node."""
    if metric.ndim == 1:
        xs = grid.xs
        if metric.kind == "euclidean":
            x0, x1 = metric.domain[1:]
            dist = np.minimum(xs - x0, x1 - xs)
            Dg = np.full_like(xs, x1 - x0)
            return dist, Dg
        c = metric.c_at(xs[:, None])
        arc = np.concatenate([[0.0], np.cumsum(
            0.5 * (c[1:] + c[:-1]) * np.diff(xs))])
        dist = np.minimum(arc, arc[-1] - arc)
        Dg = np.full_like(xs, arc[-1])
        return dist, Dg

    X, Y = np.meshgrid(grid.xs, grid.ys)
    pts = np.stack([X.reshape(-1), Y.reshape(-1)], axis=1)
    kind = metric.domain[0]
    if metric.kind == "euclidean":
        dist = -metric.sdf(pts)
        if kind == "disk":
            Dg = np.full(len(pts), 2.0 * metric.domain[3])
        else:
            x0, x1, y0, y1 = metric.domain[1:]
            thetas = np.linspace(0, np.pi, n_dirs, endpoint=False)
            u = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
            Dg = np.zeros(len(pts))
            for uu in u:
                lp = _ray_box_exit(pts, uu, x0, x1, y0, y1)
                lm = _ray_box_exit(pts, -uu, x0, x1, y0, y1)
                Dg = np.maximum(Dg, lp + lm)
        return dist.reshape(X.shape), Dg.reshape(X.shape)

    # conformal 2D: sampled directions via geodesic tracing (small grids)
    thetas = np.linspace(0, 2 * np.pi, n_dirs, endpoint=False)
    dist = np.full(len(pts), np.inf)
    Dg = np.zeros(len(pts))
    interior = metric.sdf(pts) < -1e-9
    for i, p in enumerate(pts):
        if not interior[i]:
            dist[i] = 0.0
            Dg[i] = 0.0
            continue
        lengths = []
        for th in thetas[:n_dirs // 2]:
            u = np.array([np.cos(th), np.sin(th)])
            v = metric.unit_vector(p, u)
            lp = trace_geodesic(metric, p, v).tau
            lm = trace_geodesic(metric, p, -v).tau
            lengths.append((lp, lm))
        arr = np.array(lengths)
        dist[i] = min(arr.min(), dist[i])
        Dg[i] = np.max(arr.sum(axis=1))
    return dist.reshape(X.shape), Dg.reshape(X.shape)


def _ray_box_exit(pts, u, x0, x1, y0, y1):
    """Distance from pts to the box boundary along direction u."""
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(u[0] > 0, (x1 - pts[:, 0]) / u[0],
                      np.where(u[0] < 0, (x0 - pts[:, 0]) / u[0], np.inf))
        ty = np.where(u[1] > 0, (y1 - pts[:, 1]) / u[1],
                      np.where(u[1] < 0, (y0 - pts[:, 1]) / u[1], np.inf))
    return np.minimum(tx, ty)


def influence_sets(metric, grid, T=None, n_dirs=64):
    """Space-time masks D (domain of influence) and E (recoverable set).

    D = {dist(x, Gamma) < t < T - dist}, E = {D_g(x) < t < T - D_g(x)}
    where D_g(x) is the length of the longest geodesic through x.
    """
    T = T if T is not None else grid.T
    dist, Dg = _dist_and_Dg(metric, grid, n_dirs=n_dirs)
    ts = grid.times
    if metric.ndim == 1:
        tt = ts[:, None]
        mask_D = (tt > dist[None, :]) & (tt < T - dist[None, :])
        mask_E = (tt > Dg[None, :]) & (tt < T - Dg[None, :])
    else:
        tt = ts[:, None, None]
        mask_D = (tt > dist[None]) & (tt < T - dist[None])
        mask_E = (tt > Dg[None]) & (tt < T - Dg[None])
    return InfluenceMasks(grid=grid, mask_D=mask_D, mask_E=mask_E,
                          D_g=Dg, dist_bdry=dist)
