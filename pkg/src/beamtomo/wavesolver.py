"""Space-time grids and leapfrog wave solvers.

Solves u_tt - Delta_g u + b u_t + f(x,t,u) = F on an interval (1D) or an
axis-aligned rectangle (2D), with Dirichlet boundary data, via an explicit
leapfrog scheme with centered damping. Conformal media g = c(x)^2 delta are
supported through flux-form Laplacian weights.
"""

from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import (BlowupError, CompatibilityError, ConfigError,
                     ContractionFailureError)

CFL_CAP = {1: 0.9, 2: 0.6}


# ---------------------------------------------------------------------------
# grids and containers


class Grid:
    """Uniform space-time grid over Omega x (0, T) with Dirichlet boundary.

    1D: Omega = (x0, x1); 2D: Omega = (x0, x1) x (y0, y1) with square cells.
    `c` is an optional conformal factor (wave speed 1/c).
    """

    def __init__(self, ndim, xs, ys, T, nt, c=None):
        self.ndim = ndim
        self.xs = xs
        self.ys = ys
        self.T = float(T)
        self.nt = int(nt)
        self.dt = self.T / self.nt
        self.h = float(xs[1] - xs[0])
        self.c = c
        if ndim == 2:
            hy = float(ys[1] - ys[0])
            if abs(hy - self.h) > 1e-12 * self.h:
                raise ConfigError("2D grids require square cells (hx == hy)")
        self._setup_medium()
        self._setup_boundary()
        cap = CFL_CAP[ndim]
        self.cfl = self.dt * self.speed_max / self.h
        if self.cfl > cap + 1e-12:
            raise ConfigError(
                f"CFL ratio {self.cfl:.4f} exceeds cap {cap} for ndim={ndim}; "
                f"increase nt or coarsen the spatial grid")

    # -- factories

    @classmethod
    def line(cls, x0, x1, nx, T, nt=None, cfl=0.9, c=None):
        xs = np.linspace(x0, x1, nx + 1)
        if nt is None:
            h = (x1 - x0) / nx
            smax = 1.0 if c is None else 1.0 / np.min(c(xs))
            nt = int(np.ceil(T * smax / (cfl * h)))
        return cls(1, xs, None, T, nt, c=c)

    @classmethod
    def rect(cls, x0, x1, y0, y1, nx, T, nt=None, cfl=0.6, c=None):
        xs = np.linspace(x0, x1, nx + 1)
        h = (x1 - x0) / nx
        ny = int(round((y1 - y0) / h))
        ys = np.linspace(y0, y1, ny + 1)
        if nt is None:
            if c is None:
                smax = 1.0
            else:
                X, Y = np.meshgrid(xs, ys)
                smax = 1.0 / np.min(c(X, Y))
            nt = int(np.ceil(T * smax / (cfl * h)))
        return cls(2, xs, ys, T, nt, c=c)

    # -- internals

    def _setup_medium(self):
        if self.ndim == 1:
            xs, h = self.xs, self.h
            if self.c is None:
                cn = np.ones_like(xs)
                ch = np.ones(len(xs) - 1)
            else:
                cn = np.asarray(self.c(xs), dtype=float)
                ch = np.asarray(self.c(0.5 * (xs[:-1] + xs[1:])), dtype=float)
            if np.min(cn) <= 0 or np.min(ch) <= 0:
                raise ConfigError("conformal factor must be positive")
            self.c_nodes = cn
            wp = np.zeros_like(cn)
            wm = np.zeros_like(cn)
            wp[:-1] = 1.0 / (cn[:-1] * ch * h * h)
            wm[1:] = 1.0 / (cn[1:] * ch * h * h)
            self.wp, self.wm = wp, wm
            self.inv_c2 = np.empty((0, 0))
            self.speed_max = 1.0 / np.min(cn)
        else:
            X, Y = np.meshgrid(self.xs, self.ys)
            if self.c is None:
                cn = np.ones_like(X)
                self.inv_c2 = np.empty((0, 0))
            else:
                cn = np.asarray(self.c(X, Y), dtype=float)
                if np.min(cn) <= 0:
                    raise ConfigError("conformal factor must be positive")
                self.inv_c2 = np.ascontiguousarray(1.0 / (cn * cn))
            self.c_nodes = cn
            self.speed_max = 1.0 / np.min(cn)

    def _setup_boundary(self):
        if self.ndim == 1:
            self.nb = 2
            self.bdry_x = np.array([self.xs[0], self.xs[-1]])
            # outward-normal sign applied to the raw one-sided stencil
            self.trace_sign = np.array([-1.0, 1.0])
            self.trace_cinv = 1.0 / self.c_nodes[[0, -1]]
            self.bdry_wts = np.array([1.0, 1.0])  # counting measure on 2 pts
        else:
            ny, nx = len(self.ys), len(self.xs)

            def flat(i, j):
                return i * nx + j

            idx, in1, in2, bx, by, wts = [], [], [], [], [], []
            for j in range(nx):          # bottom and top edges
                for i, s in ((0, 1), (ny - 1, -1)):
                    idx.append(flat(i, j))
                    in1.append(flat(i + s, j))
                    in2.append(flat(i + 2 * s, j))
                    bx.append(self.xs[j])
                    by.append(self.ys[i])
                    corner = j == 0 or j == nx - 1
                    wts.append(0.0 if corner else self.h)
            for i in range(1, ny - 1):   # left and right edges
                for j, s in ((0, 1), (nx - 1, -1)):
                    idx.append(flat(i, j))
                    in1.append(flat(i, j + s))
                    in2.append(flat(i, j + 2 * s))
                    bx.append(self.xs[j])
                    by.append(self.ys[i])
                    wts.append(self.h)
            self.nb = len(idx)
            self.bidx = np.array(idx, dtype=np.int64)
            self.bin1 = np.array(in1, dtype=np.int64)
            self.bin2 = np.array(in2, dtype=np.int64)
            self.bdry_x = np.array(bx)
            self.bdry_y = np.array(by)
            self.bdry_wts = np.array(wts)
            flat_c = self.c_nodes.reshape(-1)
            self.trace_cinv = 1.0 / flat_c[self.bidx]

    # -- helpers

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.nt + 1)

    def shape(self):
        if self.ndim == 1:
            return (len(self.xs),)
        return (len(self.ys), len(self.xs))

    def dvol_weights(self):
        """Trapezoid quadrature weights for integrals against dV_g."""
        if self.ndim == 1:
            w = np.full(len(self.xs), self.h)
            w[0] = w[-1] = 0.5 * self.h
            return w * self.c_nodes
        wx = np.full(len(self.xs), self.h)
        wx[0] = wx[-1] = 0.5 * self.h
        wy = np.full(len(self.ys), self.h)
        wy[0] = wy[-1] = 0.5 * self.h
        return np.outer(wy, wx) * self.c_nodes ** 2

    def time_weights(self):
        w = np.full(self.nt + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    def bdry_points(self):
        if self.ndim == 1:
            return self.bdry_x
        return np.stack([self.bdry_x, self.bdry_y], axis=1)

    def interior_mask(self):
        if self.ndim == 1:
            m = np.ones(len(self.xs), dtype=bool)
            m[[0, -1]] = False
            return m
        m = np.ones(self.shape(), dtype=bool)
        m[0, :] = m[-1, :] = False
        m[:, 0] = m[:, -1] = False
        return m


@dataclass
class Field:
    """Space-time table of values on a grid (levels 0..nt)."""
    values: np.ndarray
    grid: Grid
    metadata: dict = dataclass_field(default_factory=dict)

    def check_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise BlowupError(int(np.argmax(~np.isfinite(
                self.values.reshape(self.values.shape[0], -1)).any(axis=1))))

    def norm_l2(self):
        w = self.grid.dvol_weights()
        tw = self.grid.time_weights()
        v2 = np.abs(self.values) ** 2
        sp = (v2 * w).reshape(v2.shape[0], -1).sum(axis=1)
        return float(np.sqrt(np.sum(sp * tw)))


@dataclass
class BoundaryTrace:
    """Neumann trace on Sigma = Gamma x (0,T), sampled at grid levels."""
    values: np.ndarray          # (nt+1, nb)
    grid: Grid

    def norm_l2(self):
        tw = self.grid.time_weights()
        bw = self.grid.bdry_wts
        return float(np.sqrt(np.sum((np.abs(self.values) ** 2 * bw).sum(axis=1) * tw)))


@dataclass
class BoundaryData:
    """Dirichlet data on Sigma; `jet` holds exact t-derivatives at t=0."""
    values: np.ndarray          # (nt+1, nb)
    grid: Grid
    jet: Optional[np.ndarray] = None   # (m+1, nb)

    def __add__(self, other):
        return BoundaryData(self.values + other.values, self.grid)

    def __rmul__(self, a):
        return BoundaryData(a * self.values, self.grid)

    def norm_sup(self):
        return float(np.max(np.abs(self.values)))


@dataclass
class SemilinearSpec:
    """Coefficients of u_tt - Delta_g u + b u_t + f(x,t,u) = 0.

    f is specified through its Taylor data at u=0: q = f_u, f2 = f_uu,
    f3 = f_uuu (callables of (x[,y],t) or constants), or through a full
    callable fnl(x[,y],t,u) used by the Picard solver.
    """
    b: Optional[Callable] = None
    q: Optional[Callable] = None
    f2: object = None
    f3: object = None
    fnl: Optional[Callable] = None
    esupp: dict = dataclass_field(default_factory=dict)
    delta0: float = 0.1

    def has_nonlinearity(self):
        return self.fnl is not None or self.f2 is not None or self.f3 is not None

    def linear(self):
        return SemilinearSpec(b=self.b, q=self.q, delta0=self.delta0)


# ---------------------------------------------------------------------------
# coefficient sampling


def _coords(grid):
    if grid.ndim == 1:
        return (grid.xs,)
    X, Y = np.meshgrid(grid.xs, grid.ys)
    return (X, Y)


def sample_coeff(fn, grid, t):
    """Evaluate a coefficient callable/constant at one time level."""
    if fn is None:
        return None
    if np.isscalar(fn):
        return np.full(grid.shape(), float(fn))
    out = fn(*_coords(grid), t)
    return np.broadcast_to(np.asarray(out, dtype=float), grid.shape())


def _sample_block(fn, grid, levels, scale=1.0):
    """Stack coefficient samples over the given absolute levels."""
    if fn is None:
        return np.empty((0,) * (grid.ndim + 1))
    dt = grid.dt
    if np.isscalar(fn):
        return np.ascontiguousarray(
            np.full((len(levels),) + grid.shape(), float(fn) * scale))
    rows = [np.asarray(fn(*_coords(grid), n * dt), dtype=float) * scale
            for n in levels]
    return np.array(np.broadcast_to(np.stack(rows),
                                    (len(levels),) + grid.shape()),
                    dtype=float, order="C")


def _laplacian(grid, u):
    if grid.ndim == 1:
        out = np.zeros_like(u)
        out[1:-1] = (grid.wp[1:-1] * (u[2:] - u[1:-1])
                     - grid.wm[1:-1] * (u[1:-1] - u[:-2]))
        return out
    out = np.zeros_like(u)
    lap = (u[1:-1, 2:] + u[1:-1, :-2] + u[2:, 1:-1] + u[:-2, 1:-1]
           - 4.0 * u[1:-1, 1:-1]) / (grid.h * grid.h)
    if grid.inv_c2.shape[0] > 0:
        lap = grid.inv_c2[1:-1, 1:-1] * lap
    out[1:-1, 1:-1] = lap
    return out


def _raw_trace(grid, u):
    if grid.ndim == 1:
        return np.array([-3.0 * u[0] + 4.0 * u[1] - u[2],
                         3.0 * u[-1] - 4.0 * u[-2] + u[-3]])
    flat = u.reshape(-1)
    return 3.0 * flat[grid.bidx] - 4.0 * flat[grid.bin1] + flat[grid.bin2]


def _scale_trace(grid, raw):
    if grid.ndim == 1:
        return raw * (grid.trace_sign * grid.trace_cinv) / (2.0 * grid.h)
    return raw * grid.trace_cinv / (2.0 * grid.h)


# ---------------------------------------------------------------------------
# the propagation core


@dataclass
class SolveResult:
    trace: BoundaryTrace
    field: Optional[Field]
    final: tuple


def _resolve_bdry(bdry, grid, dtype):
    if bdry is None:
        return np.zeros((grid.nt + 1, grid.nb), dtype=dtype)
    if isinstance(bdry, BoundaryData):
        vals = bdry.values
    else:
        vals = np.asarray(bdry)
    if vals.shape != (grid.nt + 1, grid.nb):
        raise ConfigError(
            f"boundary data shape {vals.shape} != {(grid.nt + 1, grid.nb)}")
    return vals.astype(dtype, copy=False)


def propagate(grid, spec=None, *, bdry=None, u0=None, u1=None, src=None,
              start=0, stop=None, store="trace", slab=128, backend=None,
              use_nonlinearity=True):
    """March the leapfrog scheme over levels [start, stop].

    `src` may be None, a callable, or a full (nt+1, ...) array. Returns
    traces over the window (zeros outside); store="full" also returns the
    field (requires start=0, stop=nt).
    """
    spec = spec or SemilinearSpec()
    stop = grid.nt if stop is None else stop
    if stop <= start:
        raise ConfigError("empty propagation window")
    if store == "full" and (start != 0 or stop != grid.nt):
        raise ConfigError("full-field storage requires the full time window")

    src_is_array = src is not None and not callable(src)
    dtype = np.complex128 if (
        (isinstance(bdry, BoundaryData) and np.iscomplexobj(bdry.values))
        or (bdry is not None and not isinstance(bdry, BoundaryData)
            and np.iscomplexobj(bdry))
        or (u0 is not None and np.iscomplexobj(u0))
        or (src_is_array and np.iscomplexobj(src))) else np.float64
    bc = _resolve_bdry(bdry, grid, dtype)
    shape = grid.shape()
    dt, nt = grid.dt, grid.nt

    u_curr = np.zeros(shape, dtype) if u0 is None else \
        np.array(u0, dtype=dtype, order="C")
    v0 = np.zeros(shape, dtype) if u1 is None else \
        np.array(u1, dtype=dtype, order="C")

    kern = kernels.get(backend)
    f2 = spec.f2 if use_nonlinearity else None
    f3 = spec.f3 if use_nonlinearity else None

    def src_at(level):
        if src is None:
            return None
        if src_is_array:
            return np.asarray(src[level])
        return np.asarray(src(*_coords(grid), level * dt))

    # level `start`
    if grid.ndim == 1:
        u_curr[0], u_curr[-1] = bc[start]
    else:
        u_curr.reshape(-1)[grid.bidx] = bc[start]

    traces = np.zeros((nt + 1, grid.nb), dtype)
    traces[start] = _scale_trace(grid, _raw_trace(grid, u_curr))

    full = None
    if store == "full":
        full = np.zeros((nt + 1,) + shape, dtype)
        full[start] = u_curr

    # first step by Taylor expansion at t_start
    t0 = start * dt
    rhs = _laplacian(grid, u_curr)
    q0 = sample_coeff(spec.q, grid, t0)
    if q0 is not None:
        rhs = rhs - q0 * u_curr
    f20 = sample_coeff(f2, grid, t0)
    if f20 is not None:
        rhs = rhs - f20 * (0.5 * u_curr * u_curr)
    f30 = sample_coeff(f3, grid, t0)
    if f30 is not None:
        rhs = rhs - f30 * ((1.0 / 6.0) * u_curr * u_curr * u_curr)
    b0 = sample_coeff(spec.b, grid, t0)
    if b0 is not None:
        rhs = rhs - b0 * v0
    s0 = src_at(start)
    if s0 is not None:
        rhs = rhs + s0
    u_next = u_curr + dt * v0 + (0.5 * dt * dt) * rhs
    if grid.ndim == 1:
        u_next[0], u_next[-1] = bc[start + 1]
    else:
        u_next.reshape(-1)[grid.bidx] = bc[start + 1]
    if not np.all(np.isfinite(u_next)):
        raise BlowupError(start + 1)
    traces[start + 1] = _scale_trace(grid, _raw_trace(grid, u_next))
    if full is not None:
        full[start + 1] = u_next

    u_prev, u_curr = u_curr, np.ascontiguousarray(u_next)

    # slabs of kernel steps: levels start+2 .. stop
    level = start + 1   # latest computed level
    empty = np.empty((0,) * (grid.ndim + 1))
    while level < stop:
        K = min(slab, stop - level)
        coeff_levels = range(level, level + K)
        hb = _sample_block(spec.b, grid, coeff_levels, scale=0.5 * dt)
        qb = _sample_block(spec.q, grid, coeff_levels)
        f2b = _sample_block(f2, grid, coeff_levels)
        f3b = _sample_block(f3, grid, coeff_levels)
        if src is None:
            sb = np.empty((0,) * (grid.ndim + 1), dtype)
        elif src_is_array:
            sb = np.ascontiguousarray(src[level:level + K], dtype=dtype)
        else:
            sb = np.ascontiguousarray(
                np.stack([src_at(n) for n in coeff_levels]), dtype=dtype)
        bcb = np.ascontiguousarray(bc[level + 1:level + K + 1])
        ux = np.zeros((K, grid.nb), dtype)
        if full is not None:
            fo = full[level + 1:level + K + 1]
            if not fo.flags.c_contiguous:
                fo = np.ascontiguousarray(fo)
        else:
            fo = np.empty((0,) + shape, dtype)
        if grid.ndim == 1:
            bad = kern.advance_1d(u_prev, u_curr, grid.wp, grid.wm,
                                  hb, qb, f2b, f3b, sb, bcb, dt, ux, fo)
        else:
            bad = kern.advance_2d(u_prev, u_curr, grid.inv_c2,
                                  hb, qb, f2b, f3b, sb, bcb,
                                  grid.bidx, grid.bin1, grid.bin2,
                                  dt, grid.h, ux, fo)
        if bad >= 0:
            raise BlowupError(level + 1 + bad)
        traces[level + 1:level + K + 1] = _scale_trace(grid, ux)
        if full is not None and fo.base is not full:
            full[level + 1:level + K + 1] = fo
        level += K

    trace = BoundaryTrace(traces, grid)
    fld = Field(full, grid) if full is not None else None
    return SolveResult(trace=trace, field=fld, final=(u_prev, u_curr))


# ---------------------------------------------------------------------------
# spec-level operations


def sample_boundary_data(fn, grid, jet=None):
    """Sample a callable h(t) -> (nb,) or h(points, t) on the grid levels."""
    vals = np.stack([np.broadcast_to(np.asarray(fn(t)), (grid.nb,))
                     for t in grid.times])
    return BoundaryData(np.ascontiguousarray(vals), grid, jet=jet)


def _reversed_bdry(bdry, grid, dtype):
    vals = _resolve_bdry(bdry, grid, dtype)
    return vals[::-1].copy()


def _reverse_coeff(fn, T):
    if fn is None or np.isscalar(fn):
        return fn
    return lambda *args: fn(*args[:-1], T - args[-1])


def _negate_coeff(fn):
    if fn is None:
        return None
    if np.isscalar(fn):
        return -fn
    return lambda *args: -np.asarray(fn(*args))


def _db_dt(fn, dt):
    """Centered time derivative of a coefficient callable."""
    if fn is None or np.isscalar(fn):
        return None
    eps = dt

    def bt(*args):
        t = args[-1]
        return (np.asarray(fn(*args[:-1], t + eps))
                - np.asarray(fn(*args[:-1], t - eps))) / (2.0 * eps)
    return bt


def solve_linear(spec, grid, *, F=None, h_bdry=None, cauchy=(None, None),
                 direction="forward", store="full", backend=None):
    """Linear solve of u_tt - Delta_g u + b u_t + q u = F.

    direction="backward" treats `cauchy` as terminal data at t=T and runs
    the reversed-time problem with the damping sign flipped.
    """
    u0, u1 = cauchy
    if direction == "forward":
        res = propagate(grid, spec, bdry=h_bdry, u0=u0, u1=u1, src=F,
                        store=store, backend=backend, use_nonlinearity=False)
        fld = res.field if res.field is not None else Field(None, grid)
        fld.metadata.update(kind="linear", trace=res.trace)
        return fld
    # backward: tau = T - t
    T = grid.T
    rspec = SemilinearSpec(
        b=_negate_coeff(_reverse_coeff(spec.b, T)),
        q=_reverse_coeff(spec.q, T))
    dtype = np.complex128 if (
        (h_bdry is not None and np.iscomplexobj(
            h_bdry.values if isinstance(h_bdry, BoundaryData) else h_bdry))
        or (F is not None and not callable(F) and np.iscomplexobj(F))
        or (u0 is not None and np.iscomplexobj(u0))) else np.float64
    rb = _reversed_bdry(h_bdry, grid, dtype) if h_bdry is not None else None
    if F is None:
        rF = None
    elif callable(F):
        rF = _reverse_coeff(F, T)
    else:
        rF = np.asarray(F)[::-1].copy()
    res = propagate(grid, rspec, bdry=rb, u0=u0, u1=u1, src=rF,
                    store=store, backend=backend, use_nonlinearity=False)
    trace = BoundaryTrace(res.trace.values[::-1].copy(), grid)
    fld = Field(res.field.values[::-1].copy(), grid) if res.field is not None \
        else Field(None, grid)
    fld.metadata.update(kind="linear-backward", trace=trace)
    return fld


def solve_adjoint(spec, grid, *, source=None, terminal=(None, None),
                  store="full", h_bdry=None, backend=None):
    """Solve L* v = v_tt - Delta_g v - b v_t + (q + b_t) v = source,
    with v(T) = terminal[0], v_t(T) = terminal[1]."""
    bt = _db_dt(spec.b, grid.dt)
    q, b = spec.q, spec.b

    if bt is None:
        q_adj = q
    elif q is None:
        q_adj = bt
    elif np.isscalar(q):
        q_adj = lambda *args: q + bt(*args)
    else:
        q_adj = lambda *args: np.asarray(q(*args)) + bt(*args)
    aspec = SemilinearSpec(b=_negate_coeff(b), q=q_adj)
    v0, v1 = terminal
    if v1 is not None:
        v1 = -np.asarray(v1)  # d/dtau = -d/dt
    return solve_linear(aspec, grid, F=source, h_bdry=h_bdry,
                        cauchy=(v0, v1), direction="backward",
                        store=store, backend=backend)


def neumann_trace(field, grid=None):
    """Outward normal derivative on Sigma by one-sided differences."""
    grid = grid or field.grid
    vals = field.values if isinstance(field, Field) else field
    out = np.zeros((vals.shape[0], grid.nb), dtype=vals.dtype)
    for n in range(vals.shape[0]):
        out[n] = _scale_trace(grid, _raw_trace(grid, vals[n]))
    return BoundaryTrace(out, grid)


def _nonlinear_part(spec, grid, u_vals):
    """N(u) = f(x,t,u) - q u evaluated on a full space-time table."""
    out = np.zeros_like(u_vals)
    ts = grid.times
    if spec.fnl is not None:
        q = spec.q
        for n, t in enumerate(ts):
            fu = spec.fnl(*_coords(grid), t, u_vals[n])
            out[n] = fu
            qv = sample_coeff(q, grid, t)
            if qv is not None:
                out[n] -= qv * u_vals[n]
        return out
    for n, t in enumerate(ts):
        acc = 0.0
        f2v = sample_coeff(spec.f2, grid, t)
        if f2v is not None:
            acc = acc + f2v * (0.5 * u_vals[n] * u_vals[n])
        f3v = sample_coeff(spec.f3, grid, t)
        if f3v is not None:
            acc = acc + f3v * ((1.0 / 6.0) * u_vals[n] ** 3)
        out[n] = acc
    return out


def solve_semilinear(spec, grid, *, h_bdry=None, u0=None, u1=None,
                     tol=1e-10, max_iter=25, backend=None):
    """Picard fixed-point solve of the semilinear system (small data).

    Splits u = v + w: v carries the data through the linear part, w is the
    fixed point of the zero-data problem driven by the nonlinearity.
    Records per-iteration contraction ratios in metadata.
    """
    v = solve_linear(spec, grid, h_bdry=h_bdry, cauchy=(u0, u1),
                     store="full", backend=backend)
    if not spec.has_nonlinearity():
        v.metadata.update(kind="semilinear", iterations=1, ratios=[],
                          residual=0.0)
        return v
    w = np.zeros_like(v.values)
    prev_delta = None
    ratios = []
    residual = np.inf
    grow = 0
    for it in range(1, max_iter + 1):
        try:
            src = -_nonlinear_part(spec, grid, v.values + w)
            w_new = solve_linear(SemilinearSpec(b=spec.b, q=spec.q), grid,
                                 F=src, store="full", backend=backend).values
            delta = float(np.sqrt(np.mean(np.abs(w_new - w) ** 2)))
        except BlowupError:
            raise ContractionFailureError(
                f"Picard iterate blew up at iteration {it}; data too large")
        if not np.isfinite(delta):
            raise ContractionFailureError(
                f"Picard iterate diverged at iteration {it}; data too large")
        if prev_delta is not None and prev_delta > 0:
            r = delta / prev_delta
            ratios.append(r)
            grow = grow + 1 if r >= 1.0 else 0
            if grow >= 3:
                raise ContractionFailureError(
                    "contraction ratios >= 1 for 3 consecutive iterations; "
                    "data too large for the small-data solver")
        prev_delta = delta
        w = w_new
        residual = delta
        scale = max(1.0, float(np.max(np.abs(v.values))))
        if delta < tol * scale:
            break
    else:
        raise ContractionFailureError(
            f"Picard did not reach tol={tol} in {max_iter} iterations "
            f"(last residual {residual:.3e})")
    out = Field(v.values + w, grid)
    out.metadata.update(kind="semilinear", iterations=it, ratios=ratios,
                        residual=residual,
                        trace=neumann_trace(out, grid))
    return out


# ---------------------------------------------------------------------------
# boundary data synthesis and compatibility


def _fd_lap(fn_x, grid, x, order=4):
    """Laplace-Beltrami of a spatial callable at points x, by central FD."""
    step = 1e-3 if order == 4 else 1e-4

    if grid.ndim == 1:
        c = grid.c

        def d2(f, x0, a):
            return (-f(x0 + 2 * a) + 16 * f(x0 + a) - 30 * f(x0)
                    + 16 * f(x0 - a) - f(x0 - 2 * a)) / (12 * a * a)

        def d1(f, x0, a):
            return (-f(x0 + 2 * a) + 8 * f(x0 + a)
                    - 8 * f(x0 - a) + f(x0 - 2 * a)) / (12 * a)

        x = np.asarray(x, dtype=float)
        if c is None:
            return d2(fn_x, x, step)
        # c^{-1} d/dx (c^{-1} du/dx)
        inner = lambda y: d1(fn_x, y, step) / c(y)
        return d1(inner, x, step) / c(x)

    cx = grid.c

    def lap2(f, p, a):
        x0, y0 = p
        return (f(x0 + a, y0) + f(x0 - a, y0) + f(x0, y0 + a)
                + f(x0, y0 - a) - 4 * f(x0, y0)) / (a * a)

    pts = np.asarray(x, dtype=float).reshape(-1, 2)
    out = np.array([lap2(fn_x, p, step) for p in pts])
    if cx is not None:
        out = out / cx(pts[:, 0], pts[:, 1]) ** 2
    return out


def _f_of_mu(spec, x_pts, t, mu_vals, grid):
    """f(x,t,mu) from the spec's Taylor data / full callable."""
    if spec.fnl is not None:
        return np.asarray(spec.fnl(*np.atleast_2d(x_pts).T, t, mu_vals)) \
            if grid.ndim == 2 else np.asarray(spec.fnl(x_pts, t, mu_vals))
    out = np.zeros_like(mu_vals)
    for fn, power, fact in ((spec.q, 1, 1.0), (spec.f2, 2, 0.5),
                            (spec.f3, 3, 1.0 / 6.0)):
        if fn is None:
            continue
        if np.isscalar(fn):
            coef = float(fn)
        elif grid.ndim == 1:
            coef = np.asarray(fn(x_pts, t))
        else:
            coef = np.asarray(fn(x_pts[:, 0], x_pts[:, 1], t))
        out = out + coef * fact * mu_vals ** power
    return out


def boundary_data_from_mu(mu, spec, m, grid):
    """Dirichlet data h = sum_k (t^k/k!) d_t^k u(x,0) restricted to Gamma.

    Uses the time-derivative recursion for u_tt = Delta_g u - b u_t - f;
    requires b(x,0) = 0 and u_t(x,0) = 0. Supported to order m <= 4.
    """
    if m > 4:
        raise ConfigError("boundary_data_from_mu supports orders m <= 4")
    pts = grid.bdry_points()
    if grid.ndim == 1:
        mu_b = np.asarray(mu(pts), dtype=float)
    else:
        mu_b = np.asarray(mu(pts[:, 0], pts[:, 1]), dtype=float)

    dt_fd = 1e-4 * grid.T

    def b_at(t):
        if spec.b is None:
            return np.zeros(grid.nb)
        if grid.ndim == 1:
            return np.asarray(spec.b(pts, t), dtype=float)
        return np.asarray(spec.b(pts[:, 0], pts[:, 1], t), dtype=float)

    if np.max(np.abs(b_at(0.0))) > 1e-10:
        raise ConfigError("boundary_data_from_mu requires b(x,0) = 0")

    def f_at(t):
        return _f_of_mu(spec, pts, t, mu_b, grid)

    jet = np.zeros((m + 1, grid.nb))
    jet[0] = mu_b
    if m >= 2:
        lap_mu = _fd_lap(mu, grid, pts)
        jet[2] = lap_mu - f_at(0.0)
    if m >= 3:
        # d/dt f(x,t,mu) at t=0 (explicit time dependence only)
        jet[3] = -(f_at(dt_fd) - f_at(-dt_fd)) / (2 * dt_fd)
    if m >= 4:
        t2_interior = _make_t2_callable(mu, spec, grid)
        lap_t2 = _fd_lap(t2_interior, grid, pts)
        bt0 = (b_at(dt_fd) - b_at(-dt_fd)) / (2 * dt_fd)
        ftt0 = (f_at(dt_fd) - 2 * f_at(0.0) + f_at(-dt_fd)) / dt_fd ** 2
        fu0 = _dfu_at(spec, pts, mu_b, grid)
        jet[4] = lap_t2 - 2.0 * bt0 * jet[2] - ftt0 - fu0 * jet[2]

    ts = grid.times
    vals = np.zeros((grid.nt + 1, grid.nb))
    fact = 1.0
    for k in range(m + 1):
        if k > 0:
            fact *= k
        vals += np.outer(ts ** k / fact, np.ones(grid.nb)) * jet[k][None, :]
    return BoundaryData(np.ascontiguousarray(vals), grid, jet=jet)


def _make_t2_callable(mu, spec, grid):
    """x -> Delta_g mu - f(x, mu) as a callable for nested FD."""
    if grid.ndim == 1:
        def t2(x):
            x_arr = np.atleast_1d(np.asarray(x, dtype=float))
            lap = _fd_lap(mu, grid, x_arr)
            muv = np.asarray(mu(x_arr), dtype=float)
            val = lap - _f_of_mu(spec, x_arr, 0.0, muv, grid)
            return val if np.ndim(x) else float(val[0])
        return t2

    def t2(x, y):
        p = np.stack(np.broadcast_arrays(np.asarray(x, dtype=float),
                                         np.asarray(y, dtype=float)),
                     axis=-1).reshape(-1, 2)
        lap = _fd_lap(mu, grid, p)
        muv = np.asarray(mu(p[:, 0], p[:, 1]), dtype=float)
        val = lap - _f_of_mu(spec, p, 0.0, muv, grid)
        return val.reshape(np.broadcast(x, y).shape) if np.ndim(x) else float(val[0])
    return t2


def _dfu_at(spec, pts, mu_vals, grid):
    """f_u(x, 0, mu) from Taylor data / FD on the full callable."""
    if spec.fnl is not None:
        eps = 1e-6 * max(1.0, float(np.max(np.abs(mu_vals))))
        if grid.ndim == 1:
            return (np.asarray(spec.fnl(pts, 0.0, mu_vals + eps))
                    - np.asarray(spec.fnl(pts, 0.0, mu_vals - eps))) / (2 * eps)
        return (np.asarray(spec.fnl(pts[:, 0], pts[:, 1], 0.0, mu_vals + eps))
                - np.asarray(spec.fnl(pts[:, 0], pts[:, 1], 0.0,
                                      mu_vals - eps))) / (2 * eps)
    out = np.zeros_like(mu_vals)
    for fn, power, fact in ((spec.q, 0, 1.0), (spec.f2, 1, 1.0),
                            (spec.f3, 2, 0.5)):
        if fn is None:
            continue
        if np.isscalar(fn):
            coef = float(fn)
        elif grid.ndim == 1:
            coef = np.asarray(fn(pts, 0.0))
        else:
            coef = np.asarray(fn(pts[:, 0], pts[:, 1], 0.0))
        out = out + coef * fact * mu_vals ** power
    return out


@dataclass
class CompatReport:
    passed: bool
    first_violation: Optional[int]
    residuals: list


def check_compatibility(u0, u1, h, F, m, grid, tol=1e-8):
    """Verify the compatibility conditions of the plain wave system
    u_tt = Delta_g u + F against the data jet, up to order m <= 4."""
    if m > 4:
        raise ConfigError("check_compatibility supports orders m <= 4")
    if h.jet is None or h.jet.shape[0] < m + 1:
        raise ConfigError("boundary data must carry a jet up to order m")
    pts = grid.bdry_points()

    def beval(fn):
        if fn is None:
            return np.zeros(grid.nb)
        if grid.ndim == 1:
            return np.asarray(fn(pts), dtype=float)
        return np.asarray(fn(pts[:, 0], pts[:, 1]), dtype=float)

    def Feval(t):
        if F is None:
            return np.zeros(grid.nb)
        if grid.ndim == 1:
            return np.asarray(F(pts, t), dtype=float)
        return np.asarray(F(pts[:, 0], pts[:, 1], t), dtype=float)

    dt_fd = 1e-4 * grid.T
    residuals = []
    expected = [beval(u0)]
    if m >= 1:
        expected.append(beval(u1))
    if m >= 2:
        expected.append(_fd_lap(u0, grid, pts) + Feval(0.0))
    if m >= 3:
        Ft0 = (Feval(dt_fd) - Feval(-dt_fd)) / (2 * dt_fd)
        expected.append(_fd_lap(u1, grid, pts) + Ft0)
    if m >= 4:
        # order 4: Delta_g(Delta_g u0 + F(0)) + F_tt(0)
        t2 = _make_t2_callable(u0, SemilinearSpec(), grid)   # Delta_g u0
        if F is None:
            lap_inner = _fd_lap(t2, grid, pts)
            Ftt0 = np.zeros(grid.nb)
        else:
            if grid.ndim == 1:
                inner = lambda x: t2(x) + np.asarray(F(x, 0.0))
            else:
                inner = lambda x, y: t2(x, y) + np.asarray(F(x, y, 0.0))
            lap_inner = _fd_lap(inner, grid, pts)
            Ftt0 = (Feval(dt_fd) - 2 * Feval(0.0) + Feval(-dt_fd)) / dt_fd ** 2
        expected.append(lap_inner + Ftt0)

    first = None
    for k, exp in enumerate(expected):
        r = float(np.max(np.abs(h.jet[k] - exp)))
        residuals.append(r)
        if r > tol and first is None:
            first = k
    return CompatReport(passed=first is None, first_violation=first,
                        residuals=residuals)


def discrete_energy(field, grid=None):
    """(1/2) int (u_t^2 + |Du|_g^2) dV_g per interior time level."""
    grid = grid or field.grid
    u = field.values if isinstance(field, Field) else field
    dt = grid.dt
    ut = (u[2:] - u[:-2]) / (2 * dt)
    if grid.ndim == 1:
        ch = np.ones(len(grid.xs) - 1) if grid.c is None else \
            np.asarray(grid.c(0.5 * (grid.xs[:-1] + grid.xs[1:])))
        ux = (u[:, 1:] - u[:, :-1]) / grid.h
        grad2 = ((np.abs(ux) ** 2) * (grid.h / ch)).sum(axis=1)
        w = grid.dvol_weights()
        kin = ((np.abs(ut) ** 2) * w).sum(axis=1)
        return 0.5 * (kin + grad2[1:-1])
    w = grid.dvol_weights()
    kin = ((np.abs(ut) ** 2) * w).reshape(ut.shape[0], -1).sum(axis=1)
    ux = (u[:, :, 1:] - u[:, :, :-1]) / grid.h
    uy = (u[:, 1:, :] - u[:, :-1, :]) / grid.h
    g2 = (np.abs(ux) ** 2).reshape(u.shape[0], -1).sum(axis=1) * grid.h ** 2 \
        + (np.abs(uy) ** 2).reshape(u.shape[0], -1).sum(axis=1) * grid.h ** 2
    return 0.5 * (kin + g2[1:-1])
