"""Light-ray / geodesic ray transforms and their regularized inversion.

Rays are maximal null geodesics beta(r) = (r + s, gamma(r)). The forward
transform integrates a space-time function along each ray by composite
Simpson quadrature; the discrete operator scatters the quadrature onto
bilinear hats over a space-time mesh, and inversion is Tikhonov-regularized
least squares (conjugate gradients on the normal equations with a discrete
gradient penalty).
"""

import warnings
from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, CoverageError, InversionError
from .geometry import NullGeodesic, trace_geodesic
from . import io as bio


@dataclass
class Mesh1p1:
    """Uniform space-time mesh for 1+1D reconstructions."""
    xs: np.ndarray
    ts: np.ndarray

    @property
    def shape(self):
        return (len(self.ts), len(self.xs))

    @property
    def hx(self):
        return float(self.xs[1] - self.xs[0])

    @property
    def ht(self):
        return float(self.ts[1] - self.ts[0])

    def node_weights(self):
        wx = np.full(len(self.xs), self.hx)
        wx[0] = wx[-1] = 0.5 * self.hx
        wt = np.full(len(self.ts), self.ht)
        wt[0] = wt[-1] = 0.5 * self.ht
        return np.outer(wt, wx)


@dataclass
class RayFamily:
    """Maximal null geodesics parametrized by (s, x, v) in R x d_-SOmega."""
    rays: list
    metric: object
    meta: dict = dataclass_field(default_factory=dict)

    def __len__(self):
        return len(self.rays)

    def csv_rows(self, values=None):
        rows = []
        for i, ray in enumerate(self.rays):
            g = ray.geodesic
            val = float(np.real(values[i])) if values is not None else 0.0
            entry = g.x[0]
            v = g.v[0]
            rows.append((i, float(ray.t_offset),
                         *[float(c) for c in entry],
                         *[float(c) for c in v], val))
        return rows


def make_family_1d(metric, T, n_offsets, margin, directions=(1.0, -1.0),
                   step=None):
    """Tensor family: boundary endpoints x inward directions x time offsets.

    Offsets span [margin, T - tau - margin] so every tube of transverse
    reach `margin` stays inside (0, T). Deterministic ordering.
    """
    if metric.ndim != 1:
        raise ConfigError("make_family_1d needs a 1D metric")
    x0, x1 = metric.domain[1], metric.domain[2]
    rays = []
    for direction in directions:
        entry = np.array([x0 if direction > 0 else x1])
        v = metric.unit_vector(entry, np.array([direction]))
        geo = trace_geodesic(metric, entry, v, step=step)
        t_hi = T - geo.tau - margin
        if t_hi <= margin:
            raise ConfigError("time horizon too short for the ray family")
        for s in np.linspace(margin, t_hi, n_offsets):
            rays.append(NullGeodesic(geo, t_offset=float(s)))
    return RayFamily(rays=rays, metric=metric,
                     meta={"n_offsets": n_offsets, "margin": margin})


def _ray_nodes(ray, n_quad):
    """Simpson nodes/weights along a ray over [0, tau]."""
    m = max(2, n_quad // 2)
    n = 2 * m + 1
    rs = np.linspace(0.0, ray.tau, n)
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= ray.tau / (3.0 * (n - 1))
    xs, _ = ray.geodesic.interpolate(rs)
    ts = rs + ray.t_offset
    return ts, xs, w


def light_ray_transform(fn, family, n_quad=200):
    """G f (s, x, v) = int_0^tau f(r + s, gamma(r)) dr per ray.

    fn is a callable with the coefficient signature f(x, t) (1D metric) or
    f(x, y, t); the time-independent geodesic transform is the special case
    of a time-independent fn.
    """
    out = np.empty(len(family), dtype=complex)
    for i, ray in enumerate(family.rays):
        ts, xs, w = _ray_nodes(ray, n_quad)
        if family.metric.ndim == 1:
            vals = np.asarray(fn(xs[:, 0], ts))
        else:
            vals = np.asarray(fn(xs[:, 0], xs[:, 1], ts))
        out[i] = np.sum(w * vals)
    if np.max(np.abs(out.imag)) == 0.0:
        return out.real
    return out


@dataclass
class RayOperator:
    """Sparse row-per-ray quadrature operator onto mesh nodes."""
    A_full: sp.csr_matrix
    mesh: Mesh1p1
    mask: np.ndarray           # boolean over mesh nodes
    mask_idx: np.ndarray
    family: RayFamily

    @property
    def A(self):
        return self.A_full[:, self.mask_idx]

    def row_sums(self):
        return np.asarray(self.A_full.sum(axis=1)).ravel()

    def coverage(self):
        """Per-node count of rays with nonzero weight."""
        counts = np.asarray((self.A_full != 0).sum(axis=0)).ravel()
        return counts.reshape(self.mesh.shape)

    def apply(self, field_masked):
        return self.A @ field_masked

    def rmatvec(self, resid):
        return self.A.T @ resid

    def embed(self, field_masked):
        out = np.zeros(np.prod(self.mesh.shape))
        out[self.mask_idx] = field_masked
        return out.reshape(self.mesh.shape)

    def save(self, path):
        bio.write_field_binary(path + "_data", self.A_full.data,
                               kind="rayop-data")
        bio.write_field_binary(path + "_indices",
                               self.A_full.indices.astype(float),
                               kind="rayop-indices")
        bio.write_field_binary(path + "_indptr",
                               self.A_full.indptr.astype(float),
                               kind="rayop-indptr")


def build_ray_operator(mesh, family, mask, n_quad=None):
    """Assemble the discrete transform: bilinear hats at Simpson nodes.

    Columns outside the mask are dropped in the apply path; the stored full
    rows keep the row-sum = ray-length identity intact.
    """
    nt, nx = mesh.shape
    n_nodes = nt * nx
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != n_nodes:
        raise ConfigError("mask shape does not match the mesh")
    if n_quad is None:
        n_quad = 4 * max(nt, nx)
    rows, cols, vals = [], [], []
    for i, ray in enumerate(family.rays):
        ts, xs, w = _ray_nodes(ray, n_quad)
        ix = np.clip(np.searchsorted(mesh.xs, xs[:, 0]) - 1, 0, nx - 2)
        it = np.clip(np.searchsorted(mesh.ts, ts) - 1, 0, nt - 2)
        fx = (xs[:, 0] - mesh.xs[ix]) / mesh.hx
        ft = (ts - mesh.ts[it]) / mesh.ht
        fx = np.clip(fx, 0.0, 1.0)
        ft = np.clip(ft, 0.0, 1.0)
        for dt_, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
            wgt = w * (ft if dt_ else 1 - ft) * (fx if dx_ else 1 - fx)
            node = (it + dt_) * nx + (ix + dx_)
            rows.append(np.full(len(node), i))
            cols.append(node)
            vals.append(wgt)
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(family), n_nodes)).tocsr()
    op = RayOperator(A_full=A, mesh=mesh, mask=mask,
                     mask_idx=np.flatnonzero(mask), family=family)
    cov = op.coverage().reshape(-1)[op.mask_idx]
    if cov.size and cov.min() < 1:
        worst = op.mask_idx[int(np.argmin(cov))]
        wt, wx = divmod(worst, nx)
        raise CoverageError(
            f"masked node (t={mesh.ts[wt]:.3f}, x={mesh.xs[wx]:.3f}) is "
            f"covered by no ray")
    if cov.size and cov.min() < 4:
        warnings.warn(f"minimum mask coverage is {int(cov.min())} rays "
                      "(< 4); reconstruction may be poorly constrained")
    return op


def _gradient_matrix(mesh, mask_idx):
    """Forward-difference gradient rows between adjacent masked nodes."""
    nt, nx = mesh.shape
    col_of = -np.ones(nt * nx, dtype=np.int64)
    col_of[mask_idx] = np.arange(len(mask_idx))
    rows, cols, vals = [], [], []
    r = 0
    for node in mask_idx:
        it, ix = divmod(node, nx)
        for nbr, hh in ((node + 1, mesh.hx) if ix + 1 < nx else (None, None),
                        (node + nx, mesh.ht) if it + 1 < nt else (None, None)):
            if nbr is None or col_of[nbr] < 0:
                continue
            rows += [r, r]
            cols += [col_of[node], col_of[nbr]]
            vals += [-1.0 / hh, 1.0 / hh]
            r += 1
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(r, len(mask_idx))).tocsr()


@dataclass
class InversionReport:
    lambda_reg: float
    iterations: int
    residual: float
    residual_history: list
    rel_change: float


def invert_ray_transform(op, data, lambda_reg=1e-3, tol=1e-9, max_iter=600):
    """argmin ||A f - data||^2 + lambda ||grad f||^2 over the masked nodes.

    Conjugate gradients on the normal equations; returns the field embedded
    on the full mesh (zero outside the mask) and an InversionReport.
    """
    data = np.asarray(data, dtype=float)
    if data.shape[0] != len(op.family):
        raise ConfigError("data length must equal the ray count")
    if lambda_reg < 0:
        raise ConfigError("lambda_reg must be >= 0")
    A = op.A
    L = _gradient_matrix(op.mesh, op.mask_idx)

    def normal_op(v):
        return A.T @ (A @ v) + lambda_reg * (L.T @ (L @ v))

    b = A.T @ data
    x = np.zeros(A.shape[1])
    r = b - normal_op(x)
    p = r.copy()
    rs = float(r @ r)
    b_norm = float(np.sqrt(b @ b)) or 1.0
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        Ap = normal_op(p)
        alpha = rs / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        history.append(np.sqrt(rs_new) / b_norm)
        if np.sqrt(rs_new) < tol * b_norm:
            rs = rs_new
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    else:
        raise InversionError(
            f"CG did not converge in {max_iter} iterations "
            f"(relative residual {history[-1]:.3e})", history)
    resid = float(np.linalg.norm(A @ x - data))
    report = InversionReport(lambda_reg=lambda_reg, iterations=it,
                             residual=resid, residual_history=history,
                             rel_change=history[-1] if history else 0.0)
    return op.embed(x), report


def discrepancy_sweep(op, data, lambdas=None):
    """5-point sweep of lambda_reg; returns (best_lambda, table).

    Picks the lambda whose data residual is closest to the smallest
    residual times a safety factor (noise-robust default when no noise
    estimate is available).
    """
    if lambdas is None:
        lambdas = np.logspace(-5, -1, 5)
    table = []
    for lam in lambdas:
        _, rep = invert_ray_transform(op, data, lambda_reg=float(lam))
        table.append((float(lam), rep.residual))
    resids = np.array([t[1] for t in table])
    target = 1.2 * resids.min()
    best = table[int(np.argmin(np.abs(resids - target)))][0]
    return best, table
