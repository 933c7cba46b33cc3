"""Approximate Gaussian beams along null geodesics.

The quadratic phase comes from the linear (Z, Y) system equivalent to the
matrix Riccati equation; the leading amplitude is (det Y)^{-1/2} times a
damping exponential. Fields are evaluated through the Fermi chart and cut
off smoothly at transverse radius delta'.
"""

from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np

from .errors import (ConfigError, DegenerateRiccatiError, ResolutionError,
                     StepSizeError)

SQRT2 = np.sqrt(2.0)


def smooth_cutoff(rho):
    """C^2 profile: 1 for rho <= 1/2, 0 for rho >= 1, quintic blend between."""
    rho = np.abs(np.asarray(rho, dtype=float))
    t = np.clip(2.0 * rho - 1.0, 0.0, 1.0)
    s = t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
    return 1.0 - s


def transverse_matrix_A(n_trans):
    """Constant matrix A: A_11 = 0, A_ii = 2 for i >= 2."""
    A = np.zeros((n_trans, n_trans))
    for i in range(1, n_trans):
        A[i, i] = 2.0
    return A


@dataclass
class RiccatiSolution:
    """Samples of H = Z Y^{-1} along the beam axis."""
    chart: object
    z0: np.ndarray
    H: np.ndarray            # (n, k, k) complex
    Y: np.ndarray
    Z: np.ndarray
    H0: np.ndarray
    A: np.ndarray
    anchor: float
    detY: np.ndarray         # with continuously tracked argument
    detY_arg: np.ndarray     # unwrapped argument of det Y

    def conservation_error(self):
        """Relative drift of det(Im H) |det Y|^2 along the axis."""
        target = np.linalg.det(self.H0.imag)
        vals = np.array([np.linalg.det(self.H[i].imag)
                         * abs(np.linalg.det(self.Y[i])) ** 2
                         for i in range(len(self.z0))])
        return float(np.max(np.abs(vals - target) / abs(target)))

    def symmetry_error(self):
        return float(max(np.max(np.abs(h - h.T)) for h in self.H))

    def min_imag_eig(self):
        return float(min(np.linalg.eigvalsh(h.imag).min() for h in self.H))

    _B_cache: np.ndarray = None
    _Hp_cache: np.ndarray = None

    def H_prime(self, i):
        """dH/dz0 at sample i from the Riccati equation itself."""
        B = self._B_cache[i]
        H = self.H[i]
        return -B - H @ self.A @ H

    def _Hp(self):
        if self._Hp_cache is None:
            self._Hp_cache = np.array(
                [self.H_prime(i) for i in range(len(self.z0))])
        return self._Hp_cache

    def interp_H(self, z0):
        """Cubic Hermite interpolation of H (uses exact dH/dz0)."""
        z0 = np.atleast_1d(np.asarray(z0, dtype=float))
        n = len(self.z0)
        idx = np.clip(np.searchsorted(self.z0, z0) - 1, 0, n - 2)
        h = self.z0[idx + 1] - self.z0[idx]
        t = (z0 - self.z0[idx]) / h
        Hp = self._Hp()
        h00 = ((1 + 2 * t) * (1 - t) ** 2)[:, None, None]
        h10 = (t * (1 - t) ** 2)[:, None, None]
        h01 = (t * t * (3 - 2 * t))[:, None, None]
        h11 = (t * t * (t - 1))[:, None, None]
        hh = h[:, None, None]
        return (h00 * self.H[idx] + h10 * hh * Hp[idx]
                + h01 * self.H[idx + 1] + h11 * hh * Hp[idx + 1])


def solve_riccati(chart, H0=None, z0_grid=None, anchor=None, n_sub=1):
    """Integrate dZ/dz0 = -B Y, dY/dz0 = A Z with Y = I, Z = H0 at the anchor.

    The quadratic Riccati form is never integrated directly; H = Z Y^{-1}.
    anchor defaults to the chart's entry coordinate sqrt(2) t_-.
    """
    k = chart.n_trans
    if H0 is None:
        H0 = 1j * np.eye(k)
    H0 = np.asarray(H0, dtype=complex)
    if not np.allclose(H0, H0.T, atol=1e-12):
        raise ConfigError("H0 must be symmetric")
    if np.linalg.eigvalsh(H0.imag).min() <= 0:
        raise ConfigError("Im H0 must be positive definite")
    if z0_grid is None:
        z0_grid = np.linspace(chart.a0, chart.b0, 401)
    z0_grid = np.asarray(z0_grid, dtype=float)
    anchor = chart.s_anchor if anchor is None else float(anchor)
    if not (z0_grid[0] - 1e-12 <= anchor <= z0_grid[-1] + 1e-12):
        raise ConfigError("anchor must lie inside the z0 grid")
    A = transverse_matrix_A(k)

    if chart.is_flat:
        Bzero = np.zeros((k, k))

        def B(z):
            return Bzero
        B_grid = np.zeros((len(z0_grid), k, k))
    else:
        # B is smooth along the axis: sample on a coarse grid and spline it
        from scipy.interpolate import CubicSpline
        B_pts = np.linspace(z0_grid[0], z0_grid[-1],
                            min(len(z0_grid), 61))
        B_samples = np.array([chart.coeff_B(float(z)) for z in B_pts])
        _spline = CubicSpline(B_pts, B_samples, axis=0)

        def B(z):
            return _spline(float(np.clip(z, z0_grid[0], z0_grid[-1])))
        B_grid = _spline(z0_grid)

    def rhs(z, Y, Z):
        return A @ Z, -B(z) @ Y

    def rk4(z, Y, Z, dz):
        k1y, k1z = rhs(z, Y, Z)
        k2y, k2z = rhs(z + dz / 2, Y + dz / 2 * k1y, Z + dz / 2 * k1z)
        k3y, k3z = rhs(z + dz / 2, Y + dz / 2 * k2y, Z + dz / 2 * k2z)
        k4y, k4z = rhs(z + dz, Y + dz * k3y, Z + dz * k3z)
        return (Y + dz / 6 * (k1y + 2 * k2y + 2 * k3y + k4y),
                Z + dz / 6 * (k1z + 2 * k2z + 2 * k3z + k4z))

    n = len(z0_grid)
    Ys = np.empty((n, k, k), dtype=complex)
    Zs = np.empty_like(Ys)
    dz_typ = float(np.median(np.diff(z0_grid)))

    def sweep(indices):
        Y, Z = np.eye(k, dtype=complex), H0.copy()
        z = anchor
        for i in indices:
            target = z0_grid[i]
            nstep = max(1, int(np.ceil(n_sub * abs(target - z) / dz_typ)))
            dz = (target - z) / nstep
            for _ in range(nstep):
                Y, Z = rk4(z, Y, Z, dz)
                z += dz
            z = target
            Ys[i], Zs[i] = Y, Z

    fwd = [i for i in range(n) if z0_grid[i] >= anchor]
    bwd = [i for i in range(n - 1, -1, -1) if z0_grid[i] < anchor]
    sweep(fwd)
    sweep(bwd)

    Hs = np.empty_like(Ys)
    dets = np.empty(n, dtype=complex)
    for i in range(n):
        d = np.linalg.det(Ys[i])
        if abs(d) < 1e-12:
            raise DegenerateRiccatiError(
                f"det Y = {d:.3e} at z0 = {z0_grid[i]:.4f}")
        dets[i] = d
        Hs[i] = Zs[i] @ np.linalg.inv(Ys[i])
        Hs[i] = 0.5 * (Hs[i] + Hs[i].T)
        if np.linalg.eigvalsh(Hs[i].imag).min() <= 0:
            raise StepSizeError(
                f"Im H lost positivity at z0 = {z0_grid[i]:.4f}")

    args = np.angle(dets)
    darg = np.diff(args)
    darg = (darg + np.pi) % (2 * np.pi) - np.pi
    if np.any(np.abs(darg) >= 0.5 * np.pi):
        raise ResolutionError(
            "det Y argument advances by >= pi/2 per grid step; refine z0 grid")
    arg_unwrapped = np.concatenate([[args[0]], args[0] + np.cumsum(darg)])

    sol = RiccatiSolution(chart=chart, z0=z0_grid, H=Hs, Y=Ys, Z=Zs,
                          H0=H0, A=A, anchor=anchor, detY=dets,
                          detY_arg=arg_unwrapped)
    sol._B_cache = B_grid
    return sol


@dataclass
class TransportAmplitude:
    """Leading amplitude a_{0,0}(z0) = (det Y)^{-1/2} e^{sign/(2 sqrt 2) int b}."""
    z0: np.ndarray
    values: np.ndarray
    sign: float
    b_axis: np.ndarray
    riccati: RiccatiSolution

    def interp(self, z0):
        z0 = np.asarray(z0, dtype=float)
        re = np.interp(z0, self.z0, self.values.real)
        im = np.interp(z0, self.z0, self.values.imag)
        return re + 1j * im

    def transport_residual(self):
        """Max on-axis residual of 2 a' + [Tr(A H) - sign*b/sqrt2] a = 0."""
        z0, a = self.z0, self.values
        da = _fd_derivative(z0, a)
        res = np.empty_like(a)
        for i in range(len(z0)):
            trAH = np.trace(self.riccati.A @ self.riccati.H[i])
            res[i] = 2 * da[i] + (trAH - self.sign * self.b_axis[i] / SQRT2) \
                * a[i]
        scale = np.max(np.abs(a))
        return float(np.max(np.abs(res)) / scale)


def _fd_derivative(x, y):
    """4th-order derivative on a uniform grid (one-sided at the edges)."""
    h = x[1] - x[0]
    d = np.gradient(y, h, edge_order=2)
    if len(x) >= 6:
        d[2:-2] = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12 * h)
        for i in (0, 1):
            d[i] = (-25 * y[i] + 48 * y[i + 1] - 36 * y[i + 2]
                    + 16 * y[i + 3] - 3 * y[i + 4]) / (12 * h)
            j = len(y) - 1 - i
            d[j] = (25 * y[j] - 48 * y[j - 1] + 36 * y[j - 2]
                    - 16 * y[j - 3] + 3 * y[j - 4]) / (12 * h)
    return d


def transport_amplitude(riccati, b_axis=None, sign=-1.0):
    """Solve the on-axis transport along z0.

    sign=-1 builds the amplitude for the forward operator (damping +b u_t);
    sign=+1 the amplitude entering the conjugate/adjoint beam. The square
    root of det Y follows the continuously tracked branch.
    """
    z0 = riccati.z0
    if b_axis is None:
        b_axis = np.zeros(len(z0))
    b_axis = np.asarray(b_axis, dtype=float)
    if b_axis.shape != z0.shape:
        raise ConfigError("b_axis must be sampled on the riccati z0 grid")
    mag = np.abs(riccati.detY)
    inv_sqrt = mag ** -0.5 * np.exp(-0.5j * riccati.detY_arg)
    # cumulative integral of b from the anchor
    cum = np.concatenate([[0.0], np.cumsum(
        0.5 * (b_axis[1:] + b_axis[:-1]) * np.diff(z0))])
    at_anchor = np.interp(riccati.anchor, z0, cum)
    integ = cum - at_anchor
    vals = inv_sqrt * np.exp(sign / (2 * SQRT2) * integ)
    return TransportAmplitude(z0=z0, values=vals, sign=sign,
                              b_axis=b_axis, riccati=riccati)


@dataclass
class Beam:
    """A Gaussian beam field evaluator on space-time.

    The amplitude carries the transverse cutoff chi(|z'|/delta') and a C^2
    ramp over the z0 extension margins, so the field is compactly supported
    in the chart box and smooth everywhere.
    """
    chart: object
    riccati: RiccatiSolution
    amplitude: TransportAmplitude
    sigma: float
    p_norm: float
    conjugate: bool = False
    time_window: Optional[tuple] = None

    @property
    def z0_ramp_width(self):
        return 0.5 * self.chart.eps

    def phase_and_amp(self, t, x):
        """(phi, a, inside) at space-time points; phi = z1 + z'^T H z'."""
        chart = self.chart
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = chart.to_fermi(t, x)
        z0 = z[:, 0]
        zp = z[:, 1:]
        inside = (z0 >= chart.a0) & (z0 <= chart.b0)
        rho = np.linalg.norm(zp, axis=1) / chart.delta_prime
        inside &= rho < 1.0
        phi = np.zeros(len(t), dtype=complex)
        amp = np.zeros(len(t), dtype=complex)
        if np.any(inside):
            zi = z0[inside]
            H = self.riccati.interp_H(zi)
            quad = np.einsum("ni,nij,nj->n", zp[inside], H, zp[inside])
            phi[inside] = z[inside, 1] + quad
            w = self.z0_ramp_width
            ramp = smooth_cutoff(1.0 - np.clip((zi - chart.a0) / w, 0, 1)) \
                * smooth_cutoff(1.0 - np.clip((chart.b0 - zi) / w, 0, 1))
            amp[inside] = self.amplitude.interp(zi) \
                * smooth_cutoff(rho[inside]) * ramp
        return phi, amp, inside

    def evaluate(self, t, x):
        scalar = np.ndim(t) == 0
        phi, amp, inside = self.phase_and_amp(t, x)
        if self.conjugate:
            val = self.p_norm * np.conj(amp) * np.exp(
                -1j * self.sigma * np.conj(phi))
        else:
            val = self.p_norm * amp * np.exp(1j * self.sigma * phi)
        if self.time_window is not None:
            tt = np.atleast_1d(np.asarray(t, dtype=float))
            val = val * self._window(tt)
        return val[0] if scalar else val

    def _window(self, t):
        t0, t1, w = self.time_window
        up = smooth_cutoff(1.0 - np.clip((t - t0) / w, 0, 1))
        dn = smooth_cutoff(1.0 - np.clip((t1 - t) / w, 0, 1))
        return up * dn

    def boundary_trace(self, grid):
        """Sample the beam on Sigma as Dirichlet data for the solver."""
        from .wavesolver import BoundaryData
        pts = grid.bdry_points()
        if grid.ndim == 1:
            pts = pts[:, None]
        vals = np.zeros((grid.nt + 1, grid.nb), dtype=complex)
        ts = grid.times
        tmin, tmax = self.chart.tube_time_range()
        for j in range(grid.nb):
            sel = (ts >= tmin) & (ts <= tmax)
            if not np.any(sel):
                continue
            xrep = np.repeat(pts[j][None, :], int(sel.sum()), axis=0)
            vals[sel, j] = self.evaluate(ts[sel], xrep)
        return BoundaryData(vals, grid)

    def l2_mass(self, n_quad=None):
        """L2 mass over the tube by midpoint quadrature in chart coordinates.

        Uses the chart volume element |det gbar|^(1/2) (= 1 on flat charts).
        """
        chart = self.chart
        n = chart.ndim
        nq = n_quad or max(48, int(8 * np.sqrt(self.sigma) * chart.delta_prime
                                   * 4))
        z0s = np.linspace(chart.a0, chart.b0, 4 * nq)
        zps = np.linspace(-chart.delta_prime, chart.delta_prime, nq)
        dz0 = z0s[1] - z0s[0]
        dzp = zps[1] - zps[0]
        total = 0.0
        if n == 1:
            Z0, Z1 = np.meshgrid(z0s, zps, indexing="ij")
            zflat = np.stack([Z0.reshape(-1), Z1.reshape(-1)], axis=1)
            tt, xx = chart.from_fermi(zflat)
            vals = self.evaluate(tt, xx)
            total = np.sum(np.abs(vals) ** 2) * dz0 * dzp
        else:
            for z2 in zps:
                Z0, Z1 = np.meshgrid(z0s, zps, indexing="ij")
                zflat = np.stack([Z0.reshape(-1), Z1.reshape(-1),
                                  np.full(Z0.size, z2)], axis=1)
                tt, xx = chart.from_fermi(zflat)
                vals = self.evaluate(tt, xx)
                total += np.sum(np.abs(vals) ** 2) * dz0 * dzp * dzp
        return float(total)


def assemble_beam(chart, riccati, amplitude, sigma, normalization="sigma_n4",
                  conjugate=False, time_window=None):
    """Bundle chart, phase, and amplitude into a beam field evaluator."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    n = chart.ndim
    if normalization == "sigma_n4":
        p_norm = float(sigma) ** (n / 4.0)
    elif normalization in (None, "none", 1):
        p_norm = 1.0
    else:
        raise ConfigError(f"unknown normalization {normalization!r}")
    return Beam(chart=chart, riccati=riccati, amplitude=amplitude,
                sigma=float(sigma), p_norm=p_norm, conjugate=conjugate,
                time_window=time_window)


# ---------------------------------------------------------------------------
# residual verification


def beam_residual(beam, b=None, q=None, quad_pts_per_width=8,
                  local_step_frac=2e-4, return_field=False):
    """L_{b,q} u = u_tt - Delta_g u + b u_t + q u by local finite differences.

    Evaluated on an envelope-resolving quadrature grid over the beam tube
    (spacing <= sigma^{-1/2}/quad_pts_per_width); derivatives use local
    steps resolving the sigma-oscillation. Returns the L2 norm over the
    tube, the normalized residual, and on-axis eikonal/transport values.
    """
    chart = beam.chart
    sigma = beam.sigma
    metric = chart.ray.geodesic.metric
    n = chart.ndim

    h_env = sigma ** -0.5 / quad_pts_per_width
    if h_env > sigma ** -0.5 / 8 + 1e-15:
        raise ResolutionError("quadrature grid must resolve sigma^{-1/2}/8")
    h_loc = local_step_frac * (2 * np.pi / sigma)

    # quadrature nodes in chart coordinates over the tube
    z0s = np.arange(chart.a0, chart.b0, h_env * SQRT2)
    zps = np.arange(-chart.delta_prime, chart.delta_prime + h_env, h_env)
    if n == 1:
        Z0, Z1 = np.meshgrid(z0s, zps, indexing="ij")
        zflat = np.stack([Z0.reshape(-1), Z1.reshape(-1)], axis=1)
        cell = (z0s[1] - z0s[0]) * (zps[1] - zps[0])
    else:
        Z0, Z1, Z2 = np.meshgrid(z0s, zps, zps, indexing="ij")
        zflat = np.stack([Z0.reshape(-1), Z1.reshape(-1), Z2.reshape(-1)],
                         axis=1)
        cell = (z0s[1] - z0s[0]) * (zps[1] - zps[0]) ** 2
    tt, xx = chart.from_fermi(zflat)
    # restrict the L^2 quadrature to the physical cylinder Omega x (0,T)
    keep = metric.sdf(xx) <= 0.0
    tt, xx = tt[keep], xx[keep]

    def ev(dt=0.0, dx=None):
        x = xx if dx is None else xx + dx
        return beam.evaluate(tt + dt, x)

    u0 = ev()
    utt = (ev(dt=h_loc) - 2 * u0 + ev(dt=-h_loc)) / h_loc ** 2
    ut = (ev(dt=h_loc) - ev(dt=-h_loc)) / (2 * h_loc)
    lap = np.zeros_like(u0)
    cvals = metric.c_at(xx)
    if n == 1:
        e = np.zeros((1, 1))
        e[0, 0] = h_loc
        up = ev(dx=e[None, 0])
        um = ev(dx=-e[None, 0])
        uxx = (up - 2 * u0 + um) / h_loc ** 2
        ux = (up - um) / (2 * h_loc)
        if metric.kind == "euclidean":
            lap = uxx
        else:
            dc = (metric.c_at(xx + e[0]) - metric.c_at(xx - e[0])) \
                / (2 * h_loc)
            lap = uxx / cvals ** 2 - dc / cvals ** 3 * ux
    else:
        for k in range(2):
            e = np.zeros(2)
            e[k] = h_loc
            lap += (ev(dx=e) - 2 * u0 + ev(dx=-e)) / h_loc ** 2
        lap = lap / cvals ** 2

    res = utt - lap
    if b is not None:
        bv = b(xx[:, 0], tt) if n == 1 else b(xx[:, 0], xx[:, 1], tt)
        res = res + np.asarray(bv) * ut
    if q is not None:
        qv = q(xx[:, 0], tt) if n == 1 else q(xx[:, 0], xx[:, 1], tt)
        res = res + np.asarray(qv) * u0

    # chart volume element: 1 for flat; |det gbar|^(1/2) ~ 1 + O(|z'|^2)
    res_l2 = float(np.sqrt(np.sum(np.abs(res) ** 2) * cell))
    u_l2 = float(np.sqrt(np.sum(np.abs(u0) ** 2) * cell))

    z0_axis = np.linspace(chart.a0 + 0.05 * (chart.b0 - chart.a0),
                          chart.b0 - 0.05 * (chart.b0 - chart.a0), 17)
    eik = max(abs(chart.gbar_inv11(np.concatenate([[z], np.zeros(n)])))
              for z in z0_axis)
    out = {
        "residual_l2": res_l2,
        "field_l2": u_l2,
        "normalized": res_l2 / u_l2 if u_l2 > 0 else np.inf,
        "eikonal_axis": float(eik),
        "transport_axis": beam.amplitude.transport_residual(),
    }
    if return_field:
        out["points"] = (tt, xx)
        out["residual"] = res
    return out


def diagnostics_rows(riccati, amplitude):
    """Per-z0 CSV rows: (z0, det_identity_error, transport_residual)."""
    target = np.linalg.det(riccati.H0.imag)
    rows = []
    z0, a = amplitude.z0, amplitude.values
    da = _fd_derivative(z0, a)
    for i in range(len(riccati.z0)):
        det_err = abs(np.linalg.det(riccati.H[i].imag)
                      * abs(np.linalg.det(riccati.Y[i])) ** 2 - target) \
            / abs(target)
        trAH = np.trace(riccati.A @ riccati.H[i])
        tres = abs(2 * da[i] + (trAH - amplitude.sign
                                * amplitude.b_axis[i] / SQRT2) * a[i])
        rows.append((riccati.z0[i], det_err, tres))
    return rows
