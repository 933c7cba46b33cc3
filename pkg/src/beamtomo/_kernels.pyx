# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled leapfrog kernels (1D/2D) advancing a block of time steps.

Formulas are written with exactly the same floating-point structure as the
pure-python fallback in ``_kernels_py`` so both backends agree bitwise.
"""

import numpy as np

cimport cython
from libc.math cimport isfinite

ctypedef fused num:
    double
    double complex


def advance_1d(num[::1] u_prev, num[::1] u_curr,
               double[::1] wp, double[::1] wm,
               double[:, ::1] hb, double[:, ::1] q,
               double[:, ::1] f2, double[:, ::1] f3,
               num[:, ::1] src, num[:, ::1] bc,
               double dt,
               num[:, ::1] ux_out, num[:, ::1] full_out):
    """Advance K leapfrog steps in place; returns -1 or the first bad step.

    hb = b*dt/2 at the current level; bc holds Dirichlet values at the new
    level; ux_out receives raw one-sided du/dx at both ends per step.
    """
    cdef Py_ssize_t K = bc.shape[0]
    cdef Py_ssize_t n = u_curr.shape[0]
    cdef bint has_b = hb.shape[0] > 0
    cdef bint has_q = q.shape[0] > 0
    cdef bint has_f2 = f2.shape[0] > 0
    cdef bint has_f3 = f3.shape[0] > 0
    cdef bint has_src = src.shape[0] > 0
    cdef bint store_full = full_out.shape[0] > 0
    cdef double dt2 = dt * dt
    cdef Py_ssize_t k, i
    cdef num ui, rhs, unew, lap
    cdef num[::1] up = u_prev
    cdef num[::1] uc = u_curr
    cdef num[::1] tmp
    cdef bint bad

    for k in range(K):
        bad = False
        for i in range(1, n - 1):
            ui = uc[i]
            lap = wp[i] * (uc[i + 1] - ui) - wm[i] * (ui - uc[i - 1])
            rhs = lap
            if has_q:
                rhs = rhs - q[k, i] * ui
            if has_f2:
                rhs = rhs - f2[k, i] * (0.5 * ui * ui)
            if has_f3:
                rhs = rhs - f3[k, i] * ((1.0 / 6.0) * ui * ui * ui)
            if has_src:
                rhs = rhs + src[k, i]
            if has_b:
                unew = (2.0 * ui - (1.0 - hb[k, i]) * up[i] + dt2 * rhs) \
                    / (1.0 + hb[k, i])
            else:
                unew = 2.0 * ui - up[i] + dt2 * rhs
            up[i] = unew
            if num is double:
                if not isfinite(unew):
                    bad = True
            else:
                if not isfinite(unew.real) or not isfinite(unew.imag):
                    bad = True
        up[0] = bc[k, 0]
        up[n - 1] = bc[k, 1]
        # roles swap: "prev" now holds the new level
        tmp = up
        up = uc
        uc = tmp
        if bad:
            return k
        ux_out[k, 0] = -3.0 * uc[0] + 4.0 * uc[1] - uc[2]
        ux_out[k, 1] = 3.0 * uc[n - 1] - 4.0 * uc[n - 2] + uc[n - 3]
        if store_full:
            for i in range(n):
                full_out[k, i] = uc[i]
    if K % 2 == 1:
        # make the caller's u_curr buffer hold the latest level again
        for i in range(n):
            ui = u_curr[i]
            u_curr[i] = u_prev[i]
            u_prev[i] = ui
    return -1


def advance_2d(num[:, ::1] u_prev, num[:, ::1] u_curr,
               double[:, ::1] inv_c2,
               double[:, :, ::1] hb, double[:, :, ::1] q,
               double[:, :, ::1] f2, double[:, :, ::1] f3,
               num[:, :, ::1] src, num[:, ::1] bc,
               long[::1] bidx, long[::1] bin1, long[::1] bin2,
               double dt, double h,
               num[:, ::1] un_out, num[:, :, ::1] full_out):
    """2D analogue of advance_1d on a (ny, nx) grid with square cells.

    bidx/bin1/bin2 are flat indices of boundary nodes and their first and
    second inward neighbours; un_out receives the raw one-sided stencil
    3*u[b] - 4*u[in1] + u[in2] per step.
    """
    cdef Py_ssize_t K = bc.shape[0]
    cdef Py_ssize_t ny = u_curr.shape[0]
    cdef Py_ssize_t nx = u_curr.shape[1]
    cdef Py_ssize_t nb = bidx.shape[0]
    cdef bint has_c = inv_c2.shape[0] > 0
    cdef bint has_b = hb.shape[0] > 0
    cdef bint has_q = q.shape[0] > 0
    cdef bint has_f2 = f2.shape[0] > 0
    cdef bint has_f3 = f3.shape[0] > 0
    cdef bint has_src = src.shape[0] > 0
    cdef bint store_full = full_out.shape[0] > 0
    cdef double dt2 = dt * dt
    cdef double ih2 = 1.0 / (h * h)
    cdef Py_ssize_t k, i, j, m
    cdef num ui, rhs, unew, lap
    cdef num[:, ::1] up = u_prev
    cdef num[:, ::1] uc = u_curr
    cdef num[:, ::1] tmp
    cdef bint bad

    for k in range(K):
        bad = False
        for i in range(1, ny - 1):
            for j in range(1, nx - 1):
                ui = uc[i, j]
                lap = ih2 * (uc[i, j + 1] + uc[i, j - 1] + uc[i + 1, j]
                             + uc[i - 1, j] - 4.0 * ui)
                if has_c:
                    lap = inv_c2[i, j] * lap
                rhs = lap
                if has_q:
                    rhs = rhs - q[k, i, j] * ui
                if has_f2:
                    rhs = rhs - f2[k, i, j] * (0.5 * ui * ui)
                if has_f3:
                    rhs = rhs - f3[k, i, j] * ((1.0 / 6.0) * ui * ui * ui)
                if has_src:
                    rhs = rhs + src[k, i, j]
                if has_b:
                    unew = (2.0 * ui - (1.0 - hb[k, i, j]) * up[i, j]
                            + dt2 * rhs) / (1.0 + hb[k, i, j])
                else:
                    unew = 2.0 * ui - up[i, j] + dt2 * rhs
                up[i, j] = unew
                if num is double:
                    if not isfinite(unew):
                        bad = True
                else:
                    if not isfinite(unew.real) or not isfinite(unew.imag):
                        bad = True
        for m in range(nb):
            up[bidx[m] // nx, bidx[m] % nx] = bc[k, m]
        tmp = up
        up = uc
        uc = tmp
        if bad:
            return k
        for m in range(nb):
            un_out[k, m] = (3.0 * uc[bidx[m] // nx, bidx[m] % nx]
                            - 4.0 * uc[bin1[m] // nx, bin1[m] % nx]
                            + uc[bin2[m] // nx, bin2[m] % nx])
        if store_full:
            for i in range(ny):
                for j in range(nx):
                    full_out[k, i, j] = uc[i, j]
    if K % 2 == 1:
        for i in range(ny):
            for j in range(nx):
                ui = u_curr[i, j]
                u_curr[i, j] = u_prev[i, j]
                u_prev[i, j] = ui
    return -1
