"""Pure-numpy fallback for the compiled leapfrog kernels.

Expressions mirror the compiled loops term by term so the two backends
produce identical floating-point results.
"""

import numpy as np


def advance_1d(u_prev, u_curr, wp, wm, hb, q, f2, f3, src, bc, dt,
               ux_out, full_out):
    K = bc.shape[0]
    has_b = hb.shape[0] > 0
    has_q = q.shape[0] > 0
    has_f2 = f2.shape[0] > 0
    has_f3 = f3.shape[0] > 0
    has_src = src.shape[0] > 0
    store_full = full_out.shape[0] > 0
    dt2 = dt * dt
    up, uc = u_prev, u_curr
    for k in range(K):
        ui = uc[1:-1]
        lap = wp[1:-1] * (uc[2:] - ui) - wm[1:-1] * (ui - uc[:-2])
        rhs = lap
        if has_q:
            rhs = rhs - q[k, 1:-1] * ui
        if has_f2:
            rhs = rhs - f2[k, 1:-1] * (0.5 * ui * ui)
        if has_f3:
            rhs = rhs - f3[k, 1:-1] * ((1.0 / 6.0) * ui * ui * ui)
        if has_src:
            rhs = rhs + src[k, 1:-1]
        if has_b:
            unew = (2.0 * ui - (1.0 - hb[k, 1:-1]) * up[1:-1] + dt2 * rhs) \
                / (1.0 + hb[k, 1:-1])
        else:
            unew = 2.0 * ui - up[1:-1] + dt2 * rhs
        up[1:-1] = unew
        up[0] = bc[k, 0]
        up[-1] = bc[k, 1]
        up, uc = uc, up
        if not np.all(np.isfinite(unew)):
            return k  # buffer roles undefined on failure, as in _kernels
        ux_out[k, 0] = -3.0 * uc[0] + 4.0 * uc[1] - uc[2]
        ux_out[k, 1] = 3.0 * uc[-1] - 4.0 * uc[-2] + uc[-3]
        if store_full:
            full_out[k] = uc
    if K % 2 == 1:
        tmp = u_curr.copy()
        u_curr[:] = u_prev
        u_prev[:] = tmp
    return -1


def advance_2d(u_prev, u_curr, inv_c2, hb, q, f2, f3, src, bc,
               bidx, bin1, bin2, dt, h, un_out, full_out):
    K = bc.shape[0]
    has_c = inv_c2.shape[0] > 0
    has_b = hb.shape[0] > 0
    has_q = q.shape[0] > 0
    has_f2 = f2.shape[0] > 0
    has_f3 = f3.shape[0] > 0
    has_src = src.shape[0] > 0
    store_full = full_out.shape[0] > 0
    dt2 = dt * dt
    ih2 = 1.0 / (h * h)
    up, uc = u_prev, u_curr
    for k in range(K):
        ui = uc[1:-1, 1:-1]
        lap = ih2 * (uc[1:-1, 2:] + uc[1:-1, :-2] + uc[2:, 1:-1]
                     + uc[:-2, 1:-1] - 4.0 * ui)
        if has_c:
            lap = inv_c2[1:-1, 1:-1] * lap
        rhs = lap
        if has_q:
            rhs = rhs - q[k, 1:-1, 1:-1] * ui
        if has_f2:
            rhs = rhs - f2[k, 1:-1, 1:-1] * (0.5 * ui * ui)
        if has_f3:
            rhs = rhs - f3[k, 1:-1, 1:-1] * ((1.0 / 6.0) * ui * ui * ui)
        if has_src:
            rhs = rhs + src[k, 1:-1, 1:-1]
        if has_b:
            unew = (2.0 * ui - (1.0 - hb[k, 1:-1, 1:-1]) * up[1:-1, 1:-1]
                    + dt2 * rhs) / (1.0 + hb[k, 1:-1, 1:-1])
        else:
            unew = 2.0 * ui - up[1:-1, 1:-1] + dt2 * rhs
        up[1:-1, 1:-1] = unew
        up.reshape(-1)[bidx] = bc[k]
        up, uc = uc, up
        if not np.all(np.isfinite(unew)):
            return k
        flat = uc.reshape(-1)
        un_out[k] = 3.0 * flat[bidx] - 4.0 * flat[bin1] + flat[bin2]
        if store_full:
            full_out[k] = uc
    if K % 2 == 1:
        tmp = u_curr.copy()
        u_curr[:] = u_prev
        u_prev[:] = tmp
    return -1
