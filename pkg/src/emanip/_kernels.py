"""Numba-compiled inner loops for the potential evaluator.

The numpy implementation in potential.py is the reference; this kernel
computes the same quantities with explicit loops for the hot paths
(world integration, stacked estimation solves, planner rollouts).
potential.eval_potential dispatches here when numba is importable and
falls back to numpy otherwise; a regression test pins the two paths
together to float precision.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap if not (args and callable(args[0])) else args[0]


@njit(cache=True, fastmath=False)
def potential_kernel(z, u, theta, pts, slab_rot, slab_a, slab_e, sharpness,
                     sign, zeta1, zeta2, kc, cutoff, want_theta, want_points):
    """Batched potential evaluation; see potential.eval_potential.

    Returns (W, grad_z, grad_u, grad_theta, hess_zz, hess_ztheta,
    point_h1, point_gw, point_r).  Blocks not requested are returned as
    zero-size placeholders.
    """
    B = z.shape[0]
    n = pts.shape[0]
    m = slab_rot.shape[0]

    W = np.zeros(B)
    grad_z = np.zeros((B, 3))
    grad_u = np.zeros((B, 3))
    hess_zz = np.zeros((B, 3, 3))
    if want_theta:
        grad_th = np.zeros((B, 3))
        hess_zth = np.zeros((B, 3, 3))
    else:
        grad_th = np.zeros((0, 3))
        hess_zth = np.zeros((0, 3, 3))
    if want_points:
        point_h1 = np.zeros((B, n))
        point_gw = np.zeros((B, n, 2))
        point_r = np.zeros((B, n, 2))
    else:
        point_h1 = np.zeros((0, 0))
        point_gw = np.zeros((0, 0, 2))
        point_r = np.zeros((0, 0, 2))

    f_slab = np.zeros(m)
    gx_slab = np.zeros(m)
    gy_slab = np.zeros(m)
    hxx_slab = np.zeros(m)
    hxy_slab = np.zeros(m)
    hyy_slab = np.zeros(m)

    for b in range(B):
        cz = math.cos(z[b, 2])
        sz = math.sin(z[b, 2])
        ct = math.cos(theta[b, 2])
        st = math.sin(theta[b, 2])

        # Impedance spring terms.
        dx = u[b, 0] - z[b, 0]
        dy = u[b, 1] - z[b, 1]
        dp = u[b, 2] - z[b, 2]
        k0 = kc[0, 0] * dx + kc[0, 1] * dy + kc[0, 2] * dp
        k1 = kc[1, 0] * dx + kc[1, 1] * dy + kc[1, 2] * dp
        k2 = kc[2, 0] * dx + kc[2, 1] * dy + kc[2, 2] * dp
        W[b] = 0.5 * (dx * k0 + dy * k1 + dp * k2)
        grad_u[b, 0] = k0
        grad_u[b, 1] = k1
        grad_u[b, 2] = k2
        grad_z[b, 0] = -k0
        grad_z[b, 1] = -k1
        grad_z[b, 2] = -k2
        for i in range(3):
            for j in range(3):
                hess_zz[b, i, j] = kc[i, j]

        for ip in range(n):
            # World offset r = R_z c', world point w, offset from object d.
            rx = cz * pts[ip, 0] - sz * pts[ip, 1]
            ry = sz * pts[ip, 0] + cz * pts[ip, 1]
            wx = rx + z[b, 0]
            wy = ry + z[b, 1]
            ddx = wx - theta[b, 0]
            ddy = wy - theta[b, 1]
            px = ct * ddx + st * ddy
            py = -st * ddx + ct * ddy

            # Composite inside-outside: per-slab superellipse then smooth max.
            for a in range(m):
                lx = slab_rot[a, 0, 0] * px + slab_rot[a, 1, 0] * py
                ly = slab_rot[a, 0, 1] * px + slab_rot[a, 1, 1] * py
                e = slab_e[a]
                fa = 0.0
                ga_x = 0.0
                ga_y = 0.0
                ha_x = 0.0
                ha_y = 0.0
                for ax in range(2):
                    xv = lx if ax == 0 else ly
                    av = slab_a[a, ax]
                    if e >= 2.0:
                        t = abs(xv) / av
                        ei = int(e)
                        if e == ei:
                            # repeated squaring beats libm pow here
                            t_em2 = 1.0
                            base = t
                            kk = ei - 2
                            while kk:
                                if kk & 1:
                                    t_em2 *= base
                                kk >>= 1
                                base *= base
                        else:
                            t_em2 = t ** (e - 2.0)
                        t_em1 = t_em2 * t
                        val = t_em1 * t
                        d1 = (e / av) * t_em1 * (1.0 if xv >= 0 else -1.0)
                        d2 = (e * (e - 1.0) / (av * av)) * t_em2
                    else:
                        xs = math.sqrt(xv * xv + 1e-12)
                        val = (xs / av) ** e
                        d1 = (e / av ** e) * xs ** (e - 2.0) * xv
                        d2 = (e / av ** e) * xs ** (e - 4.0) \
                            * (xs * xs + (e - 2.0) * xv * xv)
                    fa += val
                    if ax == 0:
                        ga_x = d1
                        ha_x = d2
                    else:
                        ga_y = d1
                        ha_y = d2
                f_slab[a] = sign * (fa - 1.0)
                # Rotate slab gradient/Hessian back to the shape frame.
                r00 = slab_rot[a, 0, 0]
                r01 = slab_rot[a, 0, 1]
                r10 = slab_rot[a, 1, 0]
                r11 = slab_rot[a, 1, 1]
                gx_slab[a] = sign * (r00 * ga_x + r01 * ga_y)
                gy_slab[a] = sign * (r10 * ga_x + r11 * ga_y)
                hxx_slab[a] = ha_x * r00 * r00 + ha_y * r01 * r01
                hxy_slab[a] = ha_x * r00 * r10 + ha_y * r01 * r11
                hyy_slab[a] = ha_x * r10 * r10 + ha_y * r11 * r11

            fmax = f_slab[0]
            for a in range(1, m):
                if f_slab[a] > fmax:
                    fmax = f_slab[a]
            wsum = 0.0
            for a in range(m):
                arg = sharpness * (f_slab[a] - fmax)
                if arg < -700.0:
                    arg = -700.0
                f_slab[a] = math.exp(arg)  # reuse as weight
                wsum += f_slab[a]
            F = sign * (fmax + math.log(wsum) / sharpness)
            gx = 0.0
            gy = 0.0
            for a in range(m):
                wgt = f_slab[a] / wsum
                f_slab[a] = wgt
                gx += wgt * gx_slab[a]
                gy += wgt * gy_slab[a]
            Hxx = 0.0
            Hxy = 0.0
            Hyy = 0.0
            for a in range(m):
                wgt = f_slab[a]
                Hxx += sign * wgt * hxx_slab[a] \
                    + sharpness * wgt * gx_slab[a] * gx_slab[a]
                Hxy += sign * wgt * hxy_slab[a] \
                    + sharpness * wgt * gx_slab[a] * gy_slab[a]
                Hyy += sign * wgt * hyy_slab[a] \
                    + sharpness * wgt * gy_slab[a] * gy_slab[a]
            Hxx -= sharpness * gx * gx
            Hxy -= sharpness * gx * gy
            Hyy -= sharpness * gy * gy
            Hxx *= sign
            Hxy *= sign
            Hyy *= sign
            gx *= sign
            gy *= sign

            if want_points:
                point_r[b, ip, 0] = rx
                point_r[b, ip, 1] = ry

            if F > cutoff * zeta1:
                W[b] += 1.0
                continue

            # Barrier h(F) and derivatives (log-domain).
            x = F / zeta1
            if x > 0.0:
                sp = math.log1p(math.exp(-x))
                sg = math.exp(-x) / (1.0 + math.exp(-x))
            else:
                sp = -x + math.log1p(math.exp(x))
                sg = 1.0 / (1.0 + math.exp(x))
            h = math.exp(zeta1 * zeta2 * sp)
            l1 = -zeta2 * sg
            l2 = zeta2 * sg * (1.0 - sg) / zeta1
            h1 = h * l1
            h2 = h * (l1 * l1 + l2)
            W[b] += h

            # World-frame F-gradient and Hessian.
            gwx = ct * gx - st * gy
            gwy = st * gx + ct * gy
            t00 = ct * Hxx - st * Hxy
            t01 = ct * Hxy - st * Hyy
            t10 = st * Hxx + ct * Hxy
            t11 = st * Hxy + ct * Hyy
            hw00 = t00 * ct - t01 * st
            hw01 = t00 * st + t01 * ct
            hw11 = t10 * st + t11 * ct

            if want_points:
                point_h1[b, ip] = h1
                point_gw[b, ip, 0] = gwx
                point_gw[b, ip, 1] = gwy

            jrx = -ry
            jry = rx
            dfz0 = gwx
            dfz1 = gwy
            dfz2 = jrx * gwx + jry * gwy
            grad_z[b, 0] += h1 * dfz0
            grad_z[b, 1] += h1 * dfz1
            grad_z[b, 2] += h1 * dfz2

            vr_x = hw00 * jrx + hw01 * jry
            vr_y = hw01 * jrx + hw11 * jry
            gr = gwx * rx + gwy * ry

            hess_zz[b, 0, 0] += h2 * dfz0 * dfz0 + h1 * hw00
            hess_zz[b, 0, 1] += h2 * dfz0 * dfz1 + h1 * hw01
            hess_zz[b, 0, 2] += h2 * dfz0 * dfz2 + h1 * vr_x
            hess_zz[b, 1, 1] += h2 * dfz1 * dfz1 + h1 * hw11
            hess_zz[b, 1, 2] += h2 * dfz1 * dfz2 + h1 * vr_y
            hess_zz[b, 2, 2] += h2 * dfz2 * dfz2 \
                + h1 * (jrx * vr_x + jry * vr_y - gr)

            if want_theta:
                jdx = -ddy
                jdy = ddx
                dft0 = -gwx
                dft1 = -gwy
                dft2 = -(jdx * gwx + jdy * gwy)
                grad_th[b, 0] += h1 * dft0
                grad_th[b, 1] += h1 * dft1
                grad_th[b, 2] += h1 * dft2
                vd_x = hw00 * jdx + hw01 * jdy
                vd_y = hw01 * jdx + hw11 * jdy
                hess_zth[b, 0, 0] += h2 * dfz0 * dft0 - h1 * hw00
                hess_zth[b, 0, 1] += h2 * dfz0 * dft1 - h1 * hw01
                hess_zth[b, 0, 2] += h2 * dfz0 * dft2 + h1 * (-vd_x - gwy)
                hess_zth[b, 1, 0] += h2 * dfz1 * dft0 - h1 * hw01
                hess_zth[b, 1, 1] += h2 * dfz1 * dft1 - h1 * hw11
                hess_zth[b, 1, 2] += h2 * dfz1 * dft2 + h1 * (-vd_y + gwx)
                hess_zth[b, 2, 0] += h2 * dfz2 * dft0 - h1 * vr_x
                hess_zth[b, 2, 1] += h2 * dfz2 * dft1 - h1 * vr_y
                hess_zth[b, 2, 2] += h2 * dfz2 * dft2 \
                    + h1 * (-(jrx * vd_x + jry * vd_y) + gr)

        # Mirror the symmetric state Hessian.
        hess_zz[b, 1, 0] = hess_zz[b, 0, 1]
        hess_zz[b, 2, 0] = hess_zz[b, 0, 2]
        hess_zz[b, 2, 1] = hess_zz[b, 1, 2]

    return (W, grad_z, grad_u, grad_th, hess_zz, hess_zth,
            point_h1, point_gw, point_r)


@njit(cache=True, fastmath=False)
def value_kernel(z, u, theta, pts, slab_rot, slab_a, slab_e, sharpness,
                 sign, zeta1, zeta2, kc, cutoff):
    """Potential value only (used by grid searches and line searches)."""
    B = z.shape[0]
    n = pts.shape[0]
    m = slab_rot.shape[0]
    W = np.zeros(B)
    f_slab = np.zeros(m)
    for b in range(B):
        cz = math.cos(z[b, 2])
        sz = math.sin(z[b, 2])
        ct = math.cos(theta[b, 2])
        st = math.sin(theta[b, 2])
        dx = u[b, 0] - z[b, 0]
        dy = u[b, 1] - z[b, 1]
        dp = u[b, 2] - z[b, 2]
        acc = 0.0
        for i in range(3):
            di = dx if i == 0 else (dy if i == 1 else dp)
            for j in range(3):
                dj = dx if j == 0 else (dy if j == 1 else dp)
                acc += di * kc[i, j] * dj
        W[b] = 0.5 * acc
        for ip in range(n):
            rx = cz * pts[ip, 0] - sz * pts[ip, 1]
            ry = sz * pts[ip, 0] + cz * pts[ip, 1]
            ddx = rx + z[b, 0] - theta[b, 0]
            ddy = ry + z[b, 1] - theta[b, 1]
            px = ct * ddx + st * ddy
            py = -st * ddx + ct * ddy
            for a in range(m):
                lx = slab_rot[a, 0, 0] * px + slab_rot[a, 1, 0] * py
                ly = slab_rot[a, 0, 1] * px + slab_rot[a, 1, 1] * py
                e = slab_e[a]
                ei = int(e)
                if e == ei and e >= 2.0:
                    fa = 0.0
                    for ax in range(2):
                        t = abs(lx if ax == 0 else ly) / slab_a[a, ax]
                        v = 1.0
                        base = t
                        kk = ei
                        while kk:
                            if kk & 1:
                                v *= base
                            kk >>= 1
                            base *= base
                        fa += v
                elif e >= 2.0:
                    fa = (abs(lx) / slab_a[a, 0]) ** e \
                        + (abs(ly) / slab_a[a, 1]) ** e
                else:
                    fa = (math.sqrt(lx * lx + 1e-12) / slab_a[a, 0]) ** e \
                        + (math.sqrt(ly * ly + 1e-12) / slab_a[a, 1]) ** e
                f_slab[a] = sign * (fa - 1.0)
            fmax = f_slab[0]
            for a in range(1, m):
                if f_slab[a] > fmax:
                    fmax = f_slab[a]
            wsum = 0.0
            for a in range(m):
                arg = sharpness * (f_slab[a] - fmax)
                if arg < -700.0:
                    arg = -700.0
                wsum += math.exp(arg)
            F = sign * (fmax + math.log(wsum) / sharpness)
            if F > cutoff * zeta1:
                W[b] += 1.0
            else:
                x = F / zeta1
                sp = math.log1p(math.exp(-x)) if x > 0.0 \
                    else -x + math.log1p(math.exp(x))
                W[b] += math.exp(zeta1 * zeta2 * sp)
    return W
