# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled MLS-MPM substep (particle-to-grid, grid update, grid-to-particle).

Same math as vdgns._mpm_fallback; selected by vdgns.kernels at import time.
"""

from libc.math cimport sqrt, atan2, cos, sin, exp, log, isfinite

import numpy as np
cimport numpy as cnp

cnp.import_array()

# material ids shared with the Python side
DEF MAT_WATER = 0
DEF MAT_SAND = 1
DEF MAT_SNOW = 2
DEF MAT_ELASTIC = 3


cdef inline void _svd2(double a, double b, double c, double d,
                       double* uc, double* us, double* s0, double* s1,
                       double* vc, double* vs) noexcept nogil:
    # Closed-form 2x2 SVD: M = U diag(s0, s1) V^T with U = rot(u), V = rot(v),
    # both proper rotations; s1 may be negative when det(M) < 0.
    cdef double e = (a + d) * 0.5
    cdef double f = (a - d) * 0.5
    cdef double g = (c + b) * 0.5
    cdef double h = (c - b) * 0.5
    cdef double q = sqrt(e * e + h * h)
    cdef double r = sqrt(f * f + g * g)
    cdef double a1 = atan2(g, f)
    cdef double a2 = atan2(h, e)
    cdef double u = (a1 + a2) * 0.5
    cdef double v = (a1 - a2) * 0.5
    s0[0] = q + r
    s1[0] = q - r
    uc[0] = cos(u)
    us[0] = sin(u)
    vc[0] = cos(v)
    vs[0] = sin(v)


def substep(double[:, ::1] pos, double[:, ::1] vel,
            double[:, :, ::1] F, double[:, :, ::1] Caff, double[::1] Jp,
            double[:, :, ::1] grid_v, double[:, ::1] grid_m,
            int res, double dt, double gx, double gy,
            int material, double mu0, double lam0,
            double p_vol, double p_mass, double sand_alpha,
            double clamp_lo, double clamp_hi, double hardening):
    """Advance the particle system by one explicit MLS-MPM substep.

    Returns 0 on success, 1 if a non-finite particle state was produced.
    """
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t p, i, j, gi, gj
    cdef double inv_dx = <double> res
    cdef double dx = 1.0 / inv_dx
    cdef double xp0, xp1, fx0, fx1
    cdef int base0, base1
    cdef double w0[3]
    cdef double w1[3]
    cdef double f00, f01, f10, f11
    cdef double uc, us, vc, vs, s0, s1
    cdef double jdet, mu, lam, hcoef
    cdef double st00, st01, st10, st11
    cdef double a00, a01, a10, a11
    cdef double mv0, mv1, wgt, dpos0, dpos1
    cdef double coeff = -dt * 4.0 * inv_dx * inv_dx * p_vol
    cdef int bound = 3
    cdef double nv0, nv1, nc00, nc01, nc10, nc11, gv0, gv1
    cdef double e0, e1, tr, h0, h1, fn, dg
    cdef double r00, r01, r10, r11
    # keep every particle's 3x3 stencil strictly inside the grid; the wall
    # conditions make the clamp a rare event, and the symmetric bounds keep
    # mirrored scenes mirrored
    cdef double lo = 2.0 * dx
    cdef double hi = 1.0 - 2.0 * dx
    cdef int bad = 0

    with nogil:
        for gi in range(res):
            for gj in range(res):
                grid_v[gi, gj, 0] = 0.0
                grid_v[gi, gj, 1] = 0.0
                grid_m[gi, gj] = 0.0

        # particle to grid
        for p in range(n):
            xp0 = pos[p, 0] * inv_dx
            xp1 = pos[p, 1] * inv_dx
            base0 = <int> (xp0 - 0.5)
            base1 = <int> (xp1 - 0.5)
            fx0 = xp0 - base0
            fx1 = xp1 - base1
            w0[0] = 0.5 * (1.5 - fx0) * (1.5 - fx0)
            w0[1] = 0.75 - (fx0 - 1.0) * (fx0 - 1.0)
            w0[2] = 0.5 * (fx0 - 0.5) * (fx0 - 0.5)
            w1[0] = 0.5 * (1.5 - fx1) * (1.5 - fx1)
            w1[1] = 0.75 - (fx1 - 1.0) * (fx1 - 1.0)
            w1[2] = 0.5 * (fx1 - 0.5) * (fx1 - 0.5)

            f00 = F[p, 0, 0]; f01 = F[p, 0, 1]
            f10 = F[p, 1, 0]; f11 = F[p, 1, 1]
            jdet = f00 * f11 - f01 * f10

            if material == MAT_WATER:
                # no shear strength; pressure from the volume ratio
                st00 = lam0 * jdet * (jdet - 1.0)
                st11 = st00
                st01 = 0.0
                st10 = 0.0
            elif material == MAT_SAND:
                # Kirchhoff stress of the Hencky-strain energy
                _svd2(f00, f01, f10, f11, &uc, &us, &s0, &s1, &vc, &vs)
                if s0 < 1e-10: s0 = 1e-10
                if s1 < 1e-10: s1 = 1e-10
                e0 = log(s0)
                e1 = log(s1)
                tr = e0 + e1
                h0 = 2.0 * mu0 * e0 + lam0 * tr
                h1 = 2.0 * mu0 * e1 + lam0 * tr
                st00 = uc * uc * h0 + us * us * h1
                st11 = us * us * h0 + uc * uc * h1
                st01 = uc * us * (h0 - h1)
                st10 = st01
            else:
                # fixed corotated (elastic; snow adds plastic hardening)
                if material == MAT_SNOW:
                    hcoef = exp(hardening * (1.0 - Jp[p]))
                    if hcoef < 0.1: hcoef = 0.1
                    elif hcoef > 10.0: hcoef = 10.0
                else:
                    hcoef = 1.0
                mu = mu0 * hcoef
                lam = lam0 * hcoef
                _svd2(f00, f01, f10, f11, &uc, &us, &s0, &s1, &vc, &vs)
                # rotation R = U V^T = rot(u - v)
                r00 = uc * vc + us * vs
                r01 = uc * vs - us * vc
                r10 = us * vc - uc * vs
                r11 = uc * vc + us * vs
                # tau = 2 mu (F - R) F^T + lam J (J - 1) I
                st00 = 2.0 * mu * ((f00 - r00) * f00 + (f01 - r01) * f01) + lam * jdet * (jdet - 1.0)
                st01 = 2.0 * mu * ((f00 - r00) * f10 + (f01 - r01) * f11)
                st10 = 2.0 * mu * ((f10 - r10) * f00 + (f11 - r11) * f01)
                st11 = 2.0 * mu * ((f10 - r10) * f10 + (f11 - r11) * f11) + lam * jdet * (jdet - 1.0)

            a00 = coeff * st00 + p_mass * Caff[p, 0, 0]
            a01 = coeff * st01 + p_mass * Caff[p, 0, 1]
            a10 = coeff * st10 + p_mass * Caff[p, 1, 0]
            a11 = coeff * st11 + p_mass * Caff[p, 1, 1]

            mv0 = p_mass * vel[p, 0]
            mv1 = p_mass * vel[p, 1]
            for i in range(3):
                for j in range(3):
                    dpos0 = (i - fx0) * dx
                    dpos1 = (j - fx1) * dx
                    wgt = w0[i] * w1[j]
                    grid_v[base0 + i, base1 + j, 0] += wgt * (mv0 + a00 * dpos0 + a01 * dpos1)
                    grid_v[base0 + i, base1 + j, 1] += wgt * (mv1 + a10 * dpos0 + a11 * dpos1)
                    grid_m[base0 + i, base1 + j] += wgt * p_mass

        # grid momentum -> velocity, gravity, wall conditions
        for gi in range(res):
            for gj in range(res):
                if grid_m[gi, gj] > 0.0:
                    grid_v[gi, gj, 0] = grid_v[gi, gj, 0] / grid_m[gi, gj] + dt * gx
                    grid_v[gi, gj, 1] = grid_v[gi, gj, 1] / grid_m[gi, gj] + dt * gy
                    if gi < bound and grid_v[gi, gj, 0] < 0.0:
                        grid_v[gi, gj, 0] = 0.0
                    if gi >= res - bound and grid_v[gi, gj, 0] > 0.0:
                        grid_v[gi, gj, 0] = 0.0
                    if gj < bound and grid_v[gi, gj, 1] < 0.0:
                        grid_v[gi, gj, 1] = 0.0
                    if gj >= res - bound and grid_v[gi, gj, 1] > 0.0:
                        grid_v[gi, gj, 1] = 0.0

        # grid to particle
        for p in range(n):
            xp0 = pos[p, 0] * inv_dx
            xp1 = pos[p, 1] * inv_dx
            base0 = <int> (xp0 - 0.5)
            base1 = <int> (xp1 - 0.5)
            fx0 = xp0 - base0
            fx1 = xp1 - base1
            w0[0] = 0.5 * (1.5 - fx0) * (1.5 - fx0)
            w0[1] = 0.75 - (fx0 - 1.0) * (fx0 - 1.0)
            w0[2] = 0.5 * (fx0 - 0.5) * (fx0 - 0.5)
            w1[0] = 0.5 * (1.5 - fx1) * (1.5 - fx1)
            w1[1] = 0.75 - (fx1 - 1.0) * (fx1 - 1.0)
            w1[2] = 0.5 * (fx1 - 0.5) * (fx1 - 0.5)

            nv0 = 0.0; nv1 = 0.0
            nc00 = 0.0; nc01 = 0.0; nc10 = 0.0; nc11 = 0.0
            for i in range(3):
                for j in range(3):
                    dpos0 = (i - fx0) * dx
                    dpos1 = (j - fx1) * dx
                    wgt = w0[i] * w1[j]
                    gv0 = grid_v[base0 + i, base1 + j, 0]
                    gv1 = grid_v[base0 + i, base1 + j, 1]
                    nv0 += wgt * gv0
                    nv1 += wgt * gv1
                    nc00 += 4.0 * inv_dx * inv_dx * wgt * gv0 * dpos0
                    nc01 += 4.0 * inv_dx * inv_dx * wgt * gv0 * dpos1
                    nc10 += 4.0 * inv_dx * inv_dx * wgt * gv1 * dpos0
                    nc11 += 4.0 * inv_dx * inv_dx * wgt * gv1 * dpos1

            vel[p, 0] = nv0
            vel[p, 1] = nv1
            Caff[p, 0, 0] = nc00
            Caff[p, 0, 1] = nc01
            Caff[p, 1, 0] = nc10
            Caff[p, 1, 1] = nc11

            # deformation gradient update: F <- (I + dt C) F
            f00 = (1.0 + dt * nc00) * F[p, 0, 0] + dt * nc01 * F[p, 1, 0]
            f01 = (1.0 + dt * nc00) * F[p, 0, 1] + dt * nc01 * F[p, 1, 1]
            f10 = dt * nc10 * F[p, 0, 0] + (1.0 + dt * nc11) * F[p, 1, 0]
            f11 = dt * nc10 * F[p, 0, 1] + (1.0 + dt * nc11) * F[p, 1, 1]

            if material == MAT_WATER:
                jdet = f00 * f11 - f01 * f10
                if jdet < 0.05: jdet = 0.05
                jdet = sqrt(jdet)
                f00 = jdet; f01 = 0.0; f10 = 0.0; f11 = jdet
            elif material == MAT_SNOW:
                _svd2(f00, f01, f10, f11, &uc, &us, &s0, &s1, &vc, &vs)
                h0 = s0
                h1 = s1
                if s0 < clamp_lo: s0 = clamp_lo
                elif s0 > clamp_hi: s0 = clamp_hi
                if s1 < clamp_lo: s1 = clamp_lo
                elif s1 > clamp_hi: s1 = clamp_hi
                Jp[p] *= (h0 * h1) / (s0 * s1)
                if Jp[p] < 0.5: Jp[p] = 0.5
                elif Jp[p] > 1.5: Jp[p] = 1.5
                f00 = uc * s0 * vc + us * s1 * vs
                f01 = uc * s0 * vs - us * s1 * vc
                f10 = us * s0 * vc - uc * s1 * vs
                f11 = us * s0 * vs + uc * s1 * vc
            elif material == MAT_SAND:
                _svd2(f00, f01, f10, f11, &uc, &us, &s0, &s1, &vc, &vs)
                if s0 < 1e-10: s0 = 1e-10
                if s1 < 1e-10: s1 = 1e-10
                e0 = log(s0)
                e1 = log(s1)
                tr = e0 + e1
                h0 = e0 - tr * 0.5
                h1 = e1 - tr * 0.5
                fn = sqrt(h0 * h0 + h1 * h1)
                if tr > 0.0:
                    # expanding: no cohesion, project to the cone tip
                    e0 = 0.0
                    e1 = 0.0
                else:
                    dg = fn + (lam0 + mu0) / mu0 * tr * sand_alpha
                    if dg > 0.0 and fn > 1e-14:
                        e0 = e0 - dg * h0 / fn
                        e1 = e1 - dg * h1 / fn
                s0 = exp(e0)
                s1 = exp(e1)
                f00 = uc * s0 * vc + us * s1 * vs
                f01 = uc * s0 * vs - us * s1 * vc
                f10 = us * s0 * vc - uc * s1 * vs
                f11 = us * s0 * vs + uc * s1 * vc

            F[p, 0, 0] = f00
            F[p, 0, 1] = f01
            F[p, 1, 0] = f10
            F[p, 1, 1] = f11

            pos[p, 0] += dt * nv0
            pos[p, 1] += dt * nv1

            # safety clamp; the wall conditions make this a rare event
            if pos[p, 0] < lo:
                pos[p, 0] = lo
                if vel[p, 0] < 0.0: vel[p, 0] = 0.0
            elif pos[p, 0] > hi:
                pos[p, 0] = hi
                if vel[p, 0] > 0.0: vel[p, 0] = 0.0
            if pos[p, 1] < lo:
                pos[p, 1] = lo
                if vel[p, 1] < 0.0: vel[p, 1] = 0.0
            elif pos[p, 1] > hi:
                pos[p, 1] = hi
                if vel[p, 1] > 0.0: vel[p, 1] = 0.0

            if not (isfinite(pos[p, 0]) and isfinite(pos[p, 1]) and
                    isfinite(vel[p, 0]) and isfinite(vel[p, 1])):
                bad = 1

    return bad
