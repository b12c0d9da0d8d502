"""Pure-numpy MLS-MPM substep, mirroring the compiled kernel.

Vectorized over particles; an order of magnitude slower than the Cython
extension but dependency-free.  Scatter order differs from the compiled
loop, so the two backends agree to rounding, not bit-for-bit.
"""

import numpy as np

MAT_WATER = 0
MAT_SAND = 1
MAT_SNOW = 2
MAT_ELASTIC = 3


def _svd2(F):
    """Vectorized closed-form SVD of N stacked 2x2 matrices.

    Returns (uc, us, s0, s1, vc, vs) with M = rot(u) @ diag(s0,s1) @ rot(v).T;
    s1 may be negative for det < 0.
    """
    a, b = F[:, 0, 0], F[:, 0, 1]
    c, d = F[:, 1, 0], F[:, 1, 1]
    e = (a + d) * 0.5
    f = (a - d) * 0.5
    g = (c + b) * 0.5
    h = (c - b) * 0.5
    q = np.hypot(e, h)
    r = np.hypot(f, g)
    a1 = np.arctan2(g, f)
    a2 = np.arctan2(h, e)
    u = (a1 + a2) * 0.5
    v = (a1 - a2) * 0.5
    return np.cos(u), np.sin(u), q + r, q - r, np.cos(v), np.sin(v)


def _recompose(uc, us, s0, s1, vc, vs):
    out = np.empty(uc.shape + (2, 2))
    out[:, 0, 0] = uc * s0 * vc + us * s1 * vs
    out[:, 0, 1] = uc * s0 * vs - us * s1 * vc
    out[:, 1, 0] = us * s0 * vc - uc * s1 * vs
    out[:, 1, 1] = us * s0 * vs + uc * s1 * vc
    return out


def _weights(fx):
    # quadratic B-spline weights for offsets 0, 1, 2; fx has shape (N, 2)
    w = np.empty((3,) + fx.shape)
    w[0] = 0.5 * (1.5 - fx) ** 2
    w[1] = 0.75 - (fx - 1.0) ** 2
    w[2] = 0.5 * (fx - 0.5) ** 2
    return w


def _stress(F, Jp, material, mu0, lam0, hardening):
    n = F.shape[0]
    jdet = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    tau = np.zeros((n, 2, 2))
    if material == MAT_WATER:
        p = lam0 * jdet * (jdet - 1.0)
        tau[:, 0, 0] = p
        tau[:, 1, 1] = p
    elif material == MAT_SAND:
        uc, us, s0, s1, vc, vs = _svd2(F)
        s0 = np.maximum(s0, 1e-10)
        s1 = np.maximum(s1, 1e-10)
        e0 = np.log(s0)
        e1 = np.log(s1)
        tr = e0 + e1
        h0 = 2.0 * mu0 * e0 + lam0 * tr
        h1 = 2.0 * mu0 * e1 + lam0 * tr
        tau[:, 0, 0] = uc * uc * h0 + us * us * h1
        tau[:, 1, 1] = us * us * h0 + uc * uc * h1
        tau[:, 0, 1] = uc * us * (h0 - h1)
        tau[:, 1, 0] = tau[:, 0, 1]
    else:
        if material == MAT_SNOW:
            hcoef = np.clip(np.exp(hardening * (1.0 - Jp)), 0.1, 10.0)
        else:
            hcoef = np.ones(n)
        mu = mu0 * hcoef
        lam = lam0 * hcoef
        uc, us, s0, s1, vc, vs = _svd2(F)
        R = np.empty_like(tau)
        R[:, 0, 0] = uc * vc + us * vs
        R[:, 0, 1] = uc * vs - us * vc
        R[:, 1, 0] = us * vc - uc * vs
        R[:, 1, 1] = R[:, 0, 0]
        FR = F - R
        tau = 2.0 * mu[:, None, None] * (FR @ np.swapaxes(F, 1, 2))
        p = lam * jdet * (jdet - 1.0)
        tau[:, 0, 0] += p
        tau[:, 1, 1] += p
    return tau


def substep(pos, vel, F, Caff, Jp, grid_v, grid_m,
            res, dt, gx, gy, material, mu0, lam0,
            p_vol, p_mass, sand_alpha, clamp_lo, clamp_hi, hardening):
    """Advance by one substep; same contract as the compiled kernel."""
    inv_dx = float(res)
    dx = 1.0 / inv_dx
    bound = 3
    n = pos.shape[0]

    xp = pos * inv_dx
    base = (xp - 0.5).astype(np.int64)
    fx = xp - base
    w = _weights(fx)  # (3, N, 2)

    tau = _stress(F, Jp, material, mu0, lam0, hardening)
    coeff = -dt * 4.0 * inv_dx * inv_dx * p_vol
    affine = coeff * tau + p_mass * Caff

    # scatter momentum and mass over the 3x3 stencil
    mom = np.zeros(res * res * 2)
    mass = np.zeros(res * res)
    mv = p_mass * vel
    for i in range(3):
        for j in range(3):
            dpos = (np.stack([i - fx[:, 0], j - fx[:, 1]], axis=1)) * dx
            wgt = w[i, :, 0] * w[j, :, 1]
            node = (base[:, 0] + i) * res + (base[:, 1] + j)
            contrib = mv + np.einsum("nij,nj->ni", affine, dpos)
            mom += np.bincount(node * 2, weights=wgt * contrib[:, 0],
                               minlength=res * res * 2)
            mom += np.bincount(node * 2 + 1, weights=wgt * contrib[:, 1],
                               minlength=res * res * 2)
            mass += np.bincount(node, weights=wgt * p_mass, minlength=res * res)

    gm = mass.reshape(res, res)
    gv = mom.reshape(res, res, 2)
    occupied = gm > 0.0
    gv[occupied] /= gm[occupied][:, None]
    gv[occupied] += dt * np.array([gx, gy])
    gv[~occupied] = 0.0

    # wall conditions: zero the into-wall component inside a 3-cell margin
    gv[:bound, :, 0] = np.maximum(gv[:bound, :, 0], 0.0)
    gv[res - bound:, :, 0] = np.minimum(gv[res - bound:, :, 0], 0.0)
    gv[:, :bound, 1] = np.maximum(gv[:, :bound, 1], 0.0)
    gv[:, res - bound:, 1] = np.minimum(gv[:, res - bound:, 1], 0.0)

    grid_v[...] = gv
    grid_m[...] = gm

    # gather back
    new_v = np.zeros((n, 2))
    new_C = np.zeros((n, 2, 2))
    for i in range(3):
        for j in range(3):
            dpos = (np.stack([i - fx[:, 0], j - fx[:, 1]], axis=1)) * dx
            wgt = (w[i, :, 0] * w[j, :, 1])[:, None]
            gvn = gv[base[:, 0] + i, base[:, 1] + j]
            new_v += wgt * gvn
            new_C += 4.0 * inv_dx * inv_dx * (wgt * gvn)[:, :, None] * dpos[:, None, :]

    vel[...] = new_v
    Caff[...] = new_C

    Fn = (np.eye(2)[None] + dt * new_C) @ F
    if material == MAT_WATER:
        jdet = np.maximum(Fn[:, 0, 0] * Fn[:, 1, 1] - Fn[:, 0, 1] * Fn[:, 1, 0], 0.05)
        root = np.sqrt(jdet)
        Fn = np.zeros_like(Fn)
        Fn[:, 0, 0] = root
        Fn[:, 1, 1] = root
    elif material == MAT_SNOW:
        uc, us, s0, s1, vc, vs = _svd2(Fn)
        c0 = np.clip(s0, clamp_lo, clamp_hi)
        c1 = np.clip(s1, clamp_lo, clamp_hi)
        Jp[...] = np.clip(Jp * (s0 * s1) / (c0 * c1), 0.5, 1.5)
        Fn = _recompose(uc, us, c0, c1, vc, vs)
    elif material == MAT_SAND:
        uc, us, s0, s1, vc, vs = _svd2(Fn)
        e0 = np.log(np.maximum(s0, 1e-10))
        e1 = np.log(np.maximum(s1, 1e-10))
        tr = e0 + e1
        h0 = e0 - tr * 0.5
        h1 = e1 - tr * 0.5
        fn = np.sqrt(h0 * h0 + h1 * h1)
        dg = fn + (lam0 + mu0) / mu0 * tr * sand_alpha
        project = (dg > 0.0) & (fn > 1e-14) & (tr <= 0.0)
        ratio = np.where(project, dg / np.maximum(fn, 1e-300), 0.0)
        e0 = np.where(tr > 0.0, 0.0, e0 - ratio * h0)
        e1 = np.where(tr > 0.0, 0.0, e1 - ratio * h1)
        Fn = _recompose(uc, us, np.exp(e0), np.exp(e1), vc, vs)
    F[...] = Fn

    pos += dt * new_v

    # symmetric clamp keeping the 3x3 stencil inside the grid
    lo = 2.0 * dx
    hi = 1.0 - 2.0 * dx
    for axis in range(2):
        low = pos[:, axis] < lo
        high = pos[:, axis] > hi
        pos[low, axis] = lo
        pos[high, axis] = hi
        vel[low & (vel[:, axis] < 0.0), axis] = 0.0
        vel[high & (vel[:, axis] > 0.0), axis] = 0.0

    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
        return 1
    return 0
