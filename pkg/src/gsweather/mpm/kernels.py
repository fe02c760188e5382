"""Numba kernels for the MLS-MPM substep.

Grid layout: ``grid_m[i, j, k]`` mass and ``grid_v[i, j, k, :]`` momentum
(turned into velocity in place by the grid update). Quadratic B-spline
weights with ``base = floor(x / dx - 0.5)``.
"""
from __future__ import annotations

import numba as nb
import numpy as np

# material ids; kept in sync with particles.Material
STATIONARY, SNOW, FLUID, SAND, RIGID = 0, 1, 2, 3, 4

# columns of the material parameter table
MU, LAM, HARDENING, CLAMP_LO, CLAMP_HI = range(5)

PARALLEL_CHUNKS = 8


def make_scratch(chunks: int = PARALLEL_CHUNKS) -> tuple[np.ndarray, np.ndarray]:
    """Per-chunk work buffers; the hot kernels run without the numba runtime and never allocate."""
    return np.zeros((chunks, 8, 3, 3)), np.zeros((chunks, 3), dtype=np.int64)


# ---------------------------------------------------------------------------
# 3x3 signed SVD
# ---------------------------------------------------------------------------

@nb.njit(cache=True, inline="always", _nrt=False)
def _det3(M):
    return (
        M[0, 0] * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
        - M[0, 1] * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
        + M[0, 2] * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0])
    )


@nb.njit(cache=True, _nrt=False)
def svd3_into(F, U, sig, V, A, warm=False):
    """Signed SVD ``F = U diag(sig) V^T`` with det(U) = det(V) = +1, written in place.

    Jacobi diagonalization of ``F^T F`` (``A`` is 3x3 scratch); singular
    values sorted descending, the last one carries the sign of det(F).
    With ``warm`` the incoming ``V`` (a rotation, e.g. last substep's) seeds
    the sweeps, which then start from a nearly diagonal matrix.
    """
    for a in range(3):
        for b in range(3):
            s = 0.0
            for c in range(3):
                s += F[c, a] * F[c, b]
            U[a, b] = s
            if not warm:
                V[a, b] = 1.0 if a == b else 0.0
    if warm:
        # A = V^T (F^T F) V, with U as scratch for the middle product
        for a in range(3):
            for b in range(3):
                s = 0.0
                for c in range(3):
                    s += U[a, c] * V[c, b]
                sig[b] = s
            for b in range(3):
                U[a, b] = sig[b]
        for a in range(3):
            for b in range(3):
                s = 0.0
                for c in range(3):
                    s += V[c, a] * U[c, b]
                A[a, b] = s
    else:
        for a in range(3):
            for b in range(3):
                A[a, b] = U[a, b]
    for _sweep in range(30):
        off = A[0, 1] * A[0, 1] + A[0, 2] * A[0, 2] + A[1, 2] * A[1, 2]
        scale = A[0, 0] * A[0, 0] + A[1, 1] * A[1, 1] + A[2, 2] * A[2, 2]
        if off <= 1e-30 * scale:
            break
        for pq in range(3):
            if pq == 0:
                p, q = 0, 1
            elif pq == 1:
                p, q = 0, 2
            else:
                p, q = 1, 2
            apq = A[p, q]
            if apq == 0.0:
                continue
            theta = (A[q, q] - A[p, p]) / (2.0 * apq)
            t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
            if theta < 0.0:
                t = -t
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            for k in range(3):
                akp = A[k, p]
                akq = A[k, q]
                A[k, p] = c * akp - s * akq
                A[k, q] = s * akp + c * akq
            for k in range(3):
                apk = A[p, k]
                aqk = A[q, k]
                A[p, k] = c * apk - s * aqk
                A[q, k] = s * apk + c * aqk
            for k in range(3):
                vkp = V[k, p]
                vkq = V[k, q]
                V[k, p] = c * vkp - s * vkq
                V[k, q] = s * vkp + c * vkq
    # sort eigenpairs descending with three compare-swaps
    for step in range(3):
        a = 1 if step == 1 else 0
        b = a + 1
        if A[b, b] > A[a, a]:
            tmp = A[a, a]
            A[a, a] = A[b, b]
            A[b, b] = tmp
            for k in range(3):
                tmp = V[k, a]
                V[k, a] = V[k, b]
                V[k, b] = tmp
    if _det3(V) < 0.0:
        for k in range(3):
            V[k, 2] = -V[k, 2]
    # B = F V, kept in A
    for a in range(3):
        for b in range(3):
            s = 0.0
            for c in range(3):
                s += F[a, c] * V[c, b]
            A[a, b] = s
    n0 = np.sqrt(A[0, 0] ** 2 + A[1, 0] ** 2 + A[2, 0] ** 2)
    sig[0] = n0
    if n0 > 1e-300:
        for k in range(3):
            U[k, 0] = A[k, 0] / n0
    else:
        U[0, 0] = 1.0
        U[1, 0] = 0.0
        U[2, 0] = 0.0
    d = A[0, 1] * U[0, 0] + A[1, 1] * U[1, 0] + A[2, 1] * U[2, 0]
    u0 = A[0, 1] - d * U[0, 0]
    u1 = A[1, 1] - d * U[1, 0]
    u2 = A[2, 1] - d * U[2, 0]
    n1 = np.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
    if not n1 > 1e-150:
        # any unit vector orthogonal to the first column
        ax = 0
        if abs(U[1, 0]) < abs(U[ax, 0]):
            ax = 1
        if abs(U[2, 0]) < abs(U[ax, 0]):
            ax = 2
        dd = U[ax, 0]
        u0 = -dd * U[0, 0]
        u1 = -dd * U[1, 0]
        u2 = -dd * U[2, 0]
        if ax == 0:
            u0 += 1.0
        elif ax == 1:
            u1 += 1.0
        else:
            u2 += 1.0
        n1 = np.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
    U[0, 1] = u0 / n1
    U[1, 1] = u1 / n1
    U[2, 1] = u2 / n1
    sig[1] = A[0, 1] * U[0, 1] + A[1, 1] * U[1, 1] + A[2, 1] * U[2, 1]
    U[0, 2] = U[1, 0] * U[2, 1] - U[2, 0] * U[1, 1]
    U[1, 2] = U[2, 0] * U[0, 1] - U[0, 0] * U[2, 1]
    U[2, 2] = U[0, 0] * U[1, 1] - U[1, 0] * U[0, 1]
    sig[2] = A[0, 2] * U[0, 2] + A[1, 2] * U[1, 2] + A[2, 2] * U[2, 2]


@nb.njit(cache=True)
def svd3(F):
    U = np.empty((3, 3))
    sig = np.empty(3)
    V = np.empty((3, 3))
    svd3_into(F, U, sig, V, np.empty((3, 3)))
    return U, sig, V


@nb.njit(cache=True)
def svd3_batch(F):
    n = F.shape[0]
    U = np.empty((n, 3, 3))
    S = np.empty((n, 3))
    V = np.empty((n, 3, 3))
    A = np.empty((3, 3))
    for i in range(n):
        svd3_into(F[i], U[i], S[i], V[i], A)
    return U, S, V


# ---------------------------------------------------------------------------
# transfers
# ---------------------------------------------------------------------------

@nb.njit(cache=True, inline="always", _nrt=False)
def _on_grid(xp, inv_dx, res):
    """True when the 3x3x3 stencil of ``xp`` lies on the grid (False for NaN)."""
    for d in range(3):
        g = xp[d] * inv_dx - 0.5
        if not (g >= 0.0 and g < res - 2):
            return False
    return True


@nb.njit(cache=True, inline="always", _nrt=False)
def _weights(xp, inv_dx, base, fx, w):
    for d in range(3):
        gx = xp[d] * inv_dx
        b = int(np.floor(gx - 0.5))
        base[d] = b
        f = gx - b
        fx[d] = f
        w[0, d] = 0.5 * (1.5 - f) ** 2
        w[1, d] = 0.75 - (f - 1.0) ** 2
        w[2, d] = 0.5 * (f - 0.5) ** 2


@nb.njit(cache=True, inline="always", _nrt=False)
def _particle_affine(p, F, R, C, Jp, mat, params, dt, p_mass, p_vol, inv_dx, affine):
    m = mat[p]
    for a in range(3):
        for b in range(3):
            affine[a, b] = p_mass * C[p, a, b]
    if m == RIGID:
        return
    mu = params[m, MU]
    la = params[m, LAM]
    hc = params[m, HARDENING]
    if hc != 0.0:
        h = np.exp(hc * (1.0 - Jp[p]))
        h = min(5.0, max(0.1, h))
        mu *= h
        la *= h
    Fp = F[p]
    J = _det3(Fp)
    k = -dt * p_vol * 4.0 * inv_dx * inv_dx
    Rp = R[p]
    for a in range(3):
        for b in range(3):
            s = 0.0
            if mu != 0.0:
                for c in range(3):
                    s += (Fp[a, c] - Rp[a, c]) * Fp[b, c]
                s *= 2.0 * mu
            if a == b:
                s += la * J * (J - 1.0)
            affine[a, b] += k * s


@nb.njit(cache=True, inline="always", _nrt=False)
def _scatter(p, x, v, C, F, R, Jp, mat, params, dt, p_mass, p_vol, inv_dx, dx, grid_m, grid_v, base, fx, w, affine):
    if not _on_grid(x[p], inv_dx, grid_m.shape[0]):
        return
    _weights(x[p], inv_dx, base, fx, w)
    _particle_affine(p, F, R, C, Jp, mat, params, dt, p_mass, p_vol, inv_dx, affine)
    mvx = p_mass * v[p, 0]
    mvy = p_mass * v[p, 1]
    mvz = p_mass * v[p, 2]
    for i in range(3):
        dpx = (i - fx[0]) * dx
        for j in range(3):
            dpy = (j - fx[1]) * dx
            wij = w[i, 0] * w[j, 1]
            for k in range(3):
                dpz = (k - fx[2]) * dx
                wt = wij * w[k, 2]
                gi = base[0] + i
                gj = base[1] + j
                gk = base[2] + k
                grid_m[gi, gj, gk] += wt * p_mass
                grid_v[gi, gj, gk, 0] += wt * (mvx + affine[0, 0] * dpx + affine[0, 1] * dpy + affine[0, 2] * dpz)
                grid_v[gi, gj, gk, 1] += wt * (mvy + affine[1, 0] * dpx + affine[1, 1] * dpy + affine[1, 2] * dpz)
                grid_v[gi, gj, gk, 2] += wt * (mvz + affine[2, 0] * dpx + affine[2, 1] * dpy + affine[2, 2] * dpz)


@nb.njit(cache=True, _nrt=False)
def p2g_serial(idx, x, v, C, F, R, Jp, mat, params, dt, p_mass, p_vol, inv_dx, grid_m, grid_v, scratch, iscratch):
    dx = 1.0 / inv_dx
    base = iscratch[0]
    fx = scratch[0, 0, 0]
    w = scratch[0, 1]
    affine = scratch[0, 2]
    for t in range(idx.shape[0]):
        _scatter(idx[t], x, v, C, F, R, Jp, mat, params, dt, p_mass, p_vol, inv_dx, dx, grid_m, grid_v,
                 base, fx, w, affine)


@nb.njit(cache=True, parallel=True, _nrt=False)
def p2g_parallel(idx, x, v, C, F, R, Jp, mat, params, dt, p_mass, p_vol, inv_dx, grid_m, grid_v, scratch, iscratch,
                 chunk_m, chunk_v):
    """Scatter into a fixed number of chunk grids, then reduce in chunk order.

    The chunking does not depend on the thread count, so results are
    reproducible run to run (but differ from the serial path by rounding).
    """
    dx = 1.0 / inv_dx
    nchunk = chunk_m.shape[0]
    n = idx.shape[0]
    per = (n + nchunk - 1) // nchunk
    for c in nb.prange(nchunk):
        cm = chunk_m[c]
        cv = chunk_v[c]
        cm[:] = 0.0
        cv[:] = 0.0
        base = iscratch[c]
        fx = scratch[c, 0, 0]
        w = scratch[c, 1]
        affine = scratch[c, 2]
        for t in range(c * per, min(n, (c + 1) * per)):
            _scatter(idx[t], x, v, C, F, R, Jp, mat, params, dt, p_mass, p_vol, inv_dx, dx, cm, cv,
                     base, fx, w, affine)
    res = grid_m.shape[0]
    for i in nb.prange(res):
        for c in range(nchunk):
            for j in range(res):
                for k in range(res):
                    grid_m[i, j, k] += chunk_m[c, i, j, k]
                    grid_v[i, j, k, 0] += chunk_v[c, i, j, k, 0]
                    grid_v[i, j, k, 1] += chunk_v[c, i, j, k, 1]
                    grid_v[i, j, k, 2] += chunk_v[c, i, j, k, 2]


@nb.njit(cache=True, inline="always", _nrt=False)
def _grid_node(i, j, k, grid_m, grid_v, stat_m, gdt, zero_frac, bound, res):
    m = grid_m[i, j, k]
    if m <= 0.0:
        return
    if stat_m[i, j, k] > zero_frac * m:
        grid_v[i, j, k, 0] = 0.0
        grid_v[i, j, k, 1] = 0.0
        grid_v[i, j, k, 2] = 0.0
        return
    inv = 1.0 / m
    vx = grid_v[i, j, k, 0] * inv + gdt[0]
    vy = grid_v[i, j, k, 1] * inv + gdt[1]
    vz = grid_v[i, j, k, 2] * inv + gdt[2]
    hi = res - 1 - bound
    if (i < bound and vx < 0.0) or (i > hi and vx > 0.0):
        vx = 0.0
    if (j < bound and vy < 0.0) or (j > hi and vy > 0.0):
        vy = 0.0
    if (k < bound and vz < 0.0) or (k > hi and vz > 0.0):
        vz = 0.0
    grid_v[i, j, k, 0] = vx
    grid_v[i, j, k, 1] = vy
    grid_v[i, j, k, 2] = vz


@nb.njit(cache=True, _nrt=False)
def grid_update_serial(grid_m, grid_v, stat_m, gdt, zero_frac, bound):
    res = grid_m.shape[0]
    for i in range(res):
        for j in range(res):
            for k in range(res):
                _grid_node(i, j, k, grid_m, grid_v, stat_m, gdt, zero_frac, bound, res)


@nb.njit(cache=True, parallel=True, _nrt=False)
def grid_update_parallel(grid_m, grid_v, stat_m, gdt, zero_frac, bound):
    res = grid_m.shape[0]
    for i in nb.prange(res):
        for j in range(res):
            for k in range(res):
                _grid_node(i, j, k, grid_m, grid_v, stat_m, gdt, zero_frac, bound, res)


@nb.njit(cache=True, _nrt=False)
def _plasticity(p, F, R, Jp, Vs, mat, params, work):
    """Project F[p] back onto the material's admissible set; refresh R[p]."""
    m = mat[p]
    Fp = F[p]
    if m == FLUID:
        c = np.cbrt(_det3(Fp))
        for a in range(3):
            for b in range(3):
                Fp[a, b] = c if a == b else 0.0
                R[p, a, b] = 1.0 if a == b else 0.0
        return
    U = work[0]
    V = Vs[p]
    A = work[2]
    sig = work[3, 0]
    svd3_into(Fp, U, sig, V, A, True)
    lo = params[m, CLAMP_LO]
    hi = params[m, CLAMP_HI]
    old = sig[0] * sig[1] * sig[2]
    for d in range(3):
        sig[d] = min(max(sig[d], lo), hi)
    Jp[p] *= old / (sig[0] * sig[1] * sig[2])
    for a in range(3):
        for b in range(3):
            s = 0.0
            r = 0.0
            for c in range(3):
                s += U[a, c] * sig[c] * V[b, c]
                r += U[a, c] * V[b, c]
            Fp[a, b] = s
            R[p, a, b] = r


@nb.njit(cache=True, inline="always", _nrt=False)
def _gather(p, x, v, C, F, R, Jp, Vs, mat, params, dt, inv_dx, dx, grid_v, vmax, lo, hi, base, fx, w, work):
    if not _on_grid(x[p], inv_dx, grid_v.shape[0]):
        return
    _weights(x[p], inv_dx, base, fx, w)
    nvx = 0.0
    nvy = 0.0
    nvz = 0.0
    B = work[4]
    B[:] = 0.0
    for i in range(3):
        dpx = (i - fx[0]) * dx
        for j in range(3):
            dpy = (j - fx[1]) * dx
            wij = w[i, 0] * w[j, 1]
            for k in range(3):
                dpz = (k - fx[2]) * dx
                wt = wij * w[k, 2]
                gx = grid_v[base[0] + i, base[1] + j, base[2] + k, 0]
                gy = grid_v[base[0] + i, base[1] + j, base[2] + k, 1]
                gz = grid_v[base[0] + i, base[1] + j, base[2] + k, 2]
                nvx += wt * gx
                nvy += wt * gy
                nvz += wt * gz
                B[0, 0] += wt * gx * dpx
                B[0, 1] += wt * gx * dpy
                B[0, 2] += wt * gx * dpz
                B[1, 0] += wt * gy * dpx
                B[1, 1] += wt * gy * dpy
                B[1, 2] += wt * gy * dpz
                B[2, 0] += wt * gz * dpx
                B[2, 1] += wt * gz * dpy
                B[2, 2] += wt * gz * dpz
    speed = np.sqrt(nvx * nvx + nvy * nvy + nvz * nvz)
    if speed > vmax:
        f = vmax / speed
        nvx *= f
        nvy *= f
        nvz *= f
    v[p, 0] = nvx
    v[p, 1] = nvy
    v[p, 2] = nvz
    k4 = 4.0 * inv_dx * inv_dx
    for a in range(3):
        for b in range(3):
            C[p, a, b] = k4 * B[a, b]
    x[p, 0] = min(max(x[p, 0] + dt * nvx, lo), hi)
    x[p, 1] = min(max(x[p, 1] + dt * nvy, lo), hi)
    x[p, 2] = min(max(x[p, 2] + dt * nvz, lo), hi)
    Fn = work[5]
    for a in range(3):
        for b in range(3):
            s = F[p, a, b]
            for c in range(3):
                s += dt * C[p, a, c] * F[p, c, b]
            Fn[a, b] = s
    for a in range(3):
        for b in range(3):
            F[p, a, b] = Fn[a, b]
    _plasticity(p, F, R, Jp, Vs, mat, params, work)


@nb.njit(cache=True, _nrt=False)
def g2p_serial(idx, x, v, C, F, R, Jp, Vs, mat, params, dt, inv_dx, grid_v, vmax, lo, hi, scratch, iscratch):
    dx = 1.0 / inv_dx
    base = iscratch[0]
    fx = scratch[0, 0, 0]
    w = scratch[0, 1]
    work = scratch[0, 2:]
    for t in range(idx.shape[0]):
        _gather(idx[t], x, v, C, F, R, Jp, Vs, mat, params, dt, inv_dx, dx, grid_v, vmax, lo, hi, base, fx, w, work)


@nb.njit(cache=True, parallel=True, _nrt=False)
def g2p_parallel(idx, x, v, C, F, R, Jp, Vs, mat, params, dt, inv_dx, grid_v, vmax, lo, hi, scratch, iscratch):
    dx = 1.0 / inv_dx
    nchunk = scratch.shape[0]
    n = idx.shape[0]
    per = (n + nchunk - 1) // nchunk
    for c in nb.prange(nchunk):
        base = iscratch[c]
        fx = scratch[c, 0, 0]
        w = scratch[c, 1]
        work = scratch[c, 2:]
        for t in range(c * per, min(n, (c + 1) * per)):
            _gather(idx[t], x, v, C, F, R, Jp, Vs, mat, params, dt, inv_dx, dx, grid_v, vmax, lo, hi, base, fx, w,
                    work)


@nb.njit(cache=True, _nrt=False)
def deposit_mass(positions, p_mass, inv_dx, grid_m, scratch, iscratch):
    """Mass-only scatter (static particles)."""
    base = iscratch[0]
    fx = scratch[0, 0, 0]
    w = scratch[0, 1]
    for p in range(positions.shape[0]):
        if not _on_grid(positions[p], inv_dx, grid_m.shape[0]):
            continue
        _weights(positions[p], inv_dx, base, fx, w)
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    grid_m[base[0] + i, base[1] + j, base[2] + k] += w[i, 0] * w[j, 1] * w[k, 2] * p_mass
