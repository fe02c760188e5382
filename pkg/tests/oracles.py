"""Independent reference implementations used as test oracles.

These are deliberately naive: no tiling, no acceleration structure, and
rotations/harmonics taken from scipy rather than the package's own code.
"""
import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import sph_harm_y

# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _cov3(quat_wxyz, scale):
    R = Rotation.from_quat(np.roll(quat_wxyz, -1)).as_matrix()
    return R @ np.diag(np.asarray(scale) ** 2) @ R.T


def project_one(position, quat, scale, cam, low_pass=0.3):
    """Mean (u, v), 2x2 covariance, camera depth; None behind the near plane."""
    t = cam.rotation @ np.asarray(position) + cam.translation
    x, y, z = t
    if z <= 0.01:
        return None
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / z ** 2],
                  [0.0, cam.fy / z, -cam.fy * y / z ** 2]])
    cov = J @ cam.rotation @ _cov3(quat, scale) @ cam.rotation.T @ J.T + low_pass * np.eye(2)
    mean = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    return mean, cov, z


def brute_render(splats, cam, background=(0.0, 0.0, 0.0), cutoff=9.0):
    """Per-pixel front-to-back compositing over every splat, fully sorted."""
    items = []
    for i in range(len(splats)):
        pr = project_one(splats.positions[i], splats.rotations[i], splats.scales[i], cam)
        if pr is None:
            continue
        mean, cov, z = pr
        items.append((z, i, mean, np.linalg.inv(cov)))
    items.sort(key=lambda it: (it[0], it[1]))
    bg = np.asarray(background, dtype=np.float64)
    img = np.empty((cam.height, cam.width, 3))
    for v in range(cam.height):
        for u in range(cam.width):
            T = 1.0
            c = np.zeros(3)
            for _, i, mean, inv in items:
                d = np.array([u, v]) - mean
                m = d @ inv @ d
                if m > cutoff:
                    continue
                a = min(0.99, splats.opacities[i] * np.exp(-0.5 * m))
                if a < 1.0 / 255.0:
                    continue
                c += T * a * splats.colors[i]
                T *= 1.0 - a
                if T < 1e-4:
                    break
            img[v, u] = c + T * bg
    return img



def brute_render_fast(splats, cam, background=(0.0, 0.0, 0.0), cutoff=9.0):
    """Same compositing as :func:`brute_render`, looping over sorted splats with all pixels at once."""
    items = []
    for i in range(len(splats)):
        pr = project_one(splats.positions[i], splats.rotations[i], splats.scales[i], cam)
        if pr is not None:
            items.append((pr[2], i, pr[0], np.linalg.inv(pr[1])))
    items.sort(key=lambda it: (it[0], it[1]))
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    pix = np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)
    T = np.ones(len(pix))
    c = np.zeros((len(pix), 3))
    live = np.ones(len(pix), dtype=bool)
    for _, i, mean, inv in items:
        d = pix - mean
        m = np.einsum("ni,ij,nj->n", d, inv, d)
        a = np.minimum(0.99, splats.opacities[i] * np.exp(-0.5 * m))
        hit = live & (m <= cutoff) & (a >= 1.0 / 255.0)
        c[hit] += (T[hit] * a[hit])[:, None] * splats.colors[i]
        T[hit] *= 1.0 - a[hit]
        live &= ~(hit & (T < 1e-4))
    img = c + T[:, None] * np.asarray(background, dtype=np.float64)
    return img.reshape(cam.height, cam.width, 3)

# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def closest_on_triangle(p, a, b, c):
    """Exact closest point via the plane projection plus the three edge segments."""
    n = np.cross(b - a, c - a)
    nn = n @ n
    cands = []
    if nn > 0:
        q = p - ((p - a) @ n) / nn * n
        # barycentric inside test
        v0, v1, v2 = b - a, c - a, q - a
        d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
        d20, d21 = v2 @ v0, v2 @ v1
        den = d00 * d11 - d01 * d01
        if den > 0:
            s = (d11 * d20 - d01 * d21) / den
            t = (d00 * d21 - d01 * d20) / den
            if s >= 0 and t >= 0 and s + t <= 1:
                cands.append(q)
    for e0, e1 in ((a, b), (b, c), (c, a)):
        e = e1 - e0
        ee = e @ e
        t = 0.0 if ee == 0 else np.clip((p - e0) @ e / ee, 0.0, 1.0)
        cands.append(e0 + t * e)
    cands = np.array(cands)
    d = np.linalg.norm(cands - p, axis=1)
    return cands[np.argmin(d)], d.min()


def _closest_all(p, A, B, C):
    """Closest point of ``p`` on every triangle (rows of A, B, C), vectorized."""
    n = np.cross(B - A, C - A)
    nn = np.einsum("ij,ij->i", n, n)
    q = p - (np.einsum("ij,ij->i", p - A, n) / np.where(nn > 0, nn, 1.0))[:, None] * n
    v0, v1, v2 = B - A, C - A, q - A
    d00, d01, d11 = (np.einsum("ij,ij->i", a, b) for a, b in ((v0, v0), (v0, v1), (v1, v1)))
    d20, d21 = np.einsum("ij,ij->i", v2, v0), np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    ok = den > 0
    s = np.where(ok, (d11 * d20 - d01 * d21) / np.where(ok, den, 1.0), -1.0)
    t = np.where(ok, (d00 * d21 - d01 * d20) / np.where(ok, den, 1.0), -1.0)
    inside = (nn > 0) & (s >= 0) & (t >= 0) & (s + t <= 1)
    best = np.where(inside[:, None], q, np.inf)
    bd = np.where(inside, np.linalg.norm(q - p, axis=1), np.inf)
    for e0, e1 in ((A, B), (B, C), (C, A)):
        e = e1 - e0
        ee = np.einsum("ij,ij->i", e, e)
        u = np.clip(np.einsum("ij,ij->i", p - e0, e) / np.where(ee > 0, ee, 1.0), 0.0, 1.0)
        c = e0 + u[:, None] * e
        d = np.linalg.norm(c - p, axis=1)
        better = d < bd
        best[better] = c[better]
        bd[better] = d[better]
    return best, bd


def brute_closest(mesh, p):
    """Closest mesh point and distance by testing every triangle."""
    A, B, C = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    pts, d = _closest_all(np.asarray(p, dtype=np.float64), A, B, C)
    i = int(np.argmin(d))
    return pts[i], d[i]


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------


def sh_basis_scipy(dirs, degree):
    """Real SH in the 3DGS sign convention from scipy's complex harmonics.

    For m < 0 the basis is sqrt(2) Im(Y_l^|m|), for m > 0 sqrt(2) Re(Y_l^m),
    which matches the hard-coded 3DGS table including its signs.
    """
    d = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.arctan2(d[:, 1], d[:, 0])
    cols = []
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            Y = sph_harm_y(l, abs(m), theta, phi)
            if m < 0:
                cols.append(np.sqrt(2) * Y.imag)
            elif m == 0:
                cols.append(Y.real)
            else:
                cols.append(np.sqrt(2) * Y.real)
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


def symplectic_euler(x0, v0, g, dt, n):
    """Closed form of n steps of v += g dt; x += v dt."""
    x0, v0, g = (np.asarray(a, dtype=np.float64) for a in (x0, v0, g))
    return x0 + n * dt * v0 + g * dt * dt * n * (n + 1) / 2.0, v0 + n * dt * g


def polar_rotation(F):
    from scipy.linalg import polar

    R, _ = polar(F)
    return R
