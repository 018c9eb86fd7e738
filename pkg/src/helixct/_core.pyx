# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled projection/backprojection kernels.

Mirrors helixct._kernels_fallback exactly (same sampling formulas, same
stratified RNG stream); keep the two in sync.  Poses arrive packed as
[n, 14] rows: source(3), normal(3), u_axis(3), v_axis(3), cu, cv.
"""

from cython.parallel import prange
cimport openmp
from libc.math cimport atan2, ceil, cos, floor, log2, sin, sqrt

import numpy as np

backend_name = "compiled"


cdef inline unsigned long long _mix64(unsigned long long x) nogil:
    x ^= x >> 30
    x *= 0xBF58476D1CE4E5B9ULL
    x ^= x >> 27
    x *= 0x94D049BB133111EBULL
    x ^= x >> 31
    return x


cdef inline double _rand01(unsigned long long seed, unsigned long long a,
                           unsigned long long b) nogil:
    cdef unsigned long long z = (seed
                                 + a * 0x9E3779B97F4A7C15ULL
                                 + b * 0xD1B54A32D192ED03ULL)
    return <double>(_mix64(z) >> 11) * (1.0 / 9007199254740992.0)


cdef inline double _vox(const double[:, :, ::1] vol, Py_ssize_t iz, Py_ssize_t iy,
                        Py_ssize_t ix) nogil:
    if ix < 0 or iy < 0 or iz < 0:
        return 0.0
    if ix >= vol.shape[2] or iy >= vol.shape[1] or iz >= vol.shape[0]:
        return 0.0
    return vol[iz, iy, ix]


cdef inline double _trilinear(const double[:, :, ::1] vol, double gx, double gy,
                              double gz) nogil:
    cdef Py_ssize_t nx = vol.shape[2], ny = vol.shape[1], nz = vol.shape[0]
    if gx <= -1.0 or gy <= -1.0 or gz <= -1.0:
        return 0.0
    if gx >= nx or gy >= ny or gz >= nz:
        return 0.0
    cdef Py_ssize_t ix = <Py_ssize_t>floor(gx)
    cdef Py_ssize_t iy = <Py_ssize_t>floor(gy)
    cdef Py_ssize_t iz = <Py_ssize_t>floor(gz)
    cdef double fx = gx - ix, fy = gy - iy, fz = gz - iz
    cdef double c00 = _vox(vol, iz, iy, ix) * (1 - fx) + _vox(vol, iz, iy, ix + 1) * fx
    cdef double c01 = _vox(vol, iz, iy + 1, ix) * (1 - fx) + _vox(vol, iz, iy + 1, ix + 1) * fx
    cdef double c10 = _vox(vol, iz + 1, iy, ix) * (1 - fx) + _vox(vol, iz + 1, iy, ix + 1) * fx
    cdef double c11 = _vox(vol, iz + 1, iy + 1, ix) * (1 - fx) + _vox(vol, iz + 1, iy + 1, ix + 1) * fx
    return (c00 * (1 - fy) + c01 * fy) * (1 - fz) + (c10 * (1 - fy) + c11 * fy) * fz


cdef inline double _taper(double q, double q_taper) nogil:
    cdef double aq = q if q >= 0.0 else -q
    if aq > 1.0:
        return 0.0
    if q_taper >= 1.0 or aq <= q_taper:
        return 1.0
    cdef double c = cos(1.5707963267948966 * (aq - q_taper) / (1.0 - q_taper))
    return c * c


cdef inline int _project(const double[:, ::1] poses, Py_ssize_t p, double px,
                         double py, double pz, int shape_flag, double sdd,
                         double pitch_u, double pitch_v,
                         double* u, double* v, double* depth) nogil:
    """Voxel center -> continuous detector pixel coords.  Returns 0 if culled."""
    cdef double xix = px - poses[p, 0]
    cdef double xiy = py - poses[p, 1]
    cdef double xiz = pz - poses[p, 2]
    cdef double xn = xix * poses[p, 3] + xiy * poses[p, 4] + xiz * poses[p, 5]
    cdef double xu = xix * poses[p, 6] + xiy * poses[p, 7] + xiz * poses[p, 8]
    cdef double xv = xix * poses[p, 9] + xiy * poses[p, 10] + xiz * poses[p, 11]
    cdef double scale, rho
    if xn <= 1e-9:
        return 0
    if shape_flag == 0:
        scale = sdd / xn
        u[0] = (xu * scale) / pitch_u + poses[p, 12]
        v[0] = (xv * scale) / pitch_v + poses[p, 13]
        depth[0] = xn
    else:
        rho = sqrt(xn * xn + xu * xu)
        u[0] = atan2(xu, xn) * sdd / pitch_u + poses[p, 12]
        v[0] = (xv * sdd / rho) / pitch_v + poses[p, 13]
        depth[0] = rho
    return 1


cdef inline double _bilin(const double[:, :, :, ::1] maps, Py_ssize_t p,
                          Py_ssize_t lev, double u, double v) nogil:
    cdef Py_ssize_t rows = maps.shape[2], cols = maps.shape[3]
    cdef Py_ssize_t i0 = <Py_ssize_t>floor(u)
    cdef Py_ssize_t j0 = <Py_ssize_t>floor(v)
    if i0 > cols - 2:
        i0 = cols - 2
    if i0 < 0:
        i0 = 0
    if j0 > rows - 2:
        j0 = rows - 2
    if j0 < 0:
        j0 = 0
    cdef double fu = u - i0, fv = v - j0
    return ((1 - fv) * ((1 - fu) * maps[p, lev, j0, i0] + fu * maps[p, lev, j0, i0 + 1])
            + fv * ((1 - fu) * maps[p, lev, j0 + 1, i0] + fu * maps[p, lev, j0 + 1, i0 + 1]))


def set_threads(int n):
    if n > 0:
        openmp.omp_set_num_threads(n)


def forward_march(const double[:, :, ::1] vol, double ox, double oy, double oz,
                  double vpitch, const double[:, ::1] poses, int shape_flag,
                  double sdd, double pitch_u, double pitch_v, int sup,
                  double step, int stratified, unsigned long long seed,
                  double[:, :, ::1] out):
    """Ray-march line integrals for every (sub)pixel of every pose.

    out has shape [n_poses, rows*sup, cols*sup]; subpixel (vr, vc) maps to
    detector pixel coordinates ((vc+0.5)/sup-0.5, (vr+0.5)/sup-0.5).
    """
    cdef Py_ssize_t np_ = poses.shape[0]
    cdef Py_ssize_t rows_s = out.shape[1], cols_s = out.shape[2]
    cdef Py_ssize_t nx = vol.shape[2], ny = vol.shape[1], nz = vol.shape[0]
    cdef double lox = ox - vpitch, hix = ox + nx * vpitch
    cdef double loy = oy - vpitch, hiy = oy + ny * vpitch
    cdef double loz = oz - vpitch, hiz = oz + nz * vpitch
    cdef double cu, cv
    cdef Py_ssize_t p, vr, vc, j, nseg
    cdef double u_px, v_px, gamma, dx, dy, dz, dn, sx, sy, sz
    cdef double posx, posy, posz, t0, t1, ta, tb, tmp, seg0, seg_len, t, acc, uoff
    cdef unsigned long long ray_id

    for p in prange(np_, nogil=True, schedule='static'):
        cu = poses[p, 12]
        cv = poses[p, 13]
        sx = poses[p, 0]
        sy = poses[p, 1]
        sz = poses[p, 2]
        for vr in range(rows_s):
            v_px = (vr + 0.5) / sup - 0.5
            for vc in range(cols_s):
                u_px = (vc + 0.5) / sup - 0.5
                # detector (sub)pixel position in world space
                if shape_flag == 0:
                    posx = sx + sdd * poses[p, 3] \
                        + (u_px - cu) * pitch_u * poses[p, 6] \
                        + (v_px - cv) * pitch_v * poses[p, 9]
                    posy = sy + sdd * poses[p, 4] \
                        + (u_px - cu) * pitch_u * poses[p, 7] \
                        + (v_px - cv) * pitch_v * poses[p, 10]
                    posz = sz + sdd * poses[p, 5] \
                        + (u_px - cu) * pitch_u * poses[p, 8] \
                        + (v_px - cv) * pitch_v * poses[p, 11]
                else:
                    gamma = (u_px - cu) * pitch_u / sdd
                    posx = sx + sdd * (cos(gamma) * poses[p, 3] + sin(gamma) * poses[p, 6]) \
                        + (v_px - cv) * pitch_v * poses[p, 9]
                    posy = sy + sdd * (cos(gamma) * poses[p, 4] + sin(gamma) * poses[p, 7]) \
                        + (v_px - cv) * pitch_v * poses[p, 10]
                    posz = sz + sdd * (cos(gamma) * poses[p, 5] + sin(gamma) * poses[p, 8]) \
                        + (v_px - cv) * pitch_v * poses[p, 11]
                dx = posx - sx
                dy = posy - sy
                dz = posz - sz
                dn = sqrt(dx * dx + dy * dy + dz * dz)
                dx = dx / dn
                dy = dy / dn
                dz = dz / dn
                # clip to the trilinear support box
                t0 = 0.0
                t1 = 1e300
                if dx > 1e-12 or dx < -1e-12:
                    ta = (lox - sx) / dx
                    tb = (hix - sx) / dx
                    if ta > tb:
                        tmp = ta; ta = tb; tb = tmp
                    if ta > t0: t0 = ta
                    if tb < t1: t1 = tb
                elif sx <= lox or sx >= hix:
                    t1 = -1.0
                if dy > 1e-12 or dy < -1e-12:
                    ta = (loy - sy) / dy
                    tb = (hiy - sy) / dy
                    if ta > tb:
                        tmp = ta; ta = tb; tb = tmp
                    if ta > t0: t0 = ta
                    if tb < t1: t1 = tb
                elif sy <= loy or sy >= hiy:
                    t1 = -1.0
                if dz > 1e-12 or dz < -1e-12:
                    ta = (loz - sz) / dz
                    tb = (hiz - sz) / dz
                    if ta > tb:
                        tmp = ta; ta = tb; tb = tmp
                    if ta > t0: t0 = ta
                    if tb < t1: t1 = tb
                elif sz <= loz or sz >= hiz:
                    t1 = -1.0
                acc = 0.0
                if t1 > t0:
                    nseg = <Py_ssize_t>ceil((t1 - t0) / step)
                    ray_id = (<unsigned long long>p * <unsigned long long>rows_s
                              + <unsigned long long>vr) * <unsigned long long>cols_s \
                        + <unsigned long long>vc
                    for j in range(nseg):
                        seg0 = t0 + j * step
                        seg_len = t1 - seg0
                        if seg_len > step:
                            seg_len = step
                        if stratified:
                            uoff = _rand01(seed, ray_id, <unsigned long long>j)
                        else:
                            uoff = 0.5
                        t = seg0 + uoff * seg_len
                        acc = acc + seg_len * _trilinear(
                            vol,
                            (sx + t * dx - ox) / vpitch,
                            (sy + t * dy - oy) / vpitch,
                            (sz + t * dz - oz) / vpitch)
                out[p, vr, vc] = acc


def bp_gather(const double[:, :, :, ::1] maps, const double[:, ::1] poses,
              int shape_flag, double sdd, double pitch_u, double pitch_v,
              double ox, double oy, double oz, double vpitch, double q_taper,
              double[:, :, ::1] accum, double[:, :, ::1] wsum):
    """Backproject per-pose feature maps into the volume (gather form).

    maps has shape [n_poses, L, rows, cols]; L=1 is the plain bilinear path,
    L>1 samples the mip level pair selected by the voxel footprint.
    """
    cdef Py_ssize_t np_ = maps.shape[0], levels = maps.shape[1]
    cdef Py_ssize_t rows = maps.shape[2], cols = maps.shape[3]
    cdef Py_ssize_t nx = accum.shape[2], ny = accum.shape[1], nz = accum.shape[0]
    cdef double footprint_num = vpitch * sdd / pitch_u
    cdef Py_ssize_t iz, iy, ix, p, l0
    cdef double px, py, pz, u, v, depth, q, w, f, lam, frac, val
    cdef double umax = cols - 1.0, vmax = rows - 1.0

    for iz in prange(nz, nogil=True, schedule='static'):
        pz = oz + iz * vpitch
        for iy in range(ny):
            py = oy + iy * vpitch
            for ix in range(nx):
                px = ox + ix * vpitch
                for p in range(np_):
                    if not _project(poses, p, px, py, pz, shape_flag, sdd,
                                    pitch_u, pitch_v, &u, &v, &depth):
                        continue
                    if u < 0.0 or u > umax or v < 0.0 or v > vmax:
                        continue
                    if rows > 1:
                        q = 2.0 * v / vmax - 1.0
                    else:
                        q = 0.0
                    w = _taper(q, q_taper)
                    if levels > 1:
                        f = footprint_num / depth
                        if f > 1.0:
                            lam = log2(f)
                            if lam > levels - 1.0:
                                lam = levels - 1.0
                        else:
                            lam = 0.0
                        l0 = <Py_ssize_t>lam
                        if l0 > levels - 2:
                            l0 = levels - 2
                        frac = lam - l0
                        val = (1.0 - frac) * _bilin(maps, p, l0, u, v)
                        if frac > 0.0:
                            val = val + frac * _bilin(maps, p, l0 + 1, u, v)
                    else:
                        val = _bilin(maps, p, 0, u, v)
                    accum[iz, iy, ix] += w * val
                    wsum[iz, iy, ix] += w


def bp_scatter(const double[:, :, ::1] residual, const double[:, ::1] poses,
               int shape_flag, double sdd, double pitch_u, double pitch_v,
               double ox, double oy, double oz, double vpitch, double q_taper,
               double[:, :, ::1] out):
    """Exact transpose of the L=1 gather: scatter voxel values to pixels."""
    cdef Py_ssize_t np_ = out.shape[0], rows = out.shape[1], cols = out.shape[2]
    cdef Py_ssize_t nx = residual.shape[2], ny = residual.shape[1], nz = residual.shape[0]
    cdef Py_ssize_t iz, iy, ix, p, i0, j0
    cdef double px, py, pz, u, v, depth, q, w, r, fu, fv
    cdef double umax = cols - 1.0, vmax = rows - 1.0

    for p in prange(np_, nogil=True, schedule='static'):
        for iz in range(nz):
            pz = oz + iz * vpitch
            for iy in range(ny):
                py = oy + iy * vpitch
                for ix in range(nx):
                    r = residual[iz, iy, ix]
                    if r == 0.0:
                        continue
                    px = ox + ix * vpitch
                    if not _project(poses, p, px, py, pz, shape_flag, sdd,
                                    pitch_u, pitch_v, &u, &v, &depth):
                        continue
                    if u < 0.0 or u > umax or v < 0.0 or v > vmax:
                        continue
                    if rows > 1:
                        q = 2.0 * v / vmax - 1.0
                    else:
                        q = 0.0
                    w = _taper(q, q_taper)
                    i0 = <Py_ssize_t>floor(u)
                    j0 = <Py_ssize_t>floor(v)
                    if i0 > cols - 2:
                        i0 = cols - 2
                    if i0 < 0:
                        i0 = 0
                    if j0 > rows - 2:
                        j0 = rows - 2
                    if j0 < 0:
                        j0 = 0
                    fu = u - i0
                    fv = v - j0
                    out[p, j0, i0] += w * r * (1 - fu) * (1 - fv)
                    out[p, j0, i0 + 1] += w * r * fu * (1 - fv)
                    out[p, j0 + 1, i0] += w * r * (1 - fu) * fv
                    out[p, j0 + 1, i0 + 1] += w * r * fu * fv


def bp_scatter_mip(const double[:, :, ::1] gvol, const double[:, ::1] poses,
                   int shape_flag, double sdd, double pitch_u, double pitch_v,
                   double ox, double oy, double oz, double vpitch, double q_taper,
                   double[:, :, :, ::1] out):
    """Exact transpose of the mip gather w.r.t. the level maps.

    out has shape [n_poses, L, rows, cols]; voxel gradients scatter into the
    same level pair (with the same blend weights) the gather sampled from.
    """
    cdef Py_ssize_t np_ = out.shape[0], levels = out.shape[1]
    cdef Py_ssize_t rows = out.shape[2], cols = out.shape[3]
    cdef Py_ssize_t nx = gvol.shape[2], ny = gvol.shape[1], nz = gvol.shape[0]
    cdef double footprint_num = vpitch * sdd / pitch_u
    cdef Py_ssize_t iz, iy, ix, p, l0, i0, j0
    cdef double px, py, pz, u, v, depth, q, w, g, f, lam, frac, fu, fv, c
    cdef double umax = cols - 1.0, vmax = rows - 1.0

    for p in prange(np_, nogil=True, schedule='static'):
        for iz in range(nz):
            pz = oz + iz * vpitch
            for iy in range(ny):
                py = oy + iy * vpitch
                for ix in range(nx):
                    g = gvol[iz, iy, ix]
                    if g == 0.0:
                        continue
                    px = ox + ix * vpitch
                    if not _project(poses, p, px, py, pz, shape_flag, sdd,
                                    pitch_u, pitch_v, &u, &v, &depth):
                        continue
                    if u < 0.0 or u > umax or v < 0.0 or v > vmax:
                        continue
                    if rows > 1:
                        q = 2.0 * v / vmax - 1.0
                    else:
                        q = 0.0
                    w = _taper(q, q_taper)
                    if levels > 1:
                        f = footprint_num / depth
                        if f > 1.0:
                            lam = log2(f)
                            if lam > levels - 1.0:
                                lam = levels - 1.0
                        else:
                            lam = 0.0
                        l0 = <Py_ssize_t>lam
                        if l0 > levels - 2:
                            l0 = levels - 2
                        frac = lam - l0
                    else:
                        l0 = 0
                        frac = 0.0
                    i0 = <Py_ssize_t>floor(u)
                    j0 = <Py_ssize_t>floor(v)
                    if i0 > cols - 2:
                        i0 = cols - 2
                    if i0 < 0:
                        i0 = 0
                    if j0 > rows - 2:
                        j0 = rows - 2
                    if j0 < 0:
                        j0 = 0
                    fu = u - i0
                    fv = v - j0
                    c = w * g * (1.0 - frac)
                    out[p, l0, j0, i0] += c * (1 - fu) * (1 - fv)
                    out[p, l0, j0, i0 + 1] += c * fu * (1 - fv)
                    out[p, l0, j0 + 1, i0] += c * (1 - fu) * fv
                    out[p, l0, j0 + 1, i0 + 1] += c * fu * fv
                    if frac > 0.0:
                        c = w * g * frac
                        out[p, l0 + 1, j0, i0] += c * (1 - fu) * (1 - fv)
                        out[p, l0 + 1, j0, i0 + 1] += c * fu * (1 - fv)
                        out[p, l0 + 1, j0 + 1, i0] += c * (1 - fu) * fv
                        out[p, l0 + 1, j0 + 1, i0 + 1] += c * fu * fv
