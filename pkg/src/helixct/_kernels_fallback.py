"""Pure-numpy kernel implementations, interchangeable with helixct._core.

Same sampling formulas and the same stratified RNG stream as the compiled
extension; slower, but dependency-free.  Keep in sync with _core.pyx.
"""

from __future__ import annotations

import numpy as np

backend_name = "fallback"

_U64 = np.uint64
_PHI = _U64(0x9E3779B97F4A7C15)
_SEG = _U64(0xD1B54A32D192ED03)
_M1 = _U64(0xBF58476D1CE4E5B9)
_M2 = _U64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0


def set_threads(n):
    pass


def _rand01(seed, ray_ids, j):
    with np.errstate(over="ignore"):
        z = _U64(seed) + ray_ids * _PHI + _U64(j) * _SEG
        z ^= z >> _U64(30)
        z *= _M1
        z ^= z >> _U64(27)
        z *= _M2
        z ^= z >> _U64(31)
    return (z >> _U64(11)).astype(np.float64) * _INV53


def _trilinear(vol, gx, gy, gz):
    nz, ny, nx = vol.shape
    inside = ((gx > -1.0) & (gy > -1.0) & (gz > -1.0)
              & (gx < nx) & (gy < ny) & (gz < nz))
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    iz = np.floor(gz).astype(np.int64)
    fx, fy, fz = gx - ix, gy - iy, gz - iz
    out = np.zeros(np.shape(gx))

    def vox(kz, ky, kx):
        ok = ((kx >= 0) & (kx < nx) & (ky >= 0) & (ky < ny)
              & (kz >= 0) & (kz < nz))
        v = vol[np.clip(kz, 0, nz - 1), np.clip(ky, 0, ny - 1), np.clip(kx, 0, nx - 1)]
        return v * ok

    c00 = vox(iz, iy, ix) * (1 - fx) + vox(iz, iy, ix + 1) * fx
    c01 = vox(iz, iy + 1, ix) * (1 - fx) + vox(iz, iy + 1, ix + 1) * fx
    c10 = vox(iz + 1, iy, ix) * (1 - fx) + vox(iz + 1, iy, ix + 1) * fx
    c11 = vox(iz + 1, iy + 1, ix) * (1 - fx) + vox(iz + 1, iy + 1, ix + 1) * fx
    out = (c00 * (1 - fy) + c01 * fy) * (1 - fz) + (c10 * (1 - fy) + c11 * fy) * fz
    return np.where(inside, out, 0.0)


def _taper_np(q, q_taper):
    aq = np.abs(q)
    if q_taper >= 1.0:
        return np.where(aq <= 1.0, 1.0, 0.0)
    ramp = np.cos(0.5 * np.pi * (aq - q_taper) / (1.0 - q_taper)) ** 2
    return np.where(aq <= q_taper, 1.0, np.where(aq <= 1.0, ramp, 0.0))


def _project_np(pose, pts, shape_flag, sdd, pitch_u, pitch_v):
    """Pose row (14,) x points [n,3] -> (u, v, depth, valid)."""
    xi = pts - pose[0:3]
    xn = xi @ pose[3:6]
    xu = xi @ pose[6:9]
    xv = xi @ pose[9:12]
    valid = xn > 1e-9
    xn_safe = np.where(valid, xn, 1.0)
    if shape_flag == 0:
        scale = sdd / xn_safe
        u = (xu * scale) / pitch_u + pose[12]
        v = (xv * scale) / pitch_v + pose[13]
        depth = xn
    else:
        rho = np.hypot(xn, xu)
        u = np.arctan2(xu, xn_safe) * sdd / pitch_u + pose[12]
        v = (xv * sdd / np.where(valid, rho, 1.0)) / pitch_v + pose[13]
        depth = rho
    return u, v, depth, valid


def _bilin_idx(u, v, rows, cols):
    i0 = np.clip(np.floor(u).astype(np.int64), 0, max(cols - 2, 0))
    j0 = np.clip(np.floor(v).astype(np.int64), 0, max(rows - 2, 0))
    return i0, j0, u - i0, v - j0


def _bilin_np(level_map, u, v):
    rows, cols = level_map.shape
    i0, j0, fu, fv = _bilin_idx(u, v, rows, cols)
    return ((1 - fv) * ((1 - fu) * level_map[j0, i0] + fu * level_map[j0, i0 + 1])
            + fv * ((1 - fu) * level_map[j0 + 1, i0] + fu * level_map[j0 + 1, i0 + 1]))


def _mip_lambda(depth, footprint_num, levels):
    f = footprint_num / depth
    lam = np.where(f > 1.0, np.log2(np.maximum(f, 1.0)), 0.0)
    lam = np.minimum(lam, levels - 1.0)
    l0 = np.minimum(lam.astype(np.int64), max(levels - 2, 0))
    return l0, lam - l0


def forward_march(vol, ox, oy, oz, vpitch, poses, shape_flag, sdd, pitch_u,
                  pitch_v, sup, step, stratified, seed, out):
    np_, rows_s, cols_s = out.shape
    nz, ny, nx = vol.shape
    lo = np.array([ox - vpitch, oy - vpitch, oz - vpitch])
    hi = np.array([ox + nx * vpitch, oy + ny * vpitch, oz + nz * vpitch])
    vr, vc = np.meshgrid(np.arange(rows_s), np.arange(cols_s), indexing="ij")
    u_px = ((vc + 0.5) / sup - 0.5).ravel()
    v_px = ((vr + 0.5) / sup - 0.5).ravel()
    nray = rows_s * cols_s
    ray_ids = (np.arange(nray, dtype=np.uint64))
    for p in range(np_):
        pose = poses[p]
        src = pose[0:3]
        cu, cv = pose[12], pose[13]
        if shape_flag == 0:
            pos = (src[None, :] + sdd * pose[3:6][None, :]
                   + np.outer((u_px - cu) * pitch_u, pose[6:9])
                   + np.outer((v_px - cv) * pitch_v, pose[9:12]))
        else:
            gamma = (u_px - cu) * pitch_u / sdd
            pos = (src[None, :]
                   + sdd * (np.outer(np.cos(gamma), pose[3:6]) + np.outer(np.sin(gamma), pose[6:9]))
                   + np.outer((v_px - cv) * pitch_v, pose[9:12]))
        d = pos - src[None, :]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t0 = np.zeros(nray)
        t1 = np.full(nray, 1e300)
        for ax in range(3):
            da = d[:, ax]
            nonpar = np.abs(da) > 1e-12
            da_safe = np.where(nonpar, da, 1.0)
            ta = (lo[ax] - src[ax]) / da_safe
            tb = (hi[ax] - src[ax]) / da_safe
            tlo, thi = np.minimum(ta, tb), np.maximum(ta, tb)
            t0 = np.where(nonpar, np.maximum(t0, tlo), t0)
            t1 = np.where(nonpar, np.minimum(t1, thi), t1)
            miss = ~nonpar & ((src[ax] <= lo[ax]) | (src[ax] >= hi[ax]))
            t1 = np.where(miss, -1.0, t1)
        span = np.maximum(t1 - t0, 0.0)
        nseg = int(np.ceil(span.max() / step)) if span.max() > 0 else 0
        acc = np.zeros(nray)
        base = np.uint64(p) * np.uint64(rows_s) * np.uint64(cols_s)
        for j in range(nseg):
            seg0 = t0 + j * step
            seg_len = np.clip(t1 - seg0, 0.0, step)
            if stratified:
                uoff = _rand01(seed, base + ray_ids, j)
            else:
                uoff = 0.5
            t = seg0 + uoff * seg_len
            pts = src[None, :] + t[:, None] * d
            val = _trilinear(vol, (pts[:, 0] - ox) / vpitch,
                             (pts[:, 1] - oy) / vpitch,
                             (pts[:, 2] - oz) / vpitch)
            acc += seg_len * val
        out[p] = acc.reshape(rows_s, cols_s)


def _voxel_grid(nx, ny, nz, ox, oy, oz, vpitch):
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    pts = np.empty((nx * ny * nz, 3))
    pts[:, 0] = ox + xx.ravel() * vpitch
    pts[:, 1] = oy + yy.ravel() * vpitch
    pts[:, 2] = oz + zz.ravel() * vpitch
    return pts


def bp_gather(maps, poses, shape_flag, sdd, pitch_u, pitch_v, ox, oy, oz,
              vpitch, q_taper, accum, wsum):
    np_, levels, rows, cols = maps.shape
    nz, ny, nx = accum.shape
    footprint_num = vpitch * sdd / pitch_u
    pts = _voxel_grid(nx, ny, nz, ox, oy, oz, vpitch)
    acc = accum.reshape(-1)
    wacc = wsum.reshape(-1)
    for p in range(np_):
        u, v, depth, valid = _project_np(poses[p], pts, shape_flag, sdd, pitch_u, pitch_v)
        valid &= (u >= 0.0) & (u <= cols - 1.0) & (v >= 0.0) & (v <= rows - 1.0)
        if not valid.any():
            continue
        uu, vv, dd = u[valid], v[valid], depth[valid]
        q = 2.0 * vv / (rows - 1.0) - 1.0 if rows > 1 else np.zeros(len(vv))
        w = _taper_np(q, q_taper)
        if levels > 1:
            l0, frac = _mip_lambda(dd, footprint_num, levels)
            val = np.zeros(len(uu))
            for lev in range(levels):
                m0 = l0 == lev
                if m0.any():
                    val[m0] += (1.0 - frac[m0]) * _bilin_np(maps[p, lev], uu[m0], vv[m0])
                m1 = (l0 + 1 == lev) & (frac > 0.0)
                if m1.any():
                    val[m1] += frac[m1] * _bilin_np(maps[p, lev], uu[m1], vv[m1])
        else:
            val = _bilin_np(maps[p, 0], uu, vv)
        acc[valid] += w * val
        wacc[valid] += w


def bp_scatter(residual, poses, shape_flag, sdd, pitch_u, pitch_v, ox, oy, oz,
               vpitch, q_taper, out):
    np_, rows, cols = out.shape
    nz, ny, nx = residual.shape
    pts = _voxel_grid(nx, ny, nz, ox, oy, oz, vpitch)
    r_flat = residual.reshape(-1)
    nzmask = r_flat != 0.0
    for p in range(np_):
        u, v, depth, valid = _project_np(poses[p], pts, shape_flag, sdd, pitch_u, pitch_v)
        valid &= nzmask & (u >= 0.0) & (u <= cols - 1.0) & (v >= 0.0) & (v <= rows - 1.0)
        if not valid.any():
            continue
        uu, vv, rr = u[valid], v[valid], r_flat[valid]
        q = 2.0 * vv / (rows - 1.0) - 1.0 if rows > 1 else np.zeros(len(vv))
        w = _taper_np(q, q_taper)
        i0, j0, fu, fv = _bilin_idx(uu, vv, rows, cols)
        wr = w * rr
        np.add.at(out[p], (j0, i0), wr * (1 - fu) * (1 - fv))
        np.add.at(out[p], (j0, i0 + 1), wr * fu * (1 - fv))
        np.add.at(out[p], (j0 + 1, i0), wr * (1 - fu) * fv)
        np.add.at(out[p], (j0 + 1, i0 + 1), wr * fu * fv)


def bp_scatter_mip(gvol, poses, shape_flag, sdd, pitch_u, pitch_v, ox, oy, oz,
                   vpitch, q_taper, out):
    np_, levels, rows, cols = out.shape
    nz, ny, nx = gvol.shape
    footprint_num = vpitch * sdd / pitch_u
    pts = _voxel_grid(nx, ny, nz, ox, oy, oz, vpitch)
    g_flat = gvol.reshape(-1)
    nzmask = g_flat != 0.0
    for p in range(np_):
        u, v, depth, valid = _project_np(poses[p], pts, shape_flag, sdd, pitch_u, pitch_v)
        valid &= nzmask & (u >= 0.0) & (u <= cols - 1.0) & (v >= 0.0) & (v <= rows - 1.0)
        if not valid.any():
            continue
        uu, vv, dd, gg = u[valid], v[valid], depth[valid], g_flat[valid]
        q = 2.0 * vv / (rows - 1.0) - 1.0 if rows > 1 else np.zeros(len(vv))
        w = _taper_np(q, q_taper)
        if levels > 1:
            l0, frac = _mip_lambda(dd, footprint_num, levels)
        else:
            l0 = np.zeros(len(uu), dtype=np.int64)
            frac = np.zeros(len(uu))
        i0, j0, fu, fv = _bilin_idx(uu, vv, rows, cols)
        for blend_l, blend_c in ((l0, w * gg * (1.0 - frac)), (l0 + 1, w * gg * frac)):
            sel = blend_c != 0.0
            if not sel.any():
                continue
            bl, bc = blend_l[sel], blend_c[sel]
            bi, bj, bfu, bfv = i0[sel], j0[sel], fu[sel], fv[sel]
            np.add.at(out[p], (bl, bj, bi), bc * (1 - bfu) * (1 - bfv))
            np.add.at(out[p], (bl, bj, bi + 1), bc * bfu * (1 - bfv))
            np.add.at(out[p], (bl, bj + 1, bi), bc * (1 - bfu) * bfv)
            np.add.at(out[p], (bl, bj + 1, bi + 1), bc * bfu * bfv)
