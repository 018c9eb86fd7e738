"""Differentiable projection operators and the filter bank.

Forward model: stratified/midpoint ray marching through a trilinearly
interpolated voxel grid, optionally simulated at 4x detector resolution and
downsampled with a Lanczos-3 filter.  Reverse model: cone-beam backprojection
that samples each projection at the voxel's footprint-matched mip level.
The two are deliberately an unmatched adjoint pair; the exact bilinear
scatter transpose is kept alongside for verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from helixct import _backend, filters
from helixct.geometry import DetectorShape, ScanGeometry, pose_pack
from helixct.phantom import EllipsoidPhantom, Volume, VolumeSpec, analytic_line_integrals

MIP_LEVELS = 5
Q_TAPER_DEFAULT = 0.8
WEIGHT_FLOOR_FRAC = 1e-6

backend_name = _backend.backend_name
set_threads = _backend.set_threads


class Space(Enum):
    LOG_ATTENUATION = "log"
    PHOTON_INTENSITY = "intensity"


class Sampling(Enum):
    MIDPOINT = "midpoint"
    STRATIFIED = "stratified"


@dataclass
class Sinogram:
    """Stack of 2D projections bound to a scan geometry.

    `proj_indices` identifies which poses of the geometry the stack covers
    (None = all of them, in order).
    """

    data: np.ndarray
    space: Space
    geometry: ScanGeometry
    i0_photons: float = None
    proj_indices: np.ndarray = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("sinogram data must be [n_projections, rows, cols]")
        g = self.geometry
        if self.data.shape[1] != g.detector_rows or self.data.shape[2] != g.detector_cols:
            raise ValueError(f"sinogram shape {self.data.shape} does not match "
                             f"detector {g.detector_rows}x{g.detector_cols}")
        if self.proj_indices is None:
            if self.data.shape[0] != g.n_projections:
                raise ValueError("projection count mismatch with geometry")
            self.proj_indices = np.arange(g.n_projections)
        else:
            self.proj_indices = np.asarray(self.proj_indices, dtype=np.int64)
            if len(self.proj_indices) != self.data.shape[0]:
                raise ValueError("proj_indices length mismatch")
        if self.space is Space.PHOTON_INTENSITY and self.data.size and self.data.min() <= 0:
            raise ValueError("photon intensities must be > 0")


@dataclass
class RampFilter:
    taps: np.ndarray

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if not np.all(np.isfinite(self.taps)):
            raise ValueError("ramp taps must be finite")


@dataclass
class TaperWeights:
    q_taper: float
    weights: np.ndarray

    def weight_at(self, q):
        return filters.taper_weight_at(q, self.q_taper)


@dataclass
class MipPyramid:
    levels: list
    level_bandwidths: list = field(default_factory=list)


def ramp_init(detector_cols: int, pixel_pitch_u_mm: float) -> RampFilter:
    """Discrete ramp taps of length 2*detector_cols (see filters.ramp_taps)."""
    return RampFilter(filters.ramp_taps(detector_cols, pixel_pitch_u_mm))


def ramp_convolve(sinogram_rows: np.ndarray, filt) -> np.ndarray:
    """Convolve along the detector column axis (the last one), zero-padded."""
    taps = filt.taps if isinstance(filt, RampFilter) else np.asarray(filt, dtype=float)
    return filters.ramp_convolve_rows(np.asarray(sinogram_rows, dtype=float), taps)


def taper_weights(rows: int, q_taper: float = Q_TAPER_DEFAULT) -> TaperWeights:
    return TaperWeights(q_taper, filters.taper_row_weights(rows, q_taper))


def separable_lowpass(projections: np.ndarray, kernel_1d) -> np.ndarray:
    return filters.separable_lowpass(np.asarray(projections, dtype=float), kernel_1d)


# --- forward projection -------------------------------------------------------

def forward_project(volume: Volume, geometry: ScanGeometry, proj_indices=None,
                    step_fraction: float = 0.5, supersample_uv: int = 1,
                    rng_seed: int = 0, sampling: Sampling = Sampling.MIDPOINT) -> Sinogram:
    """Line integrals of the trilinearly interpolated volume along pixel rays.

    Marching step is step_fraction * voxel_pitch; sample position within each
    step is the midpoint or a stratified-uniform draw (deterministic in
    rng_seed).  supersample_uv=4 simulates at 4x detector resolution and
    applies a separable Lanczos-3 4:1 downsample.
    """
    if not (0.0 < step_fraction <= 1.0):
        raise ValueError("step_fraction must be in (0, 1]")
    if supersample_uv not in (1, 4):
        raise ValueError("supersample_uv must be 1 or 4")
    if proj_indices is None:
        proj_indices = np.arange(geometry.n_projections)
    proj_indices = np.asarray(proj_indices, dtype=np.int64)
    rows, cols = geometry.detector_rows, geometry.detector_cols
    if len(proj_indices) == 0:
        return Sinogram(np.zeros((0, rows, cols)), Space.LOG_ATTENUATION, geometry,
                        proj_indices=proj_indices)
    poses = pose_pack(geometry, proj_indices)
    sup = supersample_uv
    out = np.zeros((len(proj_indices), rows * sup, cols * sup))
    _backend.forward_march(
        np.ascontiguousarray(volume.data), *volume.origin_mm, volume.voxel_pitch_mm,
        poses, _shape_flag(geometry), geometry.source_to_detector_mm,
        geometry.pixel_pitch_u_mm, geometry.pixel_pitch_v_mm, sup,
        step_fraction * volume.voxel_pitch_mm,
        1 if sampling is Sampling.STRATIFIED else 0, rng_seed, out)
    if sup > 1:
        out = downsample_uv(out, sup, rows, cols)
    return Sinogram(out, Space.LOG_ATTENUATION, geometry, proj_indices=proj_indices)


def downsample_uv(maps_hi: np.ndarray, factor: int, rows: int, cols: int) -> np.ndarray:
    """Separable Lanczos-3 factor:1 downsample of [n, rows*f, cols*f] maps."""
    du = filters.lanczos3_downsample_matrix(cols, factor)
    dv = filters.lanczos3_downsample_matrix(rows, factor)
    return np.einsum("rk,nkc,sc->nrs", dv, maps_hi, du, optimize=True)


def upsample_uv_adjoint(maps_lo: np.ndarray, factor: int) -> np.ndarray:
    """Transpose of downsample_uv (gradient spreading to the fine grid)."""
    n, rows, cols = maps_lo.shape
    du = filters.lanczos3_downsample_matrix(cols, factor)
    dv = filters.lanczos3_downsample_matrix(rows, factor)
    return np.einsum("kr,nkc,cs->nrs", dv, maps_lo, du, optimize=True)


def _shape_flag(geometry: ScanGeometry) -> int:
    return 0 if geometry.detector_shape is DetectorShape.FLAT_PANEL else 1


# --- mip pyramid --------------------------------------------------------------

def build_mip_pyramid(projection_2d: np.ndarray, levels: int = MIP_LEVELS) -> MipPyramid:
    """Full-resolution Lanczos-3 prefiltered pyramid; level 0 is the input."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    proj = np.asarray(projection_2d, dtype=float)
    stack = build_pyramid_stack(proj[None], levels)[0]
    return MipPyramid([stack[k] for k in range(levels)],
                      [2.0 ** (-k) for k in range(levels)])


def build_pyramid_stack(maps: np.ndarray, levels: int = MIP_LEVELS) -> np.ndarray:
    """[n, rows, cols] -> [n, L, rows, cols] prefiltered level stack."""
    n, rows, cols = maps.shape
    mats = filters.mip_level_matrices(rows, cols, levels)
    out = np.empty((n, levels, rows, cols))
    out[:, 0] = maps
    for lev in range(1, levels):
        mv, mu = mats[lev]
        out[:, lev] = np.einsum("rk,nkc,sc->nrs", mv, maps, mu, optimize=True)
    return out


def pyramid_stack_adjoint(grad_levels: np.ndarray) -> np.ndarray:
    """Transpose of build_pyramid_stack: [n, L, rows, cols] -> [n, rows, cols]."""
    n, levels, rows, cols = grad_levels.shape
    mats = filters.mip_level_matrices(rows, cols, levels)
    out = grad_levels[:, 0].copy()
    for lev in range(1, levels):
        mv, mu = mats[lev]
        out += np.einsum("kr,nkc,cs->nrs", mv, grad_levels[:, lev], mu, optimize=True)
    return out


def sample_mip(pyramid: MipPyramid, u, v, footprint_pixels):
    """Footprint-matched pyramid sample; out-of-bounds returns (0, invalid).

    Returns (value, valid) with array support.  The mip level is
    lambda = clamp(log2(max(footprint, 1)), 0, L-1), bilinear within the two
    bracketing levels and linear across them.
    """
    from helixct import _kernels_fallback as knp

    levels = len(pyramid.levels)
    rows, cols = pyramid.levels[0].shape
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    f = np.broadcast_to(np.asarray(footprint_pixels, dtype=float), u.shape)
    valid = (u >= 0.0) & (u <= cols - 1.0) & (v >= 0.0) & (v <= rows - 1.0)
    val = np.zeros(u.shape)
    if valid.any():
        uu, vv, ff = u[valid], v[valid], f[valid]
        picked = np.zeros(len(uu))
        if levels > 1:
            l0, frac = knp._mip_lambda(np.ones_like(ff), ff, levels)
        else:
            l0, frac = np.zeros(len(uu), dtype=np.int64), np.zeros(len(uu))
        for lev in range(levels):
            lev_map = np.asarray(pyramid.levels[lev], dtype=float)
            m0 = l0 == lev
            if m0.any():
                picked[m0] += (1.0 - frac[m0]) * knp._bilin_np(lev_map, uu[m0], vv[m0])
            m1 = (l0 + 1 == lev) & (frac > 0.0)
            if m1.any():
                picked[m1] += frac[m1] * knp._bilin_np(lev_map, uu[m1], vv[m1])
        val[valid] = picked
    if val.size == 1:
        return float(val[0]), bool(valid[0])
    return val, valid


# --- backprojection -----------------------------------------------------------

def _as_maps(sino_or_maps) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(sino_or_maps, Sinogram):
        return sino_or_maps.data, sino_or_maps.proj_indices
    return np.asarray(sino_or_maps, dtype=float), None


def backproject(sino_or_maps, geometry: ScanGeometry, volume_spec: VolumeSpec,
                taper: TaperWeights = None, use_mip: bool = True,
                proj_indices=None) -> tuple[Volume, Volume]:
    """Cone-beam backprojection; returns (accumulator, weight) volumes.

    Each voxel center is projected onto every contributing detector; the
    sampled value times the row taper weight accumulates, and the taper
    weight alone accumulates into the weight volume.
    """
    maps, own_idx = _as_maps(sino_or_maps)
    if proj_indices is None:
        proj_indices = own_idx if own_idx is not None else np.arange(geometry.n_projections)
    proj_indices = np.asarray(proj_indices, dtype=np.int64)
    if maps.shape[0] != len(proj_indices):
        raise ValueError("projection count mismatch")
    if taper is None:
        taper = taper_weights(geometry.detector_rows)
    if use_mip:
        stack = build_pyramid_stack(maps, MIP_LEVELS)
    else:
        stack = np.ascontiguousarray(maps[:, None])
    nx, ny, nz = volume_spec.dims
    accum = np.zeros((nz, ny, nx))
    wsum = np.zeros((nz, ny, nx))
    if len(proj_indices):
        poses = pose_pack(geometry, proj_indices)
        _backend.bp_gather(stack, poses, _shape_flag(geometry),
                           geometry.source_to_detector_mm, geometry.pixel_pitch_u_mm,
                           geometry.pixel_pitch_v_mm, *volume_spec.origin_mm,
                           volume_spec.voxel_pitch_mm, taper.q_taper, accum, wsum)
    pitch, origin = volume_spec.voxel_pitch_mm, tuple(volume_spec.origin_mm)
    return Volume(accum, pitch, origin), Volume(wsum, pitch, origin)


def normalize_backprojection(accum: Volume, weight: Volume,
                             floor_frac: float = WEIGHT_FLOOR_FRAC) -> Volume:
    """accum / weight where the weight is meaningful, 0 elsewhere."""
    wmax = weight.data.max() if weight.data.size else 0.0
    floor = floor_frac * wmax
    safe = weight.data > floor
    out = np.zeros_like(accum.data)
    np.divide(accum.data, weight.data, out=out, where=safe)
    return Volume(out, accum.voxel_pitch_mm, tuple(accum.origin_mm))


def backproject_adjoint_scatter(residual: Volume, geometry: ScanGeometry,
                                taper: TaperWeights = None,
                                proj_indices=None) -> np.ndarray:
    """Exact transpose of backproject(use_mip=False) without normalization.

    Returns per-projection gradient maps [n, rows, cols].
    """
    if proj_indices is None:
        proj_indices = np.arange(geometry.n_projections)
    proj_indices = np.asarray(proj_indices, dtype=np.int64)
    if taper is None:
        taper = taper_weights(geometry.detector_rows)
    out = np.zeros((len(proj_indices), geometry.detector_rows, geometry.detector_cols))
    if len(proj_indices):
        poses = pose_pack(geometry, proj_indices)
        _backend.bp_scatter(np.ascontiguousarray(residual.data), poses,
                            _shape_flag(geometry), geometry.source_to_detector_mm,
                            geometry.pixel_pitch_u_mm, geometry.pixel_pitch_v_mm,
                            *residual.origin_mm, residual.voxel_pitch_mm,
                            taper.q_taper, out)
    return out


def mip_backproject_raw(maps: np.ndarray, geometry: ScanGeometry,
                        volume_spec: VolumeSpec, proj_indices) -> Volume:
    """Mipmapped backprojection accumulator with unit row weights.

    This is the gradient operator standing in for the transpose of the
    ray-marching projector (the unmatched half of the operator pair).
    """
    accum, _ = backproject(maps, geometry, volume_spec,
                           taper=TaperWeights(1.0, np.ones(geometry.detector_rows)),
                           use_mip=True, proj_indices=proj_indices)
    return accum


def mip_backproject_input_grad(grad_vol: np.ndarray, geometry: ScanGeometry,
                               volume_spec: VolumeSpec, taper: TaperWeights,
                               proj_indices) -> np.ndarray:
    """Exact transpose of the mipmapped gather w.r.t. its input maps.

    Scatters voxel gradients into the sampled level pair, then applies the
    transposed pyramid filters; returns [n, rows, cols] gradient maps.
    """
    proj_indices = np.asarray(proj_indices, dtype=np.int64)
    out_levels = np.zeros((len(proj_indices), MIP_LEVELS,
                           geometry.detector_rows, geometry.detector_cols))
    if len(proj_indices):
        poses = pose_pack(geometry, proj_indices)
        _backend.bp_scatter_mip(np.ascontiguousarray(grad_vol), poses,
                                _shape_flag(geometry), geometry.source_to_detector_mm,
                                geometry.pixel_pitch_u_mm, geometry.pixel_pitch_v_mm,
                                *volume_spec.origin_mm, volume_spec.voxel_pitch_mm,
                                taper.q_taper, out_levels)
    return pyramid_stack_adjoint(out_levels)


# --- analytic simulation ------------------------------------------------------

def analytic_sinogram(phantom: EllipsoidPhantom, geometry: ScanGeometry,
                      supersample_uv: int = 4, proj_indices=None) -> Sinogram:
    """Exact phantom projections (no voxel grid): the simulation oracle.

    Integrals are evaluated per detector (sub)pixel ray with the closed-form
    ellipsoid chords, then Lanczos-downsampled when supersample_uv=4.
    """
    if supersample_uv not in (1, 4):
        raise ValueError("supersample_uv must be 1 or 4")
    if proj_indices is None:
        proj_indices = np.arange(geometry.n_projections)
    proj_indices = np.asarray(proj_indices, dtype=np.int64)
    rows, cols = geometry.detector_rows, geometry.detector_cols
    sup = supersample_uv
    rows_s, cols_s = rows * sup, cols * sup
    poses = pose_pack(geometry, proj_indices)
    sdd = geometry.source_to_detector_mm
    pu, pv = geometry.pixel_pitch_u_mm, geometry.pixel_pitch_v_mm
    flat = geometry.detector_shape is DetectorShape.FLAT_PANEL
    vr, vc = np.meshgrid(np.arange(rows_s), np.arange(cols_s), indexing="ij")
    u_px = ((vc + 0.5) / sup - 0.5).ravel()
    v_px = ((vr + 0.5) / sup - 0.5).ravel()
    out = np.empty((len(proj_indices), rows_s, cols_s))
    for k, pose in enumerate(poses):
        src = pose[0:3]
        if flat:
            pos = (src[None, :] + sdd * pose[3:6][None, :]
                   + np.outer((u_px - pose[12]) * pu, pose[6:9])
                   + np.outer((v_px - pose[13]) * pv, pose[9:12]))
        else:
            gamma = (u_px - pose[12]) * pu / sdd
            pos = (src[None, :]
                   + sdd * (np.outer(np.cos(gamma), pose[3:6]) + np.outer(np.sin(gamma), pose[6:9]))
                   + np.outer((v_px - pose[13]) * pv, pose[9:12]))
        d = pos - src[None, :]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        origins = np.broadcast_to(src, d.shape)
        out[k] = analytic_line_integrals(phantom, origins, d).reshape(rows_s, cols_s)
    if sup > 1:
        out = downsample_uv(out, sup, rows, cols)
    return Sinogram(out, Space.LOG_ATTENUATION, geometry, proj_indices=proj_indices)
