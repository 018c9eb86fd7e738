"""Self-supervised calibration of the learnable reconstruction parameters.

The trainable pipeline is wFBP with its ramp taps and global gain exposed as
parameters.  Each training step reconstructs a thin z-slab from a large set
of input projections, re-projects the slab onto a few held-out target
projections, and scores the match in photon-intensity space with a
noise-aware weighted loss.  Gradients flow through the re-projection (via
the mipmapped backprojection standing in for its transpose), the
normalization, the backprojection transpose, and the ramp convolution back
to the taps and the gain.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from helixct import filters
from helixct import operators as ops
from helixct.geometry import DetectorShape, ScanGeometry
from helixct.phantom import Volume, VolumeSpec
from helixct.recon import AdamConfig


class CalibrationError(RuntimeError):
    pass


class LossSpace(Enum):
    PHOTON_WEIGHTED = "photon"
    LOG_L2 = "log"


@dataclass(frozen=True)
class DoseModel:
    """Reference photon count and the fraction of it actually delivered."""

    i0_full: float
    dose_fraction: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if self.i0_full <= 0:
            raise ValueError("i0_full must be > 0")
        if not (0.0 < self.dose_fraction <= 1.0):
            raise ValueError("dose_fraction must be in (0, 1]")

    @property
    def i0(self) -> float:
        return self.i0_full * self.dose_fraction


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint input/target projection sets over one z-slab."""

    input_indices: np.ndarray
    target_indices: np.ndarray
    z_slab_mm: tuple


@dataclass
class LossConfig:
    target_lowpass: tuple = (0.2, 1.0, 0.2)
    highpass_difference: bool = True
    space: LossSpace = LossSpace.PHOTON_WEIGHTED

    def __post_init__(self):
        if len(self.target_lowpass) % 2 == 0:
            raise ValueError("target_lowpass must have odd length")


class LearnableParams:
    """Ramp taps and global gain with Adam moments and EMA shadows.

    The gain is carried as log(gain) so a multiplicative quantity gets
    additive updates; `gain` always reports the exponentiated value.  Tap
    updates are preconditioned by each tap's initial magnitude (floored at
    1% of the largest tap): Adam alone would step every tap by the same
    absolute amount, which is a violent relative change for the small
    far-from-center taps and destabilizes the reconstruction.
    """

    TAP_SCALE_FLOOR = 0.01

    def __init__(self, taps: np.ndarray, gain: float):
        if gain <= 0:
            raise ValueError("gain must be > 0")
        self.taps = np.asarray(taps, dtype=np.float64).copy()
        if not np.all(np.isfinite(self.taps)):
            raise ValueError("taps must be finite")
        self.log_gain = math.log(gain)
        ref = np.abs(self.taps).max()
        if ref == 0:
            self.tap_scale = np.ones(self.taps.size)
        else:
            self.tap_scale = np.maximum(np.abs(self.taps) / ref, self.TAP_SCALE_FLOOR)
        n = self.taps.size + 1
        self.adam_m = np.zeros(n)
        self.adam_v = np.zeros(n)
        self.adam_t = 0
        self.ema_taps = self.taps.copy()
        self.ema_log_gain = self.log_gain
        self.floor_events = 0

    @property
    def gain(self) -> float:
        return math.exp(self.log_gain)

    @property
    def ema_gain(self) -> float:
        return math.exp(self.ema_log_gain)

    def copy(self) -> "LearnableParams":
        out = LearnableParams(self.taps, self.gain)
        out.adam_m = self.adam_m.copy()
        out.adam_v = self.adam_v.copy()
        out.adam_t = self.adam_t
        out.ema_taps = self.ema_taps.copy()
        out.ema_log_gain = self.ema_log_gain
        out.floor_events = self.floor_events
        return out

    def ema_snapshot(self) -> "LearnableParams":
        return LearnableParams(self.ema_taps, self.ema_gain)

    def perturbed_taps(self, rel_scale: float, rng_seed: int) -> "LearnableParams":
        rng = np.random.default_rng(rng_seed)
        taps = self.taps * (1.0 + rel_scale * rng.standard_normal(self.taps.size))
        return LearnableParams(taps, self.gain)

    def adam_update(self, grad_taps, grad_log_gain, adam: AdamConfig,
                    tap_lr_scale: float, gain_lr_scale: float, ema_decay: float):
        grad = np.concatenate([grad_taps, [grad_log_gain]])
        self.adam_t += 1
        self.adam_m = adam.beta1 * self.adam_m + (1.0 - adam.beta1) * grad
        self.adam_v = adam.beta2 * self.adam_v + (1.0 - adam.beta2) * grad * grad
        mhat = self.adam_m / (1.0 - adam.beta1 ** self.adam_t)
        vhat = self.adam_v / (1.0 - adam.beta2 ** self.adam_t)
        step = adam.lr * mhat / (np.sqrt(vhat) + adam.eps)
        self.taps = self.taps - tap_lr_scale * self.tap_scale * step[:-1]
        self.log_gain = self.log_gain - gain_lr_scale * step[-1]
        self.ema_taps = ema_decay * self.ema_taps + (1.0 - ema_decay) * self.taps
        self.ema_log_gain = ema_decay * self.ema_log_gain + (1.0 - ema_decay) * self.log_gain


# --- noise model and space conversions ------------------------------------------

def add_poisson_noise(sinogram: ops.Sinogram, dose: DoseModel) -> ops.Sinogram:
    """Poisson counting noise applied in photon space, returned in log space.

    Counts are clamped to at least one photon so the log stays finite.
    """
    if sinogram.space is not ops.Space.LOG_ATTENUATION:
        raise ValueError("expected a log-attenuation sinogram")
    i0 = dose.i0
    expected = i0 * np.exp(-sinogram.data)
    rng = np.random.default_rng(dose.rng_seed)
    counts = np.maximum(rng.poisson(expected).astype(np.float64), 1.0)
    noisy = -np.log(counts / i0)
    return ops.Sinogram(noisy, ops.Space.LOG_ATTENUATION, sinogram.geometry,
                        i0_photons=i0, proj_indices=sinogram.proj_indices)


def to_intensity(p, i0: float):
    if i0 <= 0:
        raise ValueError("i0 must be > 0")
    return i0 * np.exp(-np.asarray(p, dtype=float))


def to_log(intensity, i0: float):
    intensity = np.asarray(intensity, dtype=float)
    if i0 <= 0:
        raise ValueError("i0 must be > 0")
    if intensity.size and intensity.min() <= 0:
        raise ValueError("intensities must be > 0")
    return -np.log(intensity / i0)


# --- losses ----------------------------------------------------------------------

def _highpass_taps(cols: int) -> np.ndarray:
    # fixed (non-learned) ramp at unit pixel spacing, detector width
    return filters.ramp_taps(cols, 1.0)


def photon_loss(x_hat: np.ndarray, y_hat: np.ndarray, config: LossConfig,
                mask: np.ndarray = None, w_override: np.ndarray = None
                ) -> tuple[float, np.ndarray]:
    """Weighted photon-space squared error and its gradient w.r.t. x_hat.

    The difference is scaled by w = 1/x_hat, which is treated as a constant
    (its gradient is defined to be zero), optionally high-pass filtered
    along detector rows, squared, and averaged over the contributing
    pixels.  `mask` zeroes out pixels that the loss should ignore;
    `w_override` substitutes the frozen weight (used by gradient checks).
    """
    x_hat = np.asarray(x_hat, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if x_hat.shape != y_hat.shape:
        raise ValueError("x_hat and y_hat must have the same shape")
    if x_hat.size == 0:
        return 0.0, np.zeros_like(x_hat)
    if x_hat.min() <= 0 or y_hat.min() <= 0:
        raise ValueError("photon intensities must be > 0")
    w = (1.0 / x_hat) if w_override is None else np.asarray(w_override, dtype=float)
    m = np.ones_like(x_hat) if mask is None else np.asarray(mask, dtype=float)
    n_valid = m.sum()
    if n_valid == 0:
        return 0.0, np.zeros_like(x_hat)
    d = m * w * (x_hat - y_hat)
    if config.highpass_difference:
        taps = _highpass_taps(x_hat.shape[-1])
        r = filters.ramp_convolve_rows(d, taps)
        value = float((r * r).sum()) / n_valid
        grad_d = filters.ramp_convolve_adjoint_rows(2.0 * r, taps) / n_valid
    else:
        value = float((d * d).sum()) / n_valid
        grad_d = 2.0 * d / n_valid
    return value, grad_d * m * w


def log_l2_loss(p_hat: np.ndarray, p_target: np.ndarray, mask: np.ndarray = None
                ) -> tuple[float, np.ndarray]:
    """Plain masked MSE in log-attenuation space (comparison baseline)."""
    p_hat = np.asarray(p_hat, dtype=float)
    p_target = np.asarray(p_target, dtype=float)
    if p_hat.shape != p_target.shape:
        raise ValueError("shape mismatch")
    m = np.ones_like(p_hat) if mask is None else np.asarray(mask, dtype=float)
    n_valid = m.sum()
    if n_valid == 0:
        return 0.0, np.zeros_like(p_hat)
    d = m * (p_hat - p_target)
    return float((d * d).sum()) / n_valid, 2.0 * d / n_valid


# --- slab selection and projection splits ---------------------------------------

def _slab_reach_mm(geometry: ScanGeometry, volume_spec: VolumeSpec) -> float:
    """Half-height of the cone at the far edge of the volume, at iso scale."""
    nx, ny, _ = volume_spec.dims
    ox, oy, _ = volume_spec.origin_mm
    pitch = volume_spec.voxel_pitch_mm
    x_ext = max(abs(ox - pitch), abs(ox + nx * pitch))
    y_ext = max(abs(oy - pitch), abs(oy + ny * pitch))
    r_xy = math.hypot(x_ext, y_ext)
    half_v = 0.5 * geometry.detector_rows * geometry.pixel_pitch_v_mm
    return half_v * (geometry.source_to_iso_mm + r_xy) / geometry.source_to_detector_mm


def overlapping_projections(geometry: ScanGeometry, volume_spec: VolumeSpec,
                            z_slab_mm: tuple) -> np.ndarray:
    """Indices of projections whose cone can intersect the slab's z-range."""
    z_lo, z_hi = z_slab_mm
    if z_hi <= z_lo:
        raise ValueError("slab must have positive thickness")
    reach = _slab_reach_mm(geometry, volume_spec)
    src_z = np.array([geometry.z_of(i) for i in range(geometry.n_projections)])
    return np.nonzero((src_z >= z_lo - reach) & (src_z <= z_hi + reach))[0]


def make_split(geometry: ScanGeometry, volume_spec: VolumeSpec, z_slab_mm: tuple,
               n_targets: int, rng_seed: int, exclude_targets: bool = True) -> SplitPlan:
    """Uniformly random held-out target set among slab-overlapping projections.

    Inputs are the remaining overlapping projections, or all of them when
    exclusion is disabled (an ablation mode, not the default).
    """
    overlap = overlapping_projections(geometry, volume_spec, z_slab_mm)
    if overlap.size == 0:
        raise ValueError(f"no projections overlap slab z={z_slab_mm}")
    if n_targets >= overlap.size:
        raise ValueError(f"n_targets={n_targets} must be < {overlap.size} "
                         "overlapping projections")
    rng = np.random.default_rng(rng_seed)
    targets = np.sort(rng.choice(overlap, size=n_targets, replace=False))
    if exclude_targets:
        inputs = np.setdiff1d(overlap, targets)
    else:
        inputs = overlap
    return SplitPlan(inputs.astype(np.int64), targets.astype(np.int64),
                     (float(z_slab_mm[0]), float(z_slab_mm[1])))


def slab_volume_spec(volume_spec: VolumeSpec, z_index: int, slab_voxels: int
                     ) -> VolumeSpec:
    """Sub-grid covering `slab_voxels` z-layers starting at `z_index`."""
    nx, ny, nz = volume_spec.dims
    if not (0 <= z_index and z_index + slab_voxels <= nz):
        raise ValueError(f"slab [{z_index}, {z_index + slab_voxels}) outside 0..{nz}")
    ox, oy, oz = volume_spec.origin_mm
    pitch = volume_spec.voxel_pitch_mm
    return VolumeSpec((nx, ny, slab_voxels), pitch, (ox, oy, oz + z_index * pitch))


def _pixel_ray_dirs(geometry: ScanGeometry, pose_row: np.ndarray, supersample: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Source position and unit ray directions for every (sub)pixel of a pose."""
    rows_s = geometry.detector_rows * supersample
    cols_s = geometry.detector_cols * supersample
    vr, vc = np.meshgrid(np.arange(rows_s), np.arange(cols_s), indexing="ij")
    u_px = (vc + 0.5) / supersample - 0.5 - pose_row[12]
    v_px = (vr + 0.5) / supersample - 0.5 - pose_row[13]
    src = pose_row[0:3]
    n_ax, u_ax, v_ax = pose_row[3:6], pose_row[6:9], pose_row[9:12]
    sdd = geometry.source_to_detector_mm
    pu, pv = geometry.pixel_pitch_u_mm, geometry.pixel_pitch_v_mm
    if geometry.detector_shape is DetectorShape.FLAT_PANEL:
        pos = (src[None, None, :] + sdd * n_ax[None, None, :]
               + (u_px * pu)[..., None] * u_ax[None, None, :]
               + (v_px * pv)[..., None] * v_ax[None, None, :])
    else:
        gamma = u_px * pu / sdd
        pos = (src[None, None, :]
               + (sdd * np.cos(gamma))[..., None] * n_ax[None, None, :]
               + (sdd * np.sin(gamma))[..., None] * u_ax[None, None, :]
               + (v_px * pv)[..., None] * v_ax[None, None, :])
    d = pos - src[None, None, :]
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return src, d


def target_validity_mask(geometry: ScanGeometry, slab_spec: VolumeSpec,
                         full_spec: VolumeSpec, proj_indices,
                         supersample: int = 4) -> np.ndarray:
    """Pixels whose rays are fully explained by the slab sub-volume.

    A pixel is valid when the z-extent of its ray, clipped to the full
    volume's xy support, stays within the slab's interior voxel-center
    range — there the slab re-projection equals the full-volume one
    exactly.  The mask is eroded through the supersampled downsample
    window so only coarse pixels with every contributing subpixel valid
    survive.
    """
    proj_indices = np.asarray(proj_indices, dtype=np.int64)
    poses = pose_pack_cached(geometry, proj_indices)
    pitch = full_spec.voxel_pitch_mm
    ox, oy, _ = full_spec.origin_mm
    nx, ny, _ = full_spec.dims
    x_lo, x_hi = ox - pitch, ox + nx * pitch
    y_lo, y_hi = oy - pitch, oy + ny * pitch
    oz_s = slab_spec.origin_mm[2]
    z_lo_ok = oz_s
    z_hi_ok = oz_s + (slab_spec.dims[2] - 1) * pitch
    rows, cols = geometry.detector_rows, geometry.detector_cols
    fine_valid = np.empty((len(proj_indices), rows * supersample, cols * supersample),
                          dtype=bool)
    for k, pose in enumerate(poses):
        src, d = _pixel_ray_dirs(geometry, pose, supersample)
        t0 = np.zeros(d.shape[:2])
        t1 = np.full(d.shape[:2], np.inf)
        for axis, (lo, hi, o) in enumerate(((x_lo, x_hi, src[0]), (y_lo, y_hi, src[1]))):
            da = d[..., axis]
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (lo - o) / da
                tb = (hi - o) / da
            near = np.where(da != 0, np.minimum(ta, tb), np.where((lo <= o) & (o <= hi), 0.0, np.inf))
            far = np.where(da != 0, np.maximum(ta, tb), np.where((lo <= o) & (o <= hi), np.inf, -np.inf))
            t0 = np.maximum(t0, near)
            t1 = np.minimum(t1, far)
        misses = t1 <= t0
        za = src[2] + t0 * d[..., 2]
        zb = src[2] + np.minimum(t1, 1e9) * d[..., 2]
        z_min = np.minimum(za, zb)
        z_max = np.maximum(za, zb)
        fine_valid[k] = misses | ((z_min >= z_lo_ok) & (z_max <= z_hi_ok))
    if supersample == 1:
        return fine_valid
    bu = (np.abs(filters.lanczos3_downsample_matrix(cols, supersample)) > 1e-12)
    bv = (np.abs(filters.lanczos3_downsample_matrix(rows, supersample)) > 1e-12)
    bad = (~fine_valid).astype(np.float64)
    spread = np.einsum("rk,nkc,sc->nrs", bv.astype(float), bad, bu.astype(float))
    return spread == 0.0


_pose_cache = {}


def pose_pack_cached(geometry: ScanGeometry, proj_indices: np.ndarray) -> np.ndarray:
    from helixct.geometry import pose_pack
    key = (geometry, proj_indices.tobytes())
    if key not in _pose_cache:
        if len(_pose_cache) > 256:
            _pose_cache.clear()
        _pose_cache[key] = pose_pack(geometry, proj_indices)
    return _pose_cache[key]


# --- augmentations ---------------------------------------------------------------

def augment(geometry: ScanGeometry, volume_spec: VolumeSpec, sinograms: list,
            rng_seed: int, rotate: bool = True, jitter: bool = True,
            scale: bool = True) -> tuple[ScanGeometry, VolumeSpec, list, float]:
    """Pose rotation, sub-voxel origin jitter, and a shared intensity scale.

    The rotation only rewrites the scan's start angle (no resampling); the
    jitter shifts the reconstruction grid by up to half a voxel per axis;
    the scale multiplies every log-attenuation value by one draw from
    [0.75, 1.25].  Returns the transformed pieces plus the scale factor.
    """
    rng = np.random.default_rng(rng_seed)
    theta = rng.uniform(0.0, 2.0 * math.pi) if rotate else 0.0
    geo2 = dataclasses.replace(geometry, start_angle_rad=geometry.start_angle_rad + theta)
    if jitter:
        off = rng.uniform(-0.5, 0.5, size=3) * volume_spec.voxel_pitch_mm
        ox, oy, oz = volume_spec.origin_mm
        vs2 = VolumeSpec(volume_spec.dims, volume_spec.voxel_pitch_mm,
                         (ox + off[0], oy + off[1], oz + off[2]))
    else:
        vs2 = volume_spec
    s = rng.uniform(0.75, 1.25) if scale else 1.0
    out = []
    for sino in sinograms:
        if sino.space is not ops.Space.LOG_ATTENUATION:
            raise ValueError("augment operates on log-attenuation sinograms")
        out.append(ops.Sinogram(s * sino.data, sino.space, geo2,
                                i0_photons=sino.i0_photons,
                                proj_indices=sino.proj_indices))
    return geo2, vs2, out, s


# --- learnable reconstruction and the training step ------------------------------

def _reconstruct_ctx(input_data: np.ndarray, input_indices: np.ndarray,
                     geometry: ScanGeometry, volume_spec: VolumeSpec,
                     params: LearnableParams, taper: ops.TaperWeights) -> dict:
    filtered = filters.ramp_convolve_rows(input_data, params.taps)
    accum, weight = ops.backproject(filtered, geometry, volume_spec,
                                    taper=taper, use_mip=True,
                                    proj_indices=input_indices)
    wmax = weight.data.max() if weight.data.size else 0.0
    safe = weight.data > ops.WEIGHT_FLOOR_FRAC * wmax
    base = np.zeros_like(accum.data)
    np.divide(accum.data, weight.data, out=base, where=safe)
    vol = Volume(params.gain * base, volume_spec.voxel_pitch_mm,
                 tuple(volume_spec.origin_mm))
    return {"volume": vol, "base": base, "weight": weight.data, "safe": safe,
            "filtered": filtered}


def reconstruct_learnable(input_sinogram: ops.Sinogram, geometry: ScanGeometry,
                          volume_spec: VolumeSpec, params: LearnableParams) -> Volume:
    """wFBP with the current learnable taps and gain."""
    if input_sinogram.space is not ops.Space.LOG_ATTENUATION:
        raise ValueError("expected log-attenuation input")
    taper = ops.taper_weights(geometry.detector_rows)
    ctx = _reconstruct_ctx(input_sinogram.data, input_sinogram.proj_indices,
                           geometry, volume_spec, params, taper)
    return ctx["volume"]


def _params_backward(grad_vol: np.ndarray, ctx: dict, input_data: np.ndarray,
                     input_indices: np.ndarray, geometry: ScanGeometry,
                     volume_spec: VolumeSpec, params: LearnableParams,
                     taper: ops.TaperWeights) -> tuple[np.ndarray, float]:
    """Chain a volume-space gradient back to (taps, log_gain)."""
    grad_log_gain = float((grad_vol * ctx["volume"].data).sum())
    grad_base = params.gain * grad_vol
    grad_accum = np.zeros_like(grad_base)
    np.divide(grad_base, ctx["weight"], out=grad_accum, where=ctx["safe"])
    grad_maps = ops.mip_backproject_input_grad(grad_accum, geometry, volume_spec,
                                               taper, input_indices)
    grad_taps = filters.ramp_tap_gradient(grad_maps, input_data)
    return grad_taps, grad_log_gain


@dataclass
class ScanData:
    """One training scene: clean projections plus fixed noisy realizations."""

    clean: ops.Sinogram
    volume_spec: VolumeSpec
    input_scan: ops.Sinogram = None
    target_scan: ops.Sinogram = None
    i0_input: float = None
    i0_target: float = None

    def __post_init__(self):
        if self.input_scan is None:
            self.input_scan = self.clean
        if self.target_scan is None:
            self.target_scan = self.input_scan
        if self.i0_input is None:
            self.i0_input = self.input_scan.i0_photons
        if self.i0_target is None:
            self.i0_target = self.target_scan.i0_photons or self.i0_input


def prepare_scan(clean: ops.Sinogram, volume_spec: VolumeSpec, i0_full: float,
                 dose_in: float = 0.1, dose_target: float = 1.0,
                 clean_targets: bool = False, noise_free: bool = False,
                 rng_seed: int = 0) -> ScanData:
    """Fix the noise realizations for one training run.

    The input scan is one low-dose acquisition; the target scan is either
    the same acquisition (matching doses — shared noise), an independent
    acquisition at the target dose, or the clean projections.
    """
    if noise_free:
        inp = clean
        i0_in = i0_full * dose_in
    else:
        inp = add_poisson_noise(clean, DoseModel(i0_full, dose_in, rng_seed))
        i0_in = i0_full * dose_in
    if clean_targets or noise_free:
        tgt = clean
        i0_t = i0_full * dose_target
    elif dose_target == dose_in:
        tgt = inp
        i0_t = i0_in
    else:
        tgt = add_poisson_noise(clean, DoseModel(i0_full, dose_target, rng_seed + 1))
        i0_t = i0_full * dose_target
    return ScanData(clean=clean, volume_spec=volume_spec, input_scan=inp,
                    target_scan=tgt, i0_input=i0_in, i0_target=i0_t)


@dataclass
class TrainConfig:
    steps: int = 500
    targets_per_step: int = 12
    slab_voxels: int = 8
    dose_in: float = 0.1
    dose_target: float = 1.0
    clean_targets: bool = False
    noise_free: bool = False
    exclude_targets: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    augment: bool = True
    adam: AdamConfig = field(default_factory=lambda: AdamConfig(lr=1e-4))
    tap_lr_scale: float = 3.0
    gain_lr_scale: float = 50.0
    ema_decay: float = 0.99
    rng_seed: int = 0
    step_fraction: float = 0.5
    supersample_targets: int = 4
    sampling: ops.Sampling = ops.Sampling.STRATIFIED


def selfsup_step(scan: ScanData, geometry: ScanGeometry, params: LearnableParams,
                 split: SplitPlan, slab_spec: VolumeSpec, loss_config: LossConfig,
                 adam: AdamConfig, config: TrainConfig, sim_seed: int = 0,
                 update: bool = True) -> tuple[LearnableParams, float]:
    """One calibration step: reconstruct, re-project, score, update.

    With update=False the parameters are left untouched and only the loss
    is computed (used for held-out evaluation).
    """
    taper = ops.taper_weights(geometry.detector_rows)
    inp = scan.input_scan.data[np.searchsorted(scan.input_scan.proj_indices,
                                               split.input_indices)]
    ctx = _reconstruct_ctx(inp, split.input_indices, geometry, slab_spec,
                           params, taper)
    sim = ops.forward_project(ctx["volume"], geometry,
                              proj_indices=split.target_indices,
                              step_fraction=config.step_fraction,
                              supersample_uv=config.supersample_targets,
                              rng_seed=sim_seed, sampling=config.sampling)
    mask = target_validity_mask(geometry, slab_spec, scan.volume_spec,
                                split.target_indices,
                                supersample=config.supersample_targets).astype(float)
    tgt_rows = scan.target_scan.data[np.searchsorted(scan.target_scan.proj_indices,
                                                     split.target_indices)]
    if loss_config.space is LossSpace.PHOTON_WEIGHTED:
        x_raw = to_intensity(sim.data, scan.i0_target)
        floored = x_raw < 1.0
        if floored.any():
            params.floor_events += int(floored.sum())
        x_hat = np.maximum(x_raw, 1.0)
        y_int = to_intensity(tgt_rows, scan.i0_target)
        y_hat = ops.separable_lowpass(y_int, loss_config.target_lowpass)
        y_hat = np.maximum(y_hat, 1e-12)
        value, grad_x = photon_loss(x_hat, y_hat, loss_config, mask=mask)
        grad_p = grad_x * (-x_hat) * (~floored)
    else:
        y_lp = -np.log(np.maximum(
            ops.separable_lowpass(to_intensity(tgt_rows, scan.i0_target),
                                  loss_config.target_lowpass), 1e-12) / scan.i0_target)
        value, grad_p = log_l2_loss(sim.data, y_lp, mask=mask)
    if not update:
        return params, value
    gvol = ops.mip_backproject_raw(grad_p, geometry, slab_spec,
                                   split.target_indices)
    grad_taps, grad_log_gain = _params_backward(gvol.data, ctx, inp,
                                                split.input_indices, geometry,
                                                slab_spec, params, taper)
    params.adam_update(grad_taps, grad_log_gain, adam, config.tap_lr_scale,
                       config.gain_lr_scale, config.ema_decay)
    return params, value


def supervised_step(scan: ScanData, geometry: ScanGeometry, params: LearnableParams,
                    split: SplitPlan, slab_spec: VolumeSpec, gt_slab: np.ndarray,
                    adam: AdamConfig, config: TrainConfig) -> tuple[LearnableParams, float]:
    """Reference step scoring the slab against ground truth in volume space."""
    taper = ops.taper_weights(geometry.detector_rows)
    inp = scan.input_scan.data[np.searchsorted(scan.input_scan.proj_indices,
                                               split.input_indices)]
    ctx = _reconstruct_ctx(inp, split.input_indices, geometry, slab_spec,
                           params, taper)
    diff = ctx["volume"].data - gt_slab
    n = diff.size
    value = float((diff * diff).sum()) / n
    grad_vol = 2.0 * diff / n
    grad_taps, grad_log_gain = _params_backward(grad_vol, ctx, inp,
                                                split.input_indices, geometry,
                                                slab_spec, params, taper)
    params.adam_update(grad_taps, grad_log_gain, adam, config.tap_lr_scale,
                       config.gain_lr_scale, config.ema_decay)
    return params, value


def _slab_z_candidates(geometry: ScanGeometry, volume_spec: VolumeSpec,
                       slab_voxels: int) -> np.ndarray:
    """Start indices of slabs lying inside the helix's z coverage."""
    nz = volume_spec.dims[2]
    pitch = volume_spec.voxel_pitch_mm
    oz = volume_spec.origin_mm[2]
    z_first = geometry.z_of(0)
    z_last = geometry.z_of(geometry.n_projections - 1)
    z_lo, z_hi = min(z_first, z_last), max(z_first, z_last)
    ks = []
    for k in range(0, nz - slab_voxels + 1):
        s_lo = oz + k * pitch
        s_hi = oz + (k + slab_voxels - 1) * pitch
        if s_lo >= z_lo and s_hi <= z_hi:
            ks.append(k)
    return np.asarray(ks, dtype=np.int64)


def train_calibration(scans: list, geometry: ScanGeometry, init: LearnableParams,
                      config: TrainConfig) -> tuple[LearnableParams, list]:
    """Self-supervised calibration loop over random slabs, splits, and poses.

    `scans` is a list of ScanData (see prepare_scan).  Returns the EMA
    parameter snapshot and the loss curve as a list of (step, loss) rows.
    Aborts with CalibrationError if the loss goes non-finite.
    """
    if not scans:
        raise ValueError("need at least one scan")
    rng = np.random.default_rng(config.rng_seed)
    params = init.copy()
    curve = []
    candidates = {}
    for idx, scan in enumerate(scans):
        ks = _slab_z_candidates(geometry, scan.volume_spec, config.slab_voxels)
        if ks.size == 0:
            raise ValueError(f"scan {idx}: no slab of {config.slab_voxels} voxels "
                             "fits inside the scan's z coverage")
        candidates[idx] = ks
    for step in range(config.steps):
        scan_idx = int(rng.integers(len(scans)))
        scan = scans[scan_idx]
        split_seed = int(rng.integers(2 ** 63))
        sim_seed = int(rng.integers(2 ** 63))
        aug_seed = int(rng.integers(2 ** 63))
        k = int(rng.choice(candidates[scan_idx]))
        geo_s, vspec_s = geometry, scan.volume_spec
        scan_s = scan
        if config.augment:
            geo_s, vspec_s, (inp_a, tgt_a), s = augment(
                geometry, scan.volume_spec,
                [scan.input_scan, scan.target_scan], aug_seed)
            scan_s = ScanData(clean=scan.clean, volume_spec=vspec_s,
                              input_scan=inp_a, target_scan=tgt_a,
                              i0_input=scan.i0_input, i0_target=scan.i0_target)
        slab = slab_volume_spec(vspec_s, k, config.slab_voxels)
        z_slab = (slab.origin_mm[2], slab.origin_mm[2]
                  + config.slab_voxels * slab.voxel_pitch_mm)
        try:
            split = make_split(geo_s, vspec_s, z_slab, config.targets_per_step,
                               split_seed, config.exclude_targets)
        except ValueError as e:
            raise CalibrationError(f"step {step}: {e}") from e
        params, loss = selfsup_step(scan_s, geo_s, params, split, slab,
                                    config.loss, config.adam, config,
                                    sim_seed=sim_seed)
        if not math.isfinite(loss):
            raise CalibrationError(
                f"non-finite loss at step {step} (scan {scan_idx}, slab k={k}, "
                f"split seed {split_seed})")
        curve.append((step, loss))
    return params.ema_snapshot(), curve


def heldout_loss(scans: list, geometry: ScanGeometry, params: LearnableParams,
                 config: TrainConfig, n_eval: int = 16, rng_seed: int = 12345,
                 clean_targets: bool = True) -> float:
    """Mean loss over a fixed set of evaluation slabs/splits, no updates.

    Targets are taken from the clean projections by default so different
    training regimes can be compared on equal footing.
    """
    rng = np.random.default_rng(rng_seed)
    eval_cfg = dataclasses.replace(config, augment=False,
                                   sampling=ops.Sampling.MIDPOINT)
    total = 0.0
    for _ in range(n_eval):
        scan_idx = int(rng.integers(len(scans)))
        scan = scans[scan_idx]
        ks = _slab_z_candidates(geometry, scan.volume_spec, config.slab_voxels)
        k = int(rng.choice(ks))
        if clean_targets:
            scan = ScanData(clean=scan.clean, volume_spec=scan.volume_spec,
                            input_scan=scan.input_scan, target_scan=scan.clean,
                            i0_input=scan.i0_input, i0_target=scan.i0_target)
        slab = slab_volume_spec(scan.volume_spec, k, config.slab_voxels)
        z_slab = (slab.origin_mm[2], slab.origin_mm[2]
                  + config.slab_voxels * slab.voxel_pitch_mm)
        split = make_split(geometry, scan.volume_spec, z_slab,
                           config.targets_per_step, int(rng.integers(2 ** 63)),
                           exclude_targets=True)
        _, loss = selfsup_step(scan, geometry, params, split, slab,
                               eval_cfg.loss, eval_cfg.adam, eval_cfg,
                               sim_seed=0, update=False)
        total += loss
    return total / n_eval
