"""Classical reconstructors: wFBP and TV-regularized iterative inversion.

wFBP: ramp-filter each projection row, cone-beam backproject with the cosine
row taper, normalize by the accumulated weight, and scale by a calibrated
gain.  IR-TV: start from wFBP and run Adam on a Poisson-weighted projection
data term plus a smoothed isotropic total-variation penalty, feeding in
progressively more projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from helixct import operators as ops
from helixct.geometry import ScanGeometry
from helixct.phantom import Volume, VolumeSpec, get_phantom, voxelize


class SpaceError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class WfbpConfig:
    ramp: ops.RampFilter
    taper_q: float = 0.8
    gain: float = 1.0
    use_mip: bool = True

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("gain must be > 0")


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8


class AdamState:
    """Minimal elementwise Adam; state arrays match the parameter shape."""

    def __init__(self, shape, config: AdamConfig):
        self.config = config
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        c = self.config
        self.t += 1
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * grad * grad
        mhat = self.m / (1.0 - c.beta1 ** self.t)
        vhat = self.v / (1.0 - c.beta2 ** self.t)
        return params - c.lr * mhat / (np.sqrt(vhat) + c.eps)


@dataclass
class IrtvConfig:
    tv_strength: float = 2e6
    input_lowpass: tuple = (0.15, 1.0, 0.15)
    n_updates: int = 210
    adam: AdamConfig = field(default_factory=AdamConfig)
    # consecutive update stages use these fractions of all projections
    projection_schedule: tuple = (0.125, 0.25, 0.5, 1.0)
    tv_epsilon: float = 1e-5
    step_fraction: float = 0.5
    rng_seed: int = 0
    eval_every: int = 10
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.tv_strength < 0:
            raise ValueError("tv_strength must be >= 0")
        fr = list(self.projection_schedule)
        if sorted(fr) != fr or fr[-1] != 1.0:
            raise ValueError("schedule fractions must be nondecreasing and end at 1.0")


def wfbp_reconstruct(sinogram: ops.Sinogram, volume_spec: VolumeSpec,
                     config: WfbpConfig) -> Volume:
    """Weighted filtered backprojection of a log-attenuation sinogram."""
    if sinogram.space is not ops.Space.LOG_ATTENUATION:
        raise SpaceError("wfbp expects a log-attenuation sinogram; convert first")
    filtered = ops.ramp_convolve(sinogram.data, config.ramp)
    taper = ops.taper_weights(sinogram.geometry.detector_rows, config.taper_q)
    accum, weight = ops.backproject(filtered, sinogram.geometry, volume_spec,
                                    taper=taper, use_mip=config.use_mip,
                                    proj_indices=sinogram.proj_indices)
    vol = ops.normalize_backprojection(accum, weight)
    vol.data *= config.gain
    return vol


def calibrate_gain(geometry: ScanGeometry, volume_spec: VolumeSpec,
                   phantom_name: str = "sphere", taper_q: float = 0.8,
                   use_mip: bool = True) -> float:
    """Least-squares wFBP gain from a noise-free sphere scan vs ground truth.

    Run once per geometry; the fitted scalar is then frozen in the preset.
    """
    phm = get_phantom(phantom_name)
    gt = voxelize(phm, volume_spec.dims, volume_spec.voxel_pitch_mm,
                  volume_spec.origin_mm, supersample=4)
    sino = ops.analytic_sinogram(phm, geometry, supersample_uv=4)
    cfg = WfbpConfig(ramp=ops.ramp_init(geometry.detector_cols, geometry.pixel_pitch_u_mm),
                     taper_q=taper_q, gain=1.0, use_mip=use_mip)
    rec = wfbp_reconstruct(sino, volume_spec, cfg)
    denom = float((rec.data ** 2).sum())
    if denom == 0:
        raise ValueError("degenerate reconstruction; cannot calibrate gain")
    return float((rec.data * gt.data).sum()) / denom


def poisson_ray_weights(sinogram: ops.Sinogram, i0: float = None) -> np.ndarray:
    """Per-ray data weights proportional to expected photon counts.

    omega = exp(-p), normalized to mean 1 over the sinogram; rays seen
    through heavy attenuation carry proportionally less weight.
    """
    w = np.exp(-sinogram.data)
    return w / w.mean()


def tv_value_and_grad(volume_data: np.ndarray, epsilon: float) -> tuple[float, np.ndarray]:
    """Smoothed isotropic total variation and its analytic gradient.

    Per voxel: sqrt(dx^2 + dy^2 + dz^2 + eps^2) - eps with forward
    differences and replicate boundary (zero difference at the far edge).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    v = volume_data
    dx = np.zeros_like(v)
    dy = np.zeros_like(v)
    dz = np.zeros_like(v)
    dx[:, :, :-1] = v[:, :, 1:] - v[:, :, :-1]
    dy[:, :-1, :] = v[:, 1:, :] - v[:, :-1, :]
    dz[:-1, :, :] = v[1:, :, :] - v[:-1, :, :]
    s = np.sqrt(dx * dx + dy * dy + dz * dz + epsilon * epsilon)
    value = float((s - epsilon).sum())
    g = -(dx + dy + dz) / s
    g[:, :, 1:] += (dx / s)[:, :, :-1]
    g[:, 1:, :] += (dy / s)[:, :-1, :]
    g[1:, :, :] += (dz / s)[:-1, :, :]
    return value, g


def irtv_reconstruct(sinogram: ops.Sinogram, volume_spec: VolumeSpec,
                     wfbp_config: WfbpConfig, config: IrtvConfig
                     ) -> tuple[Volume, list]:
    """Iterative TV-regularized reconstruction from a wFBP starting point.

    Returns the final volume and a trace of (update, data_term, tv_term,
    total) rows evaluated on the full projection set every eval_every
    updates.  Raises DivergenceError when the full objective exceeds
    divergence_factor times its initial value.
    """
    if sinogram.space is not ops.Space.LOG_ATTENUATION:
        raise SpaceError("irtv expects a log-attenuation sinogram")
    geometry = sinogram.geometry
    p = ops.separable_lowpass(sinogram.data, config.input_lowpass)
    sino_lp = ops.Sinogram(p, ops.Space.LOG_ATTENUATION, geometry,
                           i0_photons=sinogram.i0_photons,
                           proj_indices=sinogram.proj_indices)
    omega = poisson_ray_weights(sino_lp)
    vol = wfbp_reconstruct(sino_lp, volume_spec, wfbp_config)
    n_all = len(sino_lp.proj_indices)

    def data_term(volume, sel):
        sim = ops.forward_project(volume, geometry, proj_indices=sino_lp.proj_indices[sel],
                                  step_fraction=config.step_fraction)
        res = sim.data - p[sel]
        return float((omega[sel] * res * res).sum()), res

    def full_objective(volume):
        dt, _ = data_term(volume, slice(None))
        tv, _ = tv_value_and_grad(volume.data, config.tv_epsilon)
        return dt, tv, dt + config.tv_strength * tv

    d0, t0, obj0 = full_objective(vol)
    trace = [(0, d0, t0, obj0)]
    adam = AdamState(vol.data.shape, config.adam)
    stages = np.array_split(np.arange(config.n_updates), len(config.projection_schedule))

    for stage, updates in zip(config.projection_schedule, stages):
        stride = max(int(round(1.0 / stage)), 1)
        for t in updates:
            sel = np.arange(int(t) % stride, n_all, stride)
            scale = n_all / len(sel)
            _, res = data_term(vol, sel)
            grad_maps = 2.0 * omega[sel] * res
            gvol = ops.mip_backproject_raw(grad_maps, geometry, volume_spec,
                                           sino_lp.proj_indices[sel])
            grad = scale * gvol.data
            if config.tv_strength > 0:
                _, tv_grad = tv_value_and_grad(vol.data, config.tv_epsilon)
                grad = grad + config.tv_strength * tv_grad
            vol.data = adam.step(vol.data, grad)
            update_no = int(t) + 1
            if update_no % config.eval_every == 0 or update_no == config.n_updates:
                dt, tv, obj = full_objective(vol)
                trace.append((update_no, dt, tv, obj))
                if obj > config.divergence_factor * obj0:
                    raise DivergenceError(
                        f"objective {obj:.4g} exceeded {config.divergence_factor}x "
                        f"its initial value {obj0:.4g} at update {update_no}")
    return vol, trace
