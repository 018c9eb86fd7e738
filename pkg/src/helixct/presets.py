"""Named geometry / volume presets and tuned reconstruction defaults.

"desk64" is the desk-scale workhorse every test and example runs on:
64^3 volume at 2 mm pitch, 16x128 detector, 120 projections per rotation,
3 rotations.  "desk32" is a smaller single-rotation variant for cheap
tests.  "clinical-scale" records a full-scale configuration for users with
the hardware; nothing in the test suite exercises it.
"""

from __future__ import annotations

from helixct.geometry import ScanGeometry
from helixct.phantom import VolumeSpec

# Calibrated wFBP gain for the desk64 preset (least-squares fit of a
# noise-free sphere reconstruction against the voxelized ground truth;
# frozen here and regression-tested).
DESK64_WFBP_GAIN = 18.092524287695635

DESK48_WFBP_GAIN = 14.948791733547004

# Desk-scale IR-TV settings (grid-searched on the desk64 sphere at dose 0.1
# to maximize PSNR).
DESK64_IRTV_LR = 1e-3
DESK64_IRTV_TV_STRENGTH = 1.0


def desk64() -> tuple[ScanGeometry, VolumeSpec]:
    geo = ScanGeometry(
        source_to_iso_mm=300.0,
        source_to_detector_mm=600.0,
        detector_rows=16,
        detector_cols=128,
        pixel_pitch_u_mm=3.0,
        pixel_pitch_v_mm=3.0,
        projections_per_rotation=120,
        table_feed_per_rotation_mm=27.0,
        n_projections=360,
        start_angle_rad=0.0,
        start_z_mm=-40.5,
    )
    spec = VolumeSpec(dims=(64, 64, 64), voxel_pitch_mm=2.0, origin_mm=(-63.0, -63.0, -63.0))
    return geo, spec


def desk32() -> tuple[ScanGeometry, VolumeSpec]:
    geo = ScanGeometry(
        source_to_iso_mm=300.0,
        source_to_detector_mm=600.0,
        detector_rows=8,
        detector_cols=64,
        pixel_pitch_u_mm=3.0,
        pixel_pitch_v_mm=3.0,
        projections_per_rotation=120,
        table_feed_per_rotation_mm=12.0,
        n_projections=120,
        start_angle_rad=0.0,
        start_z_mm=-6.0,
    )
    spec = VolumeSpec(dims=(32, 32, 32), voxel_pitch_mm=2.0, origin_mm=(-31.0, -31.0, -31.0))
    return geo, spec


def desk48() -> tuple[ScanGeometry, VolumeSpec]:
    geo = ScanGeometry(
        source_to_iso_mm=300.0,
        source_to_detector_mm=600.0,
        detector_rows=12,
        detector_cols=96,
        pixel_pitch_u_mm=3.0,
        pixel_pitch_v_mm=3.0,
        projections_per_rotation=100,
        table_feed_per_rotation_mm=20.0,
        n_projections=200,
        start_angle_rad=0.0,
        start_z_mm=-20.0,
    )
    spec = VolumeSpec(dims=(48, 48, 48), voxel_pitch_mm=2.0, origin_mm=(-47.0, -47.0, -47.0))
    return geo, spec


def clinical_scale() -> tuple[ScanGeometry, VolumeSpec]:
    # Representative full-scale helical scan: 736x64 detector, thousands of
    # projections.  Provided for scale experiments only; untested in CI.
    geo = ScanGeometry(
        source_to_iso_mm=595.0,
        source_to_detector_mm=1085.6,
        detector_rows=64,
        detector_cols=736,
        pixel_pitch_u_mm=1.2858,
        pixel_pitch_v_mm=1.0947,
        projections_per_rotation=1152,
        table_feed_per_rotation_mm=38.4,
        n_projections=11520,
        start_angle_rad=0.0,
        start_z_mm=-192.0,
    )
    spec = VolumeSpec(dims=(512, 512, 256), voxel_pitch_mm=0.7, origin_mm=(-178.85, -178.85, -89.25))
    return geo, spec


_PRESETS = {
    "desk64": desk64,
    "desk48": desk48,
    "desk32": desk32,
    "clinical-scale": clinical_scale,
}

PRESETS = tuple(_PRESETS)

# Calibrated wFBP gains per preset (see calibrate_gain in recon).
PRESET_GAINS = {
    "desk64": DESK64_WFBP_GAIN,
    "desk48": DESK48_WFBP_GAIN,
}

# Tuned IR-TV settings per preset.
PRESET_IRTV = {
    "desk64": {"lr": DESK64_IRTV_LR, "tv_strength": DESK64_IRTV_TV_STRENGTH},
}


def get_preset(name: str) -> tuple[ScanGeometry, VolumeSpec]:
    if name not in _PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(_PRESETS)}")
    return _PRESETS[name]()
