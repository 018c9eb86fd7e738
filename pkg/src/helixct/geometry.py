"""Helical cone-beam acquisition geometry and coordinate transforms.

Coordinate convention (fixed once, used everywhere): right-handed frame,
z = rotation axis, gantry angle theta measured in the x-y plane.  For a
projection at angle theta the source sits at radius `source_to_iso_mm`,
the detector on the far side of the isocenter.  Detector pixel (0, 0) is
the corner pixel *center*; u runs along columns (in-plane), v along rows
(axial, parallel to +z).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class DetectorShape(Enum):
    FLAT_PANEL = "flat"
    CYLINDRICAL_ON_SOURCE = "cylindrical"


class BehindSourceError(ValueError):
    """Raised when a point does not lie in front of the source plane."""


@dataclass(frozen=True)
class ScanGeometry:
    """Full description of one helical cone-beam acquisition.

    Projection index i maps to gantry angle
        theta_i = start_angle_rad + 2*pi*i / projections_per_rotation
    and to source axial position
        z_i = start_z_mm + table_feed_per_rotation_mm * i / projections_per_rotation.
    """

    source_to_iso_mm: float
    source_to_detector_mm: float
    detector_rows: int
    detector_cols: int
    pixel_pitch_u_mm: float
    pixel_pitch_v_mm: float
    projections_per_rotation: int
    table_feed_per_rotation_mm: float
    n_projections: int
    start_angle_rad: float = 0.0
    start_z_mm: float = 0.0
    detector_shape: DetectorShape = DetectorShape.FLAT_PANEL

    def __post_init__(self):
        if not (self.source_to_detector_mm > self.source_to_iso_mm > 0):
            raise ValueError("need source_to_detector_mm > source_to_iso_mm > 0")
        for name in ("detector_rows", "detector_cols", "projections_per_rotation", "n_projections"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pixel_pitch_u_mm <= 0 or self.pixel_pitch_v_mm <= 0:
            raise ValueError("pixel pitches must be > 0")
        if isinstance(self.detector_shape, str):
            object.__setattr__(self, "detector_shape", DetectorShape(self.detector_shape))

    def angle_of(self, i):
        return self.start_angle_rad + 2.0 * np.pi * i / self.projections_per_rotation

    def z_of(self, i):
        return self.start_z_mm + self.table_feed_per_rotation_mm * i / self.projections_per_rotation

    @property
    def magnification(self):
        return self.source_to_detector_mm / self.source_to_iso_mm

    def to_json_dict(self) -> dict:
        d = {
            "source_to_iso_mm": self.source_to_iso_mm,
            "source_to_detector_mm": self.source_to_detector_mm,
            "detector_rows": self.detector_rows,
            "detector_cols": self.detector_cols,
            "pixel_pitch_u_mm": self.pixel_pitch_u_mm,
            "pixel_pitch_v_mm": self.pixel_pitch_v_mm,
            "projections_per_rotation": self.projections_per_rotation,
            "table_feed_per_rotation_mm": self.table_feed_per_rotation_mm,
            "n_projections": self.n_projections,
            "start_angle_rad": self.start_angle_rad,
            "start_z_mm": self.start_z_mm,
            "detector_shape": self.detector_shape.value,
        }
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "ScanGeometry":
        kw = dict(d)
        kw["detector_shape"] = DetectorShape(kw.get("detector_shape", "flat"))
        return ScanGeometry(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_json(s: str) -> "ScanGeometry":
        return ScanGeometry.from_json_dict(json.loads(s))


@dataclass(frozen=True)
class ProjectionPose:
    """Explicit pose of one projection: source plus detector frame.

    `detector_origin_mm` is the 3D center of pixel (0, 0).  For the
    cylindrical detector the (origin, u, v) triple describes the tangent
    frame at the detector center; the curved mapping itself lives in
    `project_point` / `ray_of`.
    """

    source_pos_mm: np.ndarray
    detector_origin_mm: np.ndarray
    detector_u_axis: np.ndarray
    detector_v_axis: np.ndarray
    detector_normal: np.ndarray = field(repr=False, default=None)
    geometry: ScanGeometry = field(repr=False, default=None)

    @property
    def detector_center_mm(self):
        g = self.geometry
        return (self.detector_origin_mm
                + 0.5 * (g.detector_cols - 1) * g.pixel_pitch_u_mm * self.detector_u_axis
                + 0.5 * (g.detector_rows - 1) * g.pixel_pitch_v_mm * self.detector_v_axis)


def pose_of(geometry: ScanGeometry, proj_index: int) -> ProjectionPose:
    """Pose of projection `proj_index` on the helix."""
    if not (0 <= proj_index < geometry.n_projections):
        raise IndexError(f"projection index {proj_index} out of range [0, {geometry.n_projections})")
    theta = geometry.angle_of(proj_index)
    z = geometry.z_of(proj_index)
    c, s = np.cos(theta), np.sin(theta)
    src = np.array([geometry.source_to_iso_mm * c, geometry.source_to_iso_mm * s, z])
    # unit detector frame: normal points source -> detector, u in-plane, v axial
    normal = np.array([-c, -s, 0.0])
    u_axis = np.array([s, -c, 0.0])
    v_axis = np.array([0.0, 0.0, 1.0])
    center = src + geometry.source_to_detector_mm * normal
    origin = (center
              - 0.5 * (geometry.detector_cols - 1) * geometry.pixel_pitch_u_mm * u_axis
              - 0.5 * (geometry.detector_rows - 1) * geometry.pixel_pitch_v_mm * v_axis)
    return ProjectionPose(src, origin, u_axis, v_axis, normal, geometry)


def project_point(pose: ProjectionPose, point_mm) -> tuple[float, float, float]:
    """Project a 3D point onto the detector through the source.

    Returns continuous pixel coordinates (u, v) and the depth in mm
    (distance from the source to the point's projection plane; for the
    cylindrical detector, the in-plane distance).  Raises
    BehindSourceError when depth <= ~0; the caller is expected to cull.
    """
    g = pose.geometry
    xi = np.asarray(point_mm, dtype=float) - pose.source_pos_mm
    xn = float(xi @ pose.detector_normal)
    xu = float(xi @ pose.detector_u_axis)
    xv = float(xi @ pose.detector_v_axis)
    cu = 0.5 * (g.detector_cols - 1)
    cv = 0.5 * (g.detector_rows - 1)
    sdd = g.source_to_detector_mm
    if g.detector_shape is DetectorShape.FLAT_PANEL:
        if xn <= 1e-9:
            raise BehindSourceError("point not in front of the source plane")
        scale = sdd / xn
        u = (xu * scale) / g.pixel_pitch_u_mm + cu
        v = (xv * scale) / g.pixel_pitch_v_mm + cv
        return u, v, xn
    # cylinder of radius SDD around the axial line through the source
    rho = float(np.hypot(xn, xu))
    if xn <= 1e-9 or rho <= 1e-9:
        raise BehindSourceError("point not in front of the source plane")
    gamma = float(np.arctan2(xu, xn))
    u = gamma * sdd / g.pixel_pitch_u_mm + cu
    v = (xv * sdd / rho) / g.pixel_pitch_v_mm + cv
    return u, v, rho


def ray_of(pose: ProjectionPose, u: float, v: float):
    """Ray through detector pixel (u, v): (origin at source, unit direction)."""
    g = pose.geometry
    cu = 0.5 * (g.detector_cols - 1)
    cv = 0.5 * (g.detector_rows - 1)
    sdd = g.source_to_detector_mm
    if g.detector_shape is DetectorShape.FLAT_PANEL:
        pos = (pose.detector_origin_mm
               + u * g.pixel_pitch_u_mm * pose.detector_u_axis
               + v * g.pixel_pitch_v_mm * pose.detector_v_axis)
    else:
        gamma = (u - cu) * g.pixel_pitch_u_mm / sdd
        pos = (pose.source_pos_mm
               + sdd * (np.cos(gamma) * pose.detector_normal + np.sin(gamma) * pose.detector_u_axis)
               + (v - cv) * g.pixel_pitch_v_mm * pose.detector_v_axis)
    d = pos - pose.source_pos_mm
    d = d / np.linalg.norm(d)
    return pose.source_pos_mm.copy(), d


def footprint_pixels(pose: ProjectionPose, voxel_center_mm, voxel_pitch_mm: float) -> float:
    """Projected size of a voxel on the detector, in detector pixels."""
    g = pose.geometry
    xi = np.asarray(voxel_center_mm, dtype=float) - pose.source_pos_mm
    xn = float(xi @ pose.detector_normal)
    if g.detector_shape is DetectorShape.FLAT_PANEL:
        depth = xn
    else:
        depth = float(np.hypot(xn, xi @ pose.detector_u_axis))
    if xn <= 1e-9 or depth <= 1e-9:
        raise BehindSourceError("voxel not in front of the source plane")
    return voxel_pitch_mm * (g.source_to_detector_mm / depth) / g.pixel_pitch_u_mm


def pose_pack(geometry: ScanGeometry, proj_indices=None) -> np.ndarray:
    """Pack poses into an [n, 14] float64 array for the numeric kernels.

    Layout per row: source(3), normal(3), u_axis(3), v_axis(3), cu, cv.
    """
    if proj_indices is None:
        proj_indices = np.arange(geometry.n_projections)
    proj_indices = np.asarray(proj_indices, dtype=np.int64)
    theta = geometry.start_angle_rad + 2.0 * np.pi * proj_indices / geometry.projections_per_rotation
    z = geometry.start_z_mm + geometry.table_feed_per_rotation_mm * proj_indices / geometry.projections_per_rotation
    c, s = np.cos(theta), np.sin(theta)
    n = len(proj_indices)
    out = np.empty((n, 14))
    out[:, 0] = geometry.source_to_iso_mm * c
    out[:, 1] = geometry.source_to_iso_mm * s
    out[:, 2] = z
    out[:, 3] = -c
    out[:, 4] = -s
    out[:, 5] = 0.0
    out[:, 6] = s
    out[:, 7] = -c
    out[:, 8] = 0.0
    out[:, 9] = 0.0
    out[:, 10] = 0.0
    out[:, 11] = 1.0
    out[:, 12] = 0.5 * (geometry.detector_cols - 1)
    out[:, 13] = 0.5 * (geometry.detector_rows - 1)
    return out
