"""Analytic ellipsoid phantoms, exact line integrals, and voxelization.

Ellipsoids admit closed-form ray chords via the quadratic formula, which
makes them exact oracles for any discrete projector.  Attenuation is
additive: mu(p) = background (inside its bounding box) plus the deltas of
every ellipsoid containing p.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple
    semi_axes_mm: tuple
    z_rotation_rad: float = 0.0
    delta_mu_per_mm: float = 0.0

    def __post_init__(self):
        if min(self.semi_axes_mm) <= 0:
            raise ValueError("semi-axes must be strictly positive")


@dataclass(frozen=True)
class EllipsoidPhantom:
    ellipsoids: tuple
    background_mu: float = 0.0
    # axis-aligned ((x0,x1),(y0,y1),(z0,z1)) region carrying background_mu;
    # None means background contributes nowhere (keeps integrals closed-form)
    background_box_mm: tuple = None

    def rotated_z(self, angle_rad: float) -> "EllipsoidPhantom":
        """Phantom rigidly rotated about the z axis (background box unchanged)."""
        c, s = np.cos(angle_rad), np.sin(angle_rad)
        rot = []
        for e in self.ellipsoids:
            x, y, z = e.center_mm
            rot.append(Ellipsoid((c * x - s * y, s * x + c * y, z),
                                 e.semi_axes_mm,
                                 e.z_rotation_rad + angle_rad,
                                 e.delta_mu_per_mm))
        return EllipsoidPhantom(tuple(rot), self.background_mu, self.background_box_mm)


@dataclass
class VolumeSpec:
    dims: tuple            # (nx, ny, nz)
    voxel_pitch_mm: float
    origin_mm: tuple       # world position of the center of voxel (0, 0, 0)


@dataclass
class Volume:
    """Voxel grid of attenuation values (1/mm), data indexed [z, y, x]."""

    data: np.ndarray
    voxel_pitch_mm: float
    origin_mm: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("volume data must be 3D [z, y, x]")

    @property
    def dims(self):
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def spec(self) -> VolumeSpec:
        return VolumeSpec(self.dims, self.voxel_pitch_mm, tuple(self.origin_mm))


def empty_volume(spec: VolumeSpec) -> Volume:
    nx, ny, nz = spec.dims
    return Volume(np.zeros((nz, ny, nx)), spec.voxel_pitch_mm, tuple(spec.origin_mm))


def _local_frame(e: Ellipsoid):
    c, s = np.cos(e.z_rotation_rad), np.sin(e.z_rotation_rad)
    # rows of R map world -> local (rotation by -z_rotation)
    r = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return r, np.asarray(e.center_mm, dtype=float), np.asarray(e.semi_axes_mm, dtype=float)


def mu_at(phantom: EllipsoidPhantom, point_mm) -> float:
    return float(mu_at_many(phantom, np.asarray(point_mm, dtype=float)[None, :])[0])


def mu_at_many(phantom: EllipsoidPhantom, points_mm: np.ndarray) -> np.ndarray:
    """Vectorized mu lookup for an [n, 3] array of points."""
    pts = np.asarray(points_mm, dtype=float)
    mu = np.zeros(len(pts))
    if phantom.background_mu != 0.0 and phantom.background_box_mm is not None:
        (x0, x1), (y0, y1), (z0, z1) = phantom.background_box_mm
        inside = ((pts[:, 0] >= x0) & (pts[:, 0] <= x1)
                  & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
                  & (pts[:, 2] >= z0) & (pts[:, 2] <= z1))
        mu += phantom.background_mu * inside
    for e in phantom.ellipsoids:
        r, c, a = _local_frame(e)
        q = (pts - c) @ r.T / a
        mu += e.delta_mu_per_mm * (np.einsum("ij,ij->i", q, q) <= 1.0)
    return mu


def analytic_line_integral(phantom: EllipsoidPhantom, origin_mm, dir_unit) -> float:
    """Exact line integral of mu along an (origin, unit direction) ray."""
    o = np.asarray(origin_mm, dtype=float)[None, :]
    d = np.asarray(dir_unit, dtype=float)[None, :]
    return float(analytic_line_integrals(phantom, o, d)[0])


def analytic_line_integrals(phantom: EllipsoidPhantom, origins_mm, dirs_unit) -> np.ndarray:
    """Vectorized exact line integrals for [n, 3] ray bundles."""
    o = np.asarray(origins_mm, dtype=float)
    d = np.asarray(dirs_unit, dtype=float)
    total = np.zeros(len(o))
    for e in phantom.ellipsoids:
        r, c, a = _local_frame(e)
        qo = (o - c) @ r.T / a
        qd = d @ r.T / a
        qa = np.einsum("ij,ij->i", qd, qd)
        qb = 2.0 * np.einsum("ij,ij->i", qo, qd)
        qc = np.einsum("ij,ij->i", qo, qo) - 1.0
        disc = qb * qb - 4.0 * qa * qc
        hit = disc > 0.0
        chord = np.zeros(len(o))
        # |t1 - t2| = sqrt(disc)/qa; with unit world direction t is arclength
        chord[hit] = np.sqrt(disc[hit]) / qa[hit]
        total += e.delta_mu_per_mm * chord
    if phantom.background_mu != 0.0 and phantom.background_box_mm is not None:
        total += phantom.background_mu * _box_chords(phantom.background_box_mm, o, d)
    return total


def _box_chords(box, o, d):
    t0 = np.full(len(o), -np.inf)
    t1 = np.full(len(o), np.inf)
    for ax in range(3):
        lo, hi = box[ax]
        da = d[:, ax]
        oa = o[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - oa) / da
            tb = (hi - oa) / da
        par = np.abs(da) < 1e-300
        tlo = np.where(par, -np.inf, np.minimum(ta, tb))
        thi = np.where(par, np.inf, np.maximum(ta, tb))
        miss = par & ((oa < lo) | (oa > hi))
        t0 = np.maximum(t0, tlo)
        t1 = np.minimum(t1, thi)
        t1 = np.where(miss, t0, t1)
    return np.maximum(t1 - t0, 0.0)


def voxelize(phantom: EllipsoidPhantom, dims, voxel_pitch_mm: float, origin_mm,
             supersample: int = 4) -> Volume:
    """Rasterize the phantom: each voxel is the mean of supersample^3 sub-samples.

    supersample=1 samples voxel centers.  Sub-samples sit at the centers of a
    regular supersample^3 grid inside the voxel (one per sub-cell).
    """
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    nx, ny, nz = dims
    if nx * ny * nz > 2**28:
        raise ValueError("volume too large")
    ox, oy, oz = origin_mm
    s = supersample
    off = ((np.arange(s) + 0.5) / s - 0.5) * voxel_pitch_mm
    data = np.zeros((nz, ny, nx))
    xs = ox + np.arange(nx) * voxel_pitch_mm
    ys = oy + np.arange(ny) * voxel_pitch_mm
    for iz in range(nz):
        z = oz + iz * voxel_pitch_mm
        acc = np.zeros((ny, nx))
        for dz in off:
            for dy in off:
                for dx in off:
                    pts = np.empty((ny * nx, 3))
                    gx, gy = np.meshgrid(xs + dx, ys + dy)
                    pts[:, 0] = gx.ravel()
                    pts[:, 1] = gy.ravel()
                    pts[:, 2] = z + dz
                    acc += mu_at_many(phantom, pts).reshape(ny, nx)
        data[iz] = acc / s**3
    return Volume(data, voxel_pitch_mm, tuple(origin_mm))


# --- standard phantom catalog ----------------------------------------------

MU_WATER_80KEV = 0.01837  # 1/mm


def _hu_to_mu(hu):
    return MU_WATER_80KEV * (1.0 + hu / 1000.0)


def standard_phantoms() -> dict:
    """Named catalog of built-in phantoms (deterministic)."""
    sphere = EllipsoidPhantom((Ellipsoid((0.0, 0.0, 0.0), (40.0, 40.0, 40.0), 0.0, 0.02),))

    lung_delta = -0.0165
    lesion_delta = _hu_to_mu(50.0) - _hu_to_mu(0.0)  # 50 HU against lung background
    chest = EllipsoidPhantom((
        Ellipsoid((0.0, 0.0, 0.0), (56.0, 44.0, 42.0), 0.0, 0.0191),          # body
        Ellipsoid((-26.0, -4.0, 2.0), (18.0, 24.0, 30.0), 0.15, lung_delta),  # left lung
        Ellipsoid((26.0, -4.0, 2.0), (18.0, 24.0, 30.0), -0.15, lung_delta),  # right lung
        Ellipsoid((0.0, 30.0, 0.0), (9.0, 9.0, 40.0), 0.0, 0.0150),           # spine
        Ellipsoid((26.0, -4.0, 8.0), (5.0, 5.0, 5.0), 0.0, lesion_delta),     # lesion R
        Ellipsoid((-26.0, -4.0, -6.0), (4.0, 4.0, 4.0), 0.0, lesion_delta),   # lesion L
    ))

    ladder_hu = (-900.0, -450.0, 0.0, 450.0, 900.0)
    ladder = EllipsoidPhantom(tuple(
        Ellipsoid((x, 0.0, 0.0), (10.0, 10.0, 10.0), 0.0, _hu_to_mu(hu))
        for x, hu in zip((-48.0, -24.0, 0.0, 24.0, 48.0), ladder_hu)
    ))

    return {"sphere": sphere, "chest-toy": chest, "contrast-ladder": ladder}


def get_phantom(name: str) -> EllipsoidPhantom:
    cat = standard_phantoms()
    if name not in cat:
        raise KeyError(f"unknown phantom {name!r}; available: {sorted(cat)}")
    return cat[name]


# --- JSON serialization ------------------------------------------------------

def phantom_to_json_dict(phantom: EllipsoidPhantom) -> dict:
    return {
        "background_mu": phantom.background_mu,
        "background_box_mm": phantom.background_box_mm,
        "ellipsoids": [
            {
                "center_mm": list(e.center_mm),
                "semi_axes_mm": list(e.semi_axes_mm),
                "z_rotation_rad": e.z_rotation_rad,
                "delta_mu_per_mm": e.delta_mu_per_mm,
            }
            for e in phantom.ellipsoids
        ],
    }


def phantom_from_json_dict(d: dict) -> EllipsoidPhantom:
    ells = tuple(
        Ellipsoid(tuple(r["center_mm"]), tuple(r["semi_axes_mm"]),
                  float(r.get("z_rotation_rad", 0.0)), float(r["delta_mu_per_mm"]))
        for r in d["ellipsoids"]
    )
    box = d.get("background_box_mm")
    if box is not None:
        box = tuple(tuple(b) for b in box)
    return EllipsoidPhantom(ells, float(d.get("background_mu", 0.0)), box)


def load_phantom(path) -> EllipsoidPhantom:
    with open(path) as f:
        return phantom_from_json_dict(json.load(f))


def save_phantom(phantom: EllipsoidPhantom, path):
    with open(path, "w") as f:
        json.dump(phantom_to_json_dict(phantom), f, indent=2)
