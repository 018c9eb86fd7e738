"""Hounsfield conversion, RMSE/PSNR, and binary file formats.

Volumes and sinograms are stored as little-endian float32 with a small
binary header plus a JSON sidecar (`<path>.meta.json`) carrying the
geometry and grid metadata the payload cannot.  Windowed slices export as
16-bit binary PGM.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from helixct import operators as ops
from helixct.geometry import ScanGeometry
from helixct.phantom import Volume

MAGIC_VOLUME = b"CTVL"
MAGIC_SINOGRAM = b"CTSG"
MAGIC_PARAMS = b"CTPR"
FORMAT_VERSION = 1

_SPACE_BYTES = {ops.Space.LOG_ATTENUATION: b"L", ops.Space.PHOTON_INTENSITY: b"I"}
_BYTE_SPACES = {v: k for k, v in _SPACE_BYTES.items()}


class FormatError(ValueError):
    """Raised for malformed files; the message carries the byte offset."""


class SliceAxis(Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"


@dataclass(frozen=True)
class HuSpec:
    """Water attenuation anchor and display window for HU-space metrics."""

    mu_water_per_mm: float = 0.01837
    window_hu: float = 2000.0

    def __post_init__(self):
        if self.mu_water_per_mm <= 0:
            raise ValueError("mu_water_per_mm must be > 0")
        if self.window_hu <= 0:
            raise ValueError("window_hu must be > 0")


def to_hu(mu, spec: HuSpec = HuSpec()):
    return 1000.0 * (np.asarray(mu, dtype=float) - spec.mu_water_per_mm) / spec.mu_water_per_mm


def from_hu(hu, spec: HuSpec = HuSpec()):
    return spec.mu_water_per_mm * (1.0 + np.asarray(hu, dtype=float) / 1000.0)


def rmse_psnr(volume, reference, spec: HuSpec = HuSpec()) -> tuple[float, float]:
    """Full-volume RMSE in HU and PSNR against the display window.

    psnr = 20 log10(window / rmse); identical volumes report rmse 0 and an
    infinite psnr.  No clipping or windowing is applied to the data.
    """
    a = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=float)
    b = reference.data if isinstance(reference, Volume) else np.asarray(reference, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff_hu = 1000.0 * (a - b) / spec.mu_water_per_mm
    rmse = float(np.sqrt(np.mean(diff_hu ** 2)))
    if rmse == 0.0:
        return 0.0, math.inf
    return rmse, 20.0 * math.log10(spec.window_hu / rmse)


# --- binary volume / sinogram files --------------------------------------------

def _sidecar_path(path) -> str:
    return str(path) + ".meta.json"


def _read_exact(f, n, what, offset):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what} at byte {offset}: "
                          f"expected {n} bytes, got {len(buf)}")
    return buf


def _read_header(f, magic, path):
    got = _read_exact(f, 4, "magic", 0)
    if got != magic:
        raise FormatError(f"bad magic at byte 0 in {path}: "
                          f"expected {magic!r}, got {got!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version", 4))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at byte 4 in {path}")


def _write_atomic(path, blob: bytes):
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def write_volume(path, volume: Volume):
    nz, ny, nx = volume.data.shape
    header = MAGIC_VOLUME + struct.pack("<IIII", FORMAT_VERSION, nx, ny, nz)
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    _write_atomic(path, header + payload)
    meta = {
        "kind": "volume",
        "dims": [nx, ny, nz],
        "voxel_pitch_mm": volume.voxel_pitch_mm,
        "origin_mm": list(volume.origin_mm),
    }
    with open(_sidecar_path(path), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def read_volume(path) -> Volume:
    with open(path, "rb") as f:
        _read_header(f, MAGIC_VOLUME, path)
        nx, ny, nz = struct.unpack("<III", _read_exact(f, 12, "dims", 8))
        n = nx * ny * nz
        payload = _read_exact(f, 4 * n, "payload", 20)
        if f.read(1):
            raise FormatError(f"trailing bytes after payload at byte {20 + 4 * n} in {path}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape((nz, ny, nx))
    side = _sidecar_path(path)
    if not os.path.exists(side):
        raise FormatError(f"missing sidecar {side}")
    with open(side) as f:
        meta = json.load(f)
    if meta.get("dims") != [nx, ny, nz]:
        raise FormatError(f"sidecar dims {meta.get('dims')} do not match "
                          f"payload dims {[nx, ny, nz]}")
    return Volume(data, float(meta["voxel_pitch_mm"]), tuple(meta["origin_mm"]))


def write_sinogram(path, sinogram: ops.Sinogram):
    n, rows, cols = sinogram.data.shape
    header = (MAGIC_SINOGRAM + struct.pack("<IIII", FORMAT_VERSION, n, rows, cols)
              + _SPACE_BYTES[sinogram.space])
    payload = np.ascontiguousarray(sinogram.data, dtype="<f4").tobytes()
    _write_atomic(path, header + payload)
    full = np.array_equal(sinogram.proj_indices,
                          np.arange(sinogram.geometry.n_projections))
    meta = {
        "kind": "sinogram",
        "dims": [n, rows, cols],
        "space": sinogram.space.value,
        "i0_photons": sinogram.i0_photons,
        "geometry": sinogram.geometry.to_json_dict(),
        "proj_indices": None if full else [int(i) for i in sinogram.proj_indices],
    }
    with open(_sidecar_path(path), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def read_sinogram(path) -> ops.Sinogram:
    with open(path, "rb") as f:
        _read_header(f, MAGIC_SINOGRAM, path)
        n, rows, cols = struct.unpack("<III", _read_exact(f, 12, "dims", 8))
        space_byte = _read_exact(f, 1, "space flag", 20)
        if space_byte not in _BYTE_SPACES:
            raise FormatError(f"unknown space flag {space_byte!r} at byte 20 in {path}")
        count = n * rows * cols
        payload = _read_exact(f, 4 * count, "payload", 21)
        if f.read(1):
            raise FormatError(f"trailing bytes after payload at byte {21 + 4 * count} in {path}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape((n, rows, cols))
    side = _sidecar_path(path)
    if not os.path.exists(side):
        raise FormatError(f"missing sidecar {side}")
    with open(side) as f:
        meta = json.load(f)
    geometry = ScanGeometry.from_json_dict(meta["geometry"])
    if geometry.detector_rows != rows or geometry.detector_cols != cols:
        raise FormatError(f"sidecar geometry detector {geometry.detector_rows}x"
                          f"{geometry.detector_cols} does not match payload "
                          f"{rows}x{cols}")
    idx = meta.get("proj_indices")
    if idx is None and n != geometry.n_projections:
        raise FormatError(f"sidecar geometry has {geometry.n_projections} projections "
                          f"but payload holds {n}")
    i0 = meta.get("i0_photons")
    return ops.Sinogram(data, _BYTE_SPACES[space_byte], geometry,
                        i0_photons=None if i0 is None else float(i0),
                        proj_indices=None if idx is None else np.asarray(idx, dtype=np.int64))


# --- learned parameter files ----------------------------------------------------

def write_params(path, ramp_taps: np.ndarray, gain: float, extra: dict = None):
    """Learned pipeline parameters: ramp taps (f64) plus the scalar gain."""
    taps = np.ascontiguousarray(ramp_taps, dtype="<f8")
    blob = (MAGIC_PARAMS + struct.pack("<II", FORMAT_VERSION, taps.size)
            + taps.tobytes() + struct.pack("<d", float(gain)))
    _write_atomic(path, blob)
    meta = {"kind": "params", "n_taps": int(taps.size), "gain": float(gain)}
    meta.update(extra or {})
    with open(_sidecar_path(path), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def read_params(path) -> tuple[np.ndarray, float]:
    with open(path, "rb") as f:
        _read_header(f, MAGIC_PARAMS, path)
        (n_taps,) = struct.unpack("<I", _read_exact(f, 4, "tap count", 8))
        taps = np.frombuffer(_read_exact(f, 8 * n_taps, "taps", 12), dtype="<f8").copy()
        (gain,) = struct.unpack("<d", _read_exact(f, 8, "gain", 12 + 8 * n_taps))
        if f.read(1):
            raise FormatError(f"trailing bytes at byte {20 + 8 * n_taps} in {path}")
    return taps, gain


# --- slice export ---------------------------------------------------------------

def export_slice(volume: Volume, axis, index: int, window_hu: float,
                 level_hu: float, path, spec: HuSpec = HuSpec()):
    """Write one windowed slice as a 16-bit binary PGM image.

    Grayscale maps level-window/2 .. level+window/2 onto 0..65535.
    """
    axis = SliceAxis(axis) if not isinstance(axis, SliceAxis) else axis
    nz, ny, nx = volume.data.shape
    limits = {SliceAxis.AXIAL: nz, SliceAxis.CORONAL: ny, SliceAxis.SAGITTAL: nx}
    if not 0 <= index < limits[axis]:
        raise IndexError(f"{axis.value} index {index} out of range 0..{limits[axis] - 1}")
    if axis is SliceAxis.AXIAL:
        plane = volume.data[index, :, :]
    elif axis is SliceAxis.CORONAL:
        plane = volume.data[:, index, :]
    else:
        plane = volume.data[:, :, index]
    hu = to_hu(plane, spec)
    lo = level_hu - window_hu / 2.0
    norm = np.clip((hu - lo) / window_hu, 0.0, 1.0)
    pixels = np.rint(norm * 65535.0).astype(">u2")
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n65535\n".encode("ascii")
    _write_atomic(path, header + pixels.tobytes())
