"""Filter construction: ramp taps, cosine row taper, Lanczos-3 kernels.

Everything here is small dense linear algebra.  Clamp-to-edge convolutions
are materialized as explicit (size x size) matrices so that forward and
transpose applications are exact linear-algebra pairs.
"""

from __future__ import annotations

import numpy as np


def ramp_taps(detector_cols: int, pixel_pitch_u_mm: float) -> np.ndarray:
    """Discrete ramp (Ram-Lak) taps of length 2*detector_cols.

    Tap index k corresponds to offset n = k - detector_cols:
    h[0] = 1/(4 tau^2), h[n] = -1/(pi n tau)^2 for odd n, 0 for even n != 0.
    """
    if detector_cols < 2:
        raise ValueError("need detector_cols >= 2")
    tau = pixel_pitch_u_mm
    n = np.arange(2 * detector_cols) - detector_cols
    taps = np.zeros(2 * detector_cols)
    odd = (n % 2) != 0
    taps[odd] = -1.0 / (np.pi * n[odd] * tau) ** 2
    taps[n == 0] = 1.0 / (4.0 * tau * tau)
    return taps


def ramp_convolve_rows(rows: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Convolve along the last axis with centered taps, zero-padded.

    With cols = rows.shape[-1] and taps of length 2*cols (center at index
    cols), output[i] = sum_j rows[j] * taps[i - j + cols].
    """
    cols = rows.shape[-1]
    if len(taps) != 2 * cols:
        raise ValueError(f"filter length {len(taps)} != 2*cols = {2 * cols}")
    flat = rows.reshape(-1, cols)
    out = np.empty_like(flat, dtype=np.float64)
    for i, r in enumerate(flat):
        out[i] = np.convolve(r, taps)[cols:2 * cols]
    return out.reshape(rows.shape)


def ramp_convolve_adjoint_rows(grad: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Transpose of ramp_convolve_rows with respect to the row data."""
    cols = grad.shape[-1]
    rev = taps[::-1]
    flat = grad.reshape(-1, cols)
    out = np.empty_like(flat, dtype=np.float64)
    for i, g in enumerate(flat):
        out[i] = np.convolve(g, rev)[cols - 1:2 * cols - 1]
    return out.reshape(grad.shape)


def ramp_tap_gradient(grad_out: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Gradient of sum(grad_out * ramp_convolve_rows(rows, taps)) w.r.t. taps."""
    cols = rows.shape[-1]
    acc = np.zeros(2 * cols)
    gf = grad_out.reshape(-1, cols)
    rf = rows.reshape(-1, cols)
    for g, r in zip(gf, rf):
        # d out[i] / d taps[k] = r[i - k + cols]; nonzero only for k >= 1
        acc[1:] += np.convolve(g, r[::-1])[:2 * cols - 1]
    return acc


def taper_row_weights(rows: int, q_taper: float) -> np.ndarray:
    """Cosine row taper: 1 on |q| <= Q, cos^2 rolloff to 0 at |q| = 1."""
    if not (0.0 < q_taper <= 1.0):
        raise ValueError("Q must be in (0, 1]")
    if rows < 2:
        return np.ones(max(rows, 1))
    q = 2.0 * np.arange(rows) / (rows - 1) - 1.0
    return taper_weight_at(q, q_taper)


def taper_weight_at(q, q_taper: float):
    """Taper weight for continuous normalized row coordinate(s) q in [-1, 1]."""
    aq = np.abs(q)
    if q_taper >= 1.0:
        return np.where(aq <= 1.0, 1.0, 0.0)
    ramp = np.cos(0.5 * np.pi * (aq - q_taper) / (1.0 - q_taper)) ** 2
    w = np.where(aq <= q_taper, 1.0, np.where(aq <= 1.0, ramp, 0.0))
    return w


def lanczos3_kernel(scale: float) -> np.ndarray:
    """Integer-tap Lanczos-3 low-pass with cutoff 1/scale of Nyquist, sum 1."""
    support = int(np.ceil(3.0 * scale)) - 1
    n = np.arange(-support, support + 1)
    x = n / scale
    k = np.sinc(x) * np.sinc(x / 3.0)
    k[np.abs(x) >= 3.0] = 0.0
    return k / k.sum()


def clamp_conv_matrix(size: int, kernel: np.ndarray) -> np.ndarray:
    """Dense matrix M with (M x)[i] = sum_n k[n] * x[clamp(i + n)]."""
    half = (len(kernel) - 1) // 2
    m = np.zeros((size, size))
    for n, kn in zip(range(-half, half + 1), kernel):
        idx = np.clip(np.arange(size) + n, 0, size - 1)
        m[np.arange(size), idx] += kn
    return m


def mip_level_matrices(rows: int, cols: int, levels: int):
    """Per-level (row_matrix, col_matrix) pairs; level 0 is the identity."""
    mats = [(np.eye(rows), np.eye(cols))]
    for lev in range(1, levels):
        k = lanczos3_kernel(2.0 ** lev)
        mats.append((clamp_conv_matrix(rows, k), clamp_conv_matrix(cols, k)))
    return mats


def lanczos3_downsample_matrix(n_out: int, factor: int = 4) -> np.ndarray:
    """Matrix mapping n_out*factor fine samples to n_out coarse ones.

    Coarse sample j sits at fine coordinate factor*j + (factor-1)/2; taps are
    Lanczos-3 at scale `factor`, clamp-to-edge, rows normalized to sum 1.
    """
    n_in = n_out * factor
    center = (factor - 1) / 2.0
    half = 3 * factor
    m = np.zeros((n_out, n_in))
    offs = np.arange(-half, half + 1)
    for j in range(n_out):
        pos = factor * j + center
        base = int(np.floor(pos))
        rel = (base + offs - pos) / factor
        w = np.sinc(rel) * np.sinc(rel / 3.0)
        w[np.abs(rel) >= 3.0] = 0.0
        idx = np.clip(base + offs, 0, n_in - 1)
        np.add.at(m[j], idx, w)
    return m / m.sum(axis=1, keepdims=True)


def separable_lowpass(images: np.ndarray, kernel_1d) -> np.ndarray:
    """Apply an odd-length kernel along the last two axes, clamp-to-edge.

    The kernel is normalized by its sum before use.
    """
    k = np.asarray(kernel_1d, dtype=float)
    if len(k) % 2 != 1:
        raise ValueError("kernel must have odd length")
    k = k / k.sum()
    shape = images.shape
    rows, cols = shape[-2], shape[-1]
    mu = clamp_conv_matrix(cols, k)
    mv = clamp_conv_matrix(rows, k)
    flat = images.reshape(-1, rows, cols)
    out = np.einsum("rk,nkc,sc->nrs", mv, flat, mu, optimize=True)
    return out.reshape(shape)
