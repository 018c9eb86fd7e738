"""Filter tests.

Frozen oracles: the tap DC sum is checked against the truncated odd
harmonic series computed independently here, and the frequency response
against the ideal |f| ramp via FFT correlation and the exact Nyquist
value 1/(2 tau^2).
"""

import numpy as np
import pytest

from helixct.filters import (
    clamp_conv_matrix,
    lanczos3_downsample_matrix,
    lanczos3_kernel,
    mip_level_matrices,
    ramp_convolve_adjoint_rows,
    ramp_convolve_rows,
    ramp_taps,
    ramp_tap_gradient,
    separable_lowpass,
    taper_row_weights,
    taper_weight_at,
)


def dc_series(cols, tau):
    """Independent DC sum: center tap minus the truncated odd 1/k^2 series.

    Offsets run from -cols to cols-1, so the negative side has one more
    term than the positive side when cols is odd.
    """
    h0 = 1.0 / (4.0 * tau * tau)
    s = sum(1.0 / (np.pi * k * tau) ** 2 for k in range(1, cols + 1) if k % 2)
    s += sum(1.0 / (np.pi * k * tau) ** 2 for k in range(1, cols) if k % 2)
    return h0 - s


def test_ramp_tap_values():
    for cols, tau in ((64, 1.0), (128, 3.0)):
        taps = ramp_taps(cols, tau)
        assert taps.shape == (2 * cols,)
        c = cols
        assert taps[c] == pytest.approx(1.0 / (4.0 * tau * tau), rel=1e-15)
        assert taps[c + 1] == pytest.approx(-1.0 / (np.pi * tau) ** 2, rel=1e-15)
        assert taps[c - 1] == taps[c + 1]
        assert taps[c + 2] == 0.0 and taps[c - 2] == 0.0
        assert taps[c + 5] == pytest.approx(-1.0 / (np.pi * 5.0 * tau) ** 2, rel=1e-15)
        # even offsets vanish, odd ones are symmetric
        n = np.arange(2 * cols) - cols
        assert np.all(taps[(n % 2 == 0) & (n != 0)] == 0.0)
        pos = [k for k in range(1, cols) if k % 2]
        assert np.allclose(taps[c + np.array(pos)], taps[c - np.array(pos)])
    with pytest.raises(ValueError):
        ramp_taps(1, 1.0)


def test_ramp_dc_sum_matches_series():
    # the discrete ramp does not integrate to exactly zero; the truncation
    # defect is the tail of the odd harmonic series and shrinks like 1/cols
    for cols, tau in ((64, 1.0), (128, 3.0), (97, 2.0)):
        taps = ramp_taps(cols, tau)
        assert taps.sum() == pytest.approx(dc_series(cols, tau), rel=1e-10)
        h0 = 1.0 / (4.0 * tau * tau)
        assert 0.0 < taps.sum() < 0.01 * h0
    # defect halves when cols doubles
    assert ramp_taps(128, 1.0).sum() == pytest.approx(0.5 * ramp_taps(64, 1.0).sum(), rel=0.1)


def test_ramp_frequency_response():
    cols, tau = 128, 3.0
    taps = ramp_taps(cols, tau)
    h = np.abs(np.fft.fft(np.fft.ifftshift(np.pad(taps, (0, 0)))))
    # ideal response is |f|; compare against the folded bin index
    k = np.arange(2 * cols)
    f = np.minimum(k, 2 * cols - k).astype(float)
    corr = np.corrcoef(h, f)[0, 1]
    assert corr > 0.999
    # exact top: H(Nyquist) = 1/(2 tau^2) up to the truncation defect
    n = np.arange(2 * cols) - cols
    hnyq = np.sum(taps * (-1.0) ** n)
    assert hnyq * 2.0 * tau * tau == pytest.approx(1.0, abs=5e-3)


def test_ramp_convolution_is_shifted_tap_lookup():
    cols = 16
    taps = np.arange(2 * cols, dtype=float)  # arbitrary, easy to index
    for j in (0, 3, 15):
        row = np.zeros(cols)
        row[j] = 1.0
        out = ramp_convolve_rows(row[None, :], taps)[0]
        expect = np.array([taps[i - j + cols] for i in range(cols)])
        assert np.allclose(out, expect)
    with pytest.raises(ValueError):
        ramp_convolve_rows(np.zeros((2, cols)), np.zeros(cols))


def test_ramp_convolution_shapes_and_linearity():
    rng = np.random.default_rng(0)
    taps = ramp_taps(16, 2.0)
    x = rng.normal(size=(3, 4, 16))
    y = rng.normal(size=(3, 4, 16))
    fx = ramp_convolve_rows(x, taps)
    assert fx.shape == x.shape
    both = ramp_convolve_rows(2.0 * x - 3.0 * y, taps)
    assert np.allclose(both, 2.0 * fx - 3.0 * ramp_convolve_rows(y, taps), atol=1e-12)


def test_ramp_adjoint_identity():
    rng = np.random.default_rng(1)
    taps = ramp_taps(16, 1.5)
    x = rng.normal(size=(5, 16))
    y = rng.normal(size=(5, 16))
    lhs = np.sum(ramp_convolve_rows(x, taps) * y)
    rhs = np.sum(x * ramp_convolve_adjoint_rows(y, taps))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_ramp_tap_gradient_matches_finite_difference():
    rng = np.random.default_rng(2)
    cols = 12
    rows = rng.normal(size=(3, cols))
    grad_out = rng.normal(size=(3, cols))
    taps = ramp_taps(cols, 1.0)
    g = ramp_tap_gradient(grad_out, rows)
    assert g.shape == (2 * cols,)
    assert g[0] == 0.0  # the first tap never overlaps the output window

    def f(t):
        return np.sum(grad_out * ramp_convolve_rows(rows, t))

    # the objective is linear in the taps, so one-sided differences are exact
    eps = 1e-3
    for k in (0, 1, 5, cols, cols + 3, 2 * cols - 1):
        t2 = taps.copy()
        t2[k] += eps
        fd = (f(t2) - f(taps)) / eps
        assert g[k] == pytest.approx(fd, rel=1e-9, abs=1e-9)


def test_taper_weights():
    w = taper_row_weights(16, 0.8)
    q = 2.0 * np.arange(16) / 15.0 - 1.0
    assert np.all(w[np.abs(q) <= 0.8] == 1.0)
    assert w[0] == pytest.approx(0.0, abs=1e-30)
    assert w[-1] == pytest.approx(0.0, abs=1e-30)
    assert np.allclose(w, w[::-1])
    # midpoint of the rolloff is exactly half
    assert taper_weight_at(0.9, 0.8) == pytest.approx(0.5)
    assert taper_weight_at(-0.9, 0.8) == pytest.approx(0.5)
    assert taper_weight_at(1.5, 0.8) == 0.0
    # Q = 1 means no taper at all
    assert np.all(taper_row_weights(16, 1.0) == 1.0)
    assert np.all(taper_row_weights(1, 0.8) == 1.0)
    for bad in (0.0, -0.5, 1.5):
        with pytest.raises(ValueError):
            taper_row_weights(16, bad)


def test_lanczos_kernel_properties():
    for scale in (2.0, 4.0):
        k = lanczos3_kernel(scale)
        assert k.sum() == pytest.approx(1.0, rel=1e-12)
        assert np.allclose(k, k[::-1])
        half = (len(k) - 1) // 2
        # zero crossings at multiples of the scale
        for m in (1, 2):
            off = int(round(m * scale))
            assert abs(k[half + off]) < 1e-12
    # an octave kernel kills the Nyquist component
    k = lanczos3_kernel(2.0)
    n = np.arange(len(k)) - (len(k) - 1) // 2
    assert abs(np.sum(k * (-1.0) ** n)) < 0.05


def test_clamp_conv_matrix():
    rng = np.random.default_rng(3)
    k = np.array([0.25, 0.5, 0.25])
    m = clamp_conv_matrix(10, k)
    assert np.allclose(m.sum(axis=1), 1.0)
    x = rng.normal(size=10)
    manual = np.empty(10)
    for i in range(10):
        manual[i] = sum(kn * x[np.clip(i + n, 0, 9)] for n, kn in zip((-1, 0, 1), k))
    assert np.allclose(m @ x, manual)


def test_mip_level_matrices_progressive_smoothing():
    mats = mip_level_matrices(16, 128, 5)
    assert len(mats) == 5
    assert np.allclose(mats[0][0], np.eye(16))
    assert np.allclose(mats[0][1], np.eye(128))
    rng = np.random.default_rng(4)
    noise = rng.normal(size=128)
    variances = [np.var(mc @ noise) for _, mc in mats]
    assert all(b < a for a, b in zip(variances, variances[1:]))
    for mr, mc in mats:
        assert np.allclose(mr.sum(axis=1), 1.0)
        assert np.allclose(mc.sum(axis=1), 1.0)


def test_downsample_matrix():
    m = lanczos3_downsample_matrix(16, 4)
    assert m.shape == (16, 64)
    assert np.allclose(m.sum(axis=1), 1.0)
    # constants survive exactly, linear ramps survive away from the edges
    assert np.allclose(m @ np.full(64, 3.7), 3.7)
    ramp = np.arange(64, dtype=float)
    got = m @ ramp
    expect = 4.0 * np.arange(16) + 1.5  # coarse sample centers
    assert np.abs(got - expect)[2:-2].max() < 0.05


def test_separable_lowpass():
    rng = np.random.default_rng(5)
    img = rng.normal(size=(2, 6, 9))
    k = np.array([0.15, 1.0, 0.15])
    out = separable_lowpass(img, k)
    assert out.shape == img.shape
    # matches the explicit matrix form on both axes
    kn = k / k.sum()
    mu = clamp_conv_matrix(9, kn)
    mv = clamp_conv_matrix(6, kn)
    for i in range(2):
        assert np.allclose(out[i], mv @ img[i] @ mu.T)
    # kernel is normalized internally: scaling it changes nothing
    assert np.allclose(separable_lowpass(img, 10.0 * k), out)
    assert np.allclose(separable_lowpass(np.full((3, 5), 2.5), k), 2.5)
    with pytest.raises(ValueError):
        separable_lowpass(img, np.ones(4))
