"""Fourier toolkit: naive-DFT oracles, projector identities, LPF contracts."""

import numpy as np
import pytest

from freqlens import spectral
from util import naive_dft1, naive_dft2


def test_constant_image_is_dc_only():
    c = 0.7
    img = np.full((3, 8, 8), c, dtype=np.float32)
    spec = spectral.dft2_magnitude(img)
    center = spec.values[4, 4]
    assert center == pytest.approx(c * 64, rel=1e-6)
    rest = spec.values.copy()
    rest[4, 4] = 0
    assert np.abs(rest).max() < 1e-6


def test_cosine_gives_two_symmetric_peaks():
    h = w = 16
    u0 = 3
    rows = np.arange(h)[:, None]
    img = np.cos(2 * np.pi * u0 * rows / h) * np.ones((1, h, w))
    spec = spectral.dft2_magnitude(img)
    flat = spec.values.copy()
    peaks = []
    for _ in range(2):
        idx = np.unravel_index(flat.argmax(), flat.shape)
        peaks.append(idx)
        flat[idx] = 0
    assert sorted(peaks) == [(h // 2 - u0, w // 2), (h // 2 + u0, w // 2)]
    assert flat.max() < 1e-6 * spec.values.max()


def test_dft2_magnitude_matches_naive_oracle():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (1, 8, 8))
    spec = spectral.dft2_magnitude(img)
    oracle = np.fft.fftshift(np.abs(naive_dft2(img[0])))
    np.testing.assert_allclose(spec.values, oracle, atol=1e-4)


def test_normalized_map_in_unit_range_with_dc_center():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (3, 10, 10))
    spec = spectral.dft2_magnitude(img, normalization="log1p-minmax")
    assert spec.values.min() >= 0
    assert spec.values.max() <= 1
    # natural images put the largest magnitude at DC
    assert spec.values[5, 5] == pytest.approx(1.0)


def test_spectrum_diff_zero_for_identical_batches():
    x = np.random.default_rng(2).uniform(0, 1, (3, 3, 8, 8))
    spec = spectral.spectrum_diff(x, x)
    assert np.abs(spec.values).max() == 0


def test_spectrum_diff_constant_perturbation_is_dc_only():
    x = np.random.default_rng(3).uniform(0, 0.9, (2, 3, 8, 8))
    spec = spectral.spectrum_diff(x, x + 0.05)
    rest = spec.values.copy()
    rest[4, 4] = 0
    assert spec.values[4, 4] > 0
    assert np.abs(rest).max() < 1e-9


def test_spectrum_diff_matches_scripted_naive_average():
    rng = np.random.default_rng(4)
    clean = rng.uniform(0, 1, (4, 2, 8, 8))
    adv = np.clip(clean + rng.normal(0, 0.02, clean.shape), 0, 1)
    spec = spectral.spectrum_diff(clean, adv)
    acc = np.zeros((8, 8))
    for b in range(4):
        for c in range(2):
            acc += np.abs(naive_dft2(adv[b, c] - clean[b, c]))
    oracle = np.fft.fftshift(acc / 8)
    np.testing.assert_allclose(spec.values, oracle, atol=1e-4)


def test_spectrum_diff_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shapes"):
        spectral.spectrum_diff(np.zeros((2, 3, 8, 8)), np.zeros((3, 3, 8, 8)))


def test_spectrum_diff_alternative_mode_differs():
    rng = np.random.default_rng(5)
    clean = rng.uniform(0, 1, (2, 1, 8, 8))
    adv = np.clip(clean + rng.normal(0, 0.05, clean.shape), 0, 1)
    a = spectral.spectrum_diff(clean, adv, mode="spectrum-of-diff")
    b = spectral.spectrum_diff(clean, adv, mode="diff-of-spectra")
    assert not np.allclose(a.values, b.values)


# -- low-pass filter ------------------------------------------------------------


def test_lpf_full_passband_is_identity():
    x = np.random.default_rng(6).uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
    out = spectral.low_pass_filter(x, 8)
    np.testing.assert_allclose(out, x, atol=1e-5)


def test_lpf_constant_image_unchanged_any_degree():
    x = np.full((1, 1, 8, 8), 0.4, dtype=np.float32)
    for d in (1, 2, 5, 8):
        np.testing.assert_allclose(spectral.low_pass_filter(x, d), x, atol=1e-6)


def test_lpf_impulse_matches_naive_oracle():
    img = np.zeros((8, 8))
    img[2, 5] = 1.0
    degree = 4
    spec = np.fft.fftshift(naive_dft2(img))
    mask = spectral.lpf_passband_mask(8, 8, degree)
    kept = np.fft.ifftshift(spec * mask)
    recon = np.array([[sum(kept[u, v] * np.exp(2j * np.pi * (u * r / 8 + v * c / 8))
                           for u in range(8) for v in range(8)) / 64
                       for c in range(8)] for r in range(8)])
    oracle = np.clip(recon.real, 0, 1)
    out = spectral.low_pass_filter(img[None, None], degree)[0, 0]
    np.testing.assert_allclose(out, oracle, atol=1e-5)


def test_lpf_idempotent():
    # mid-range input keeps Gibbs ringing inside [0,1] so the clamp stays inert
    x = (0.35 + 0.3 * np.random.default_rng(7).uniform(0, 1, (1, 2, 12, 12))).astype(np.float32)
    once = spectral.low_pass_filter(x, 6)
    assert once.min() > 0 and once.max() < 1
    twice = spectral.low_pass_filter(once, 6)
    np.testing.assert_allclose(once, twice, atol=1e-5)


def test_lpf_degree_out_of_range_rejected():
    x = np.zeros((1, 1, 8, 8))
    with pytest.raises(ValueError, match="degree"):
        spectral.low_pass_filter(x, 0)
    with pytest.raises(ValueError, match="degree"):
        spectral.low_pass_filter(x, 9)


def test_dft_round_trip():
    x = np.random.default_rng(8).uniform(0, 1, (5, 7))
    back = np.fft.ifft2(np.fft.fft2(x)).real
    np.testing.assert_allclose(back, x, atol=1e-5)


def test_parseval():
    x = np.random.default_rng(9).uniform(-1, 1, (12, 12))
    spatial = (x ** 2).sum()
    freq = (np.abs(np.fft.fft2(x)) ** 2).sum() / x.size
    assert freq == pytest.approx(spatial, rel=1e-4)


# -- LFI / HFI -------------------------------------------------------------------


def test_lfi_constant_column():
    x = np.full((5, 3), 2.5)
    np.testing.assert_allclose(spectral.lfi(x), x)
    np.testing.assert_allclose(spectral.hfi(x), 0.0)


def test_hfi_zero_mean_column():
    x = np.array([[1.0], [-1.0], [2.0], [-2.0]])
    np.testing.assert_allclose(spectral.lfi(x), 0.0)
    np.testing.assert_allclose(spectral.hfi(x), x)


def test_lfi_hfi_projection_matrix_oracle():
    x = np.array([[1.0], [3.0]])
    n = 2
    ones = np.ones((n, 1))
    proj = ones @ ones.T / n
    np.testing.assert_allclose(spectral.lfi(x), proj @ x)
    np.testing.assert_allclose(spectral.lfi(x), [[2.0], [2.0]])
    np.testing.assert_allclose(spectral.hfi(x), (np.eye(n) - proj) @ x)
    np.testing.assert_allclose(spectral.hfi(x), [[-1.0], [1.0]])


@pytest.mark.parametrize("seed", range(5))
def test_lfi_hfi_exact_decomposition_and_projectors(seed):
    x = np.random.default_rng(seed).standard_normal((6, 10))
    low, high = spectral.lfi(x), spectral.hfi(x)
    np.testing.assert_allclose(low + high, x, atol=1e-6)
    assert abs((low * high).sum()) < 1e-6 * max(1.0, (x ** 2).sum())
    np.testing.assert_allclose(spectral.lfi(low), low, atol=1e-6)
    np.testing.assert_allclose(spectral.hfi(high), high, atol=1e-6)


def test_ratio_pure_dc_is_inf():
    act = np.ones((2, 4, 3, 3), dtype=np.float32)
    assert spectral.lfi_hfi_ratio(act) == np.inf


def test_ratio_pure_ac_is_zero():
    act = np.zeros((1, 2, 2, 2), dtype=np.float32)
    act[0, 0] = 1.0
    act[0, 1] = -1.0
    assert spectral.lfi_hfi_ratio(act) == 0.0


def test_ratio_matches_explicit_dft_oracle():
    rng = np.random.default_rng(11)
    act = rng.standard_normal((3, 5, 4, 4))
    got = spectral.lfi_hfi_ratio(act)
    ratios = []
    for b in range(3):
        x = act[b].reshape(5, 16)
        spec = np.fft.fft(x, axis=0)
        low = (np.abs(spec[0]) ** 2).sum()
        high = (np.abs(spec[1:]) ** 2).sum()
        ratios.append(np.sqrt(low / high))
    assert got == pytest.approx(np.mean(ratios), abs=1e-5)


# -- kernel spectra ---------------------------------------------------------------


def test_kernel_spectrum_constant_row():
    w = np.full((1, 1, 3, 3), 0.5)
    spec = spectral.kernel_spectrum(w)
    assert spec[0, 0] == pytest.approx(4.5, rel=1e-6)
    assert np.abs(spec[0, 1:]).max() < 1e-9


def test_kernel_spectrum_impulse_row_flat():
    w = np.zeros((1, 1, 2, 2))
    w[0, 0, 0, 0] = 1.0
    np.testing.assert_allclose(spectral.kernel_spectrum(w), 1.0, atol=1e-9)


def test_kernel_spectrum_matches_naive_dft():
    rng = np.random.default_rng(12)
    w = rng.standard_normal((2, 3, 3, 3))
    spec = spectral.kernel_spectrum(w)
    for r in range(2):
        oracle = np.abs(naive_dft1(w[r].reshape(-1)))
        np.testing.assert_allclose(spec[r], oracle, atol=1e-4)


def test_hf_energy_dc_only_row():
    row = np.zeros(16)
    row[0] = 3.0
    assert spectral.hf_energy_fraction(row, 4) == 0.0


def test_hf_energy_flat_row_half():
    row = np.ones(16)
    assert spectral.hf_energy_fraction(row, 4) == pytest.approx(0.5)


def test_hf_energy_matches_scripted_summation():
    rng = np.random.default_rng(13)
    row = rng.uniform(0, 2, 27)
    band = 6
    expected = (row[6:21] ** 2).sum() / (row ** 2).sum()
    assert spectral.hf_energy_fraction(row, band) == expected


def test_hf_energy_zero_total():
    assert spectral.hf_energy_fraction(np.zeros(10), 2) == 0.0


def test_hf_energy_band_too_wide():
    with pytest.raises(ValueError, match="band"):
        spectral.hf_energy_fraction(np.ones(8), 4)
