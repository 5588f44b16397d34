"""Fourier-domain analyses: 2-D spectra of images and perturbations, ideal
low-pass filtering by degree, kernel-row spectra, and the DC-projection
low/high-frequency split of activations.

Everything here is a pure function on plain arrays; autodiff never enters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fileio

NORMALIZATIONS = ("raw", "log1p-minmax")


@dataclass
class SpectrumMap:
    """Center-shifted 2-D magnitude spectrum. The DC bin sits at
    (H//2, W//2); values are >= 0, and in [0,1] after log1p-minmax."""

    values: np.ndarray
    normalization: str = "raw"


def _normalize(mag, normalization):
    if normalization == "raw":
        return mag
    if normalization == "log1p-minmax":
        logm = np.log1p(mag)
        lo, hi = logm.min(), logm.max()
        if hi <= lo:
            return np.zeros_like(logm)
        return (logm - lo) / (hi - lo)
    raise ValueError(f"unknown normalization {normalization!r}")


def dft2_magnitude(image, normalization="raw") -> SpectrumMap:
    """Per-channel 2-D DFT magnitude of a C x H x W image, averaged over
    channels and shifted so low frequencies sit in the center."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[1] < 2 or img.shape[2] < 2:
        raise ValueError(f"expected C x H x W with H, W >= 2, got shape {np.shape(image)}")
    mag = np.abs(np.fft.fft2(img, axes=(1, 2))).mean(axis=0)
    mag = np.fft.fftshift(mag)
    return SpectrumMap(_normalize(mag, normalization), normalization)


def spectrum_diff(clean, adv, mode="spectrum-of-diff", normalization="raw") -> SpectrumMap:
    """Frequency view of a perturbation over a batch (B x C x H x W).

    Default is the spectrum OF the difference, mean over batch and channels
    of |DFT2(adv - clean)|; mode="diff-of-spectra" gives |..adv..| - |..clean..|
    instead (absolute value of the difference of magnitudes).
    """
    c = np.asarray(clean, dtype=np.float64)
    a = np.asarray(adv, dtype=np.float64)
    if c.shape != a.shape:
        raise ValueError(f"batch shapes differ: {c.shape} vs {a.shape}")
    if c.ndim != 4:
        raise ValueError(f"expected B x C x H x W, got shape {c.shape}")
    if mode == "spectrum-of-diff":
        mag = np.abs(np.fft.fft2(a - c, axes=(2, 3))).mean(axis=(0, 1))
    elif mode == "diff-of-spectra":
        mag_a = np.abs(np.fft.fft2(a, axes=(2, 3))).mean(axis=(0, 1))
        mag_c = np.abs(np.fft.fft2(c, axes=(2, 3))).mean(axis=(0, 1))
        mag = np.abs(mag_a - mag_c)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    mag = np.fft.fftshift(mag)
    return SpectrumMap(_normalize(mag, normalization), normalization)


def lpf_passband_mask(h, w, degree):
    """Boolean H x W mask keeping the d x d block whose top-left corner is
    (H/2 - d//2, W/2 - d//2) in the center-shifted spectrum, completed with
    the conjugate mirror of its boundary bins.

    Without the completion an even-degree block keeps frequency -d/2 but not
    +d/2; the real-part truncation after the inverse transform then halves
    those bins and the filter stops being idempotent.
    """
    if not (1 <= degree <= min(h, w)):
        raise ValueError(f"LPF degree must be in [1, {min(h, w)}], got {degree}")
    mask = np.zeros((h, w), dtype=bool)
    r0 = h // 2 - degree // 2
    c0 = w // 2 - degree // 2
    mask[r0:r0 + degree, c0:c0 + degree] = True
    unshifted = np.fft.ifftshift(mask)
    rows = (-np.arange(h)) % h
    cols = (-np.arange(w)) % w
    unshifted |= unshifted[np.ix_(rows, cols)]
    return np.fft.fftshift(unshifted)


def lpf_project(images, degree):
    """Ideal low-pass projection (no range clamp) on (..., H, W) arrays."""
    arr = np.asarray(images)
    h, w = arr.shape[-2], arr.shape[-1]
    mask = lpf_passband_mask(h, w, degree)
    spec = np.fft.fftshift(np.fft.fft2(arr, axes=(-2, -1)), axes=(-2, -1))
    spec *= mask
    return np.fft.ifft2(np.fft.ifftshift(spec, axes=(-2, -1)), axes=(-2, -1)).real


def low_pass_filter(x, degree):
    """Keep the central d x d block of each channel's shifted spectrum and
    invert, clamped back to [0,1]. Accepts an image-batch object or array."""
    if hasattr(x, "images"):
        filtered = np.clip(lpf_project(x.images, degree), 0.0, 1.0).astype(x.images.dtype)
        return type(x)(images=filtered, labels=x.labels)
    arr = np.asarray(x)
    return np.clip(lpf_project(arr, degree), 0.0, 1.0).astype(arr.dtype)


def lfi(x):
    """DC component of n-length d-channel signals: (1/n) 11^T x, i.e. every
    column replaced by its mean."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected an n x d signal matrix, got shape {x.shape}")
    return np.broadcast_to(x.mean(axis=0, keepdims=True), x.shape).copy()


def hfi(x):
    """Orthogonal complement of lfi: x - (1/n) 11^T x."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected an n x d signal matrix, got shape {x.shape}")
    return x - x.mean(axis=0, keepdims=True)


def lfi_hfi_ratio(activation) -> float:
    """R = ||LFI||_2 / ||HFI||_2 of a B x C x H x W activation, with the
    channel axis as the signal axis (reshape to [B, C, H*W]), averaged over
    the batch. A zero high-frequency part yields the +inf sentinel."""
    act = np.asarray(activation, dtype=np.float64)
    if act.ndim != 4:
        raise ValueError(f"expected B x C x H x W, got shape {act.shape}")
    b, c, h, w = act.shape
    x = act.reshape(b, c, h * w)
    mean = x.mean(axis=1, keepdims=True)
    low = np.broadcast_to(mean, x.shape)
    high = x - mean
    low_norm = np.sqrt((low ** 2).sum(axis=(1, 2)))
    high_norm = np.sqrt((high ** 2).sum(axis=(1, 2)))
    ratios = np.where(high_norm > 0, low_norm / np.maximum(high_norm, 1e-300), np.inf)
    return float(ratios.mean())


def kernel_spectrum(w):
    """Magnitudes of the 1-D DFT of kernels flattened to [c_out, c_in*H*W].

    No shift: bins 0 and L-1 are the low-frequency ends, the middle is high
    frequency.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError(f"expected c_out x c_in x H x W kernels, got shape {w.shape}")
    rows = w.reshape(w.shape[0], -1)
    return np.abs(np.fft.fft(rows, axis=1))


def hf_energy_fraction(spectrum_row, band) -> float:
    """Fraction of squared-magnitude energy in the middle (high-frequency)
    bins, excluding `band` bins at each end."""
    row = np.asarray(spectrum_row, dtype=np.float64)
    n = row.shape[-1]
    if 2 * band >= n:
        raise ValueError(f"band {band} too wide for row of length {n}")
    energy = row ** 2
    total = energy.sum()
    if total == 0:
        return 0.0
    return float(energy[band:n - band].sum() / total)


def save_spectrum_map(spec: SpectrumMap, csv_path=None, pgm_path=None, provenance=None):
    extra = dict(provenance or {})
    extra["normalization"] = spec.normalization
    if csv_path is not None:
        h, w = spec.values.shape
        rows = ([f"{v:.9g}" for v in spec.values[r]] for r in range(h))
        fileio.write_csv(csv_path, [f"col{i}" for i in range(w)], rows, provenance=extra)
    if pgm_path is not None:
        fileio.write_pgm(pgm_path, spec.values, provenance=extra)
