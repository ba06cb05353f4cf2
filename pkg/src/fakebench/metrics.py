"""Detection metrics (EER, recalls, AUC), fidelity metrics (PSNR, SSIM) and spectral energy.

Score orientation throughout: higher means more likely fake. A real sample is a false
positive when its score is >= the threshold, a fake one a false negative when its score
is < the threshold.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

PSNR_INF = float("inf")


def _scores(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} scores are empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} scores must be finite")
    return arr


def error_rates(real_scores, fake_scores, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, FNR) at each threshold, via sorted-search counting."""
    real = np.sort(_scores(real_scores, "real"))
    fake = np.sort(_scores(fake_scores, "fake"))
    t = np.asarray(thresholds, dtype=np.float64)
    fpr = (real.size - np.searchsorted(real, t, side="left")) / real.size
    fnr = np.searchsorted(fake, t, side="left") / fake.size
    return fpr, fnr


def compute_eer(real_scores, fake_scores) -> tuple[float, float]:
    """Equal error rate (fraction in [0, 1]) and the threshold where it is reached.

    Every distinct score is tried as a threshold (plus one above the maximum); the
    FPR - FNR curve is monotone along that sweep and the crossing is linearly
    interpolated between the two bracketing thresholds.
    """
    real = _scores(real_scores, "real")
    fake = _scores(fake_scores, "fake")
    thr = np.unique(np.concatenate([real, fake]))
    thr = np.append(thr, thr[-1] + 1.0)
    fpr, fnr = error_rates(real, fake, thr)
    diff = fpr - fnr
    k = int(np.argmax(diff <= 0))  # first threshold at or past the crossing
    if diff[k] == 0 or k == 0:
        return float(fpr[k]), float(thr[k])
    d0, d1 = diff[k - 1], diff[k]
    alpha = d0 / (d0 - d1)
    eer = fpr[k - 1] + alpha * (fpr[k] - fpr[k - 1])
    return float(eer), float(thr[k - 1] + alpha * (thr[k] - thr[k - 1]))


def compute_recalls(real_scores, fake_scores, threshold: float) -> tuple[float, float]:
    """(R_real, R_fake): fraction of real below ``threshold``, of fake at or above it."""
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    real = _scores(real_scores, "real")
    fake = _scores(fake_scores, "fake")
    return float(np.mean(real < threshold)), float(np.mean(fake >= threshold))


def compute_auc(real_scores, fake_scores) -> float:
    """Mann-Whitney U / (n_real * n_fake), ties counted as one half."""
    real = _scores(real_scores, "real")
    fake = _scores(fake_scores, "fake")
    ranks = rankdata(np.concatenate([fake, real]))
    u = ranks[: fake.size].sum() - fake.size * (fake.size + 1) / 2.0
    return float(u / (fake.size * real.size))


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB over all pixels and channels; inf when equal."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10.0 * np.log10(data_range**2 / mse))


def to_luma(image) -> np.ndarray:
    """ITU-R BT.601 luma of an RGB image (2-D input is returned as float)."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        return x
    return x[..., 0] * 0.299 + x[..., 1] * 0.587 + x[..., 2] * 0.114


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 255.0) -> float:
    """Mean SSIM over all fully-contained Gaussian windows of the luma channel."""
    a, b = _pair(a, b)
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < win_size:
        raise ValueError(f"image smaller than the {win_size}x{win_size} SSIM window")
    w = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    half = win_size // 2
    crop = (slice(half, x.shape[0] - half), slice(half, x.shape[1] - half))

    def filt(img):
        return ndimage.correlate(img, w, mode="constant")[crop]

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def radial_frequency(height: int, width: int) -> np.ndarray:
    """Radial frequency of each DFT bin, normalised so the Nyquist frequency is 1."""
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    return np.sqrt(fx**2 + fy**2) / 0.5


def power_spectrum(image) -> np.ndarray:
    """Per-bin DFT power averaged over channels, normalised by the pixel count."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    spec = np.abs(np.fft.fft2(x, axes=(0, 1))) ** 2
    return spec.mean(axis=2) / (x.shape[0] * x.shape[1])


def band_energy(image, mask: np.ndarray) -> float:
    return float(power_spectrum(image)[mask].sum())


def high_band_energy(image, cutoff: float = 0.75) -> float:
    """DFT energy above ``cutoff`` x Nyquist (radially)."""
    x = np.asarray(image)
    return band_energy(x, radial_frequency(x.shape[0], x.shape[1]) > cutoff)
