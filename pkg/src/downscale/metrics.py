"""Downscaling skill metrics and the radially averaged power spectrum.

Quantile RMSE selects pixels by the *truth* field: ``rmse_quantile(p, t, 68)``
is the RMSE over pixels whose truth value strictly exceeds the 68th
percentile of truth (linear interpolation). This is how the extremes-focused
"RMSE sigma_1 > 68%" style columns are computed here.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
QUANTILES = {"rmse_q68": 68.0, "rmse_q95": 95.0, "rmse_q997": 99.7}


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    return p, t


def r2(pred, truth) -> float:
    p, t = _pair(pred, truth)
    ss_tot = np.sum((t - t.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("r2 undefined for constant truth")
    return float(1.0 - np.sum((t - p) ** 2) / ss_tot)


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def rmse_quantile(pred, truth, q: float) -> float:
    if not 0 <= q < 100:
        raise ValueError("percentile must lie in [0, 100)")
    p, t = _pair(pred, truth)
    sel = t > np.percentile(t, q)
    if not sel.any():
        raise ValueError("no pixel exceeds the requested percentile (constant truth?)")
    return float(np.sqrt(np.mean((p[sel] - t[sel]) ** 2)))


def log1p_transform(values):
    v = np.asarray(values, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("log1p transform expects non-negative values")
    return np.log1p(v)


def _dynamic_range(t):
    rng = float(t.max() - t.min())
    return rng if rng > 0 else 1.0


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g


def _ssim_2d(x, y, data_range):
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()

    def filt(a):
        a = ndimage.correlate1d(a, g, axis=0, mode="constant")
        a = ndimage.correlate1d(a, g, axis=1, mode="constant")
        r = SSIM_WINDOW // 2
        return a[r:a.shape[0] - r, r:a.shape[1] - r]

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(pred, truth, data_range=None) -> float:
    """Gaussian-window SSIM averaged over all fully contained windows.

    ``[H, W]`` inputs give one value; ``[C, H, W]`` inputs the channel mean.
    The stabilisers use L = dynamic range of the truth (per channel) unless
    ``data_range`` is given.
    """
    p, t = _pair(pred, truth)
    if p.ndim == 2:
        p, t = p[None], t[None]
    vals = []
    for c in range(p.shape[0]):
        L = _dynamic_range(t[c]) if data_range is None else float(data_range)
        vals.append(_ssim_2d(p[c], t[c], L))
    return float(np.mean(vals))


def psnr(pred, truth) -> float:
    """10 log10(L^2 / MSE); +inf when the images are identical. Channel mean for 3-D input."""
    p, t = _pair(pred, truth)
    if p.ndim == 2:
        p, t = p[None], t[None]
    vals = []
    for c in range(p.shape[0]):
        mse = float(np.mean((p[c] - t[c]) ** 2))
        vals.append(math.inf if mse == 0 else 10.0 * math.log10(_dynamic_range(t[c]) ** 2 / mse))
    return float(np.mean(vals))


@dataclass
class Spectrum:
    k: np.ndarray
    power: np.ndarray
    counts: np.ndarray
    fit_slope: float

    @property
    def total_power(self) -> float:
        return float(np.sum(self.power * self.counts))

    def to_csv(self) -> str:
        rows = ["k,power"] + [f"{int(k)},{p:.10e}" for k, p in zip(self.k, self.power)]
        return "\n".join(rows) + "\n"


def radial_power_spectrum(field) -> Spectrum:
    """Bin-mean power of the demeaned field by integer radial wavenumber (cycles per domain).

    Power is normalised so that summing over every Fourier mode gives the
    field variance. ``fit_slope`` is the least-squares slope of log power
    against log k for 4 <= k <= min(H, W) / 4.
    """
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2 or min(f.shape) < 16:
        raise ValueError("radial_power_spectrum expects a 2-D field of at least 16x16")
    h, w = f.shape
    modes = np.abs(np.fft.fft2(f - f.mean())) ** 2 / (h * w) ** 2
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    kbin = np.rint(np.hypot(ky[:, None], kx[None, :])).astype(int)
    counts = np.bincount(kbin.ravel())
    sums = np.bincount(kbin.ravel(), weights=modes.ravel())
    ks = np.nonzero(counts)[0]
    power = sums[ks] / counts[ks]
    band = (ks >= 4) & (ks <= min(h, w) // 4) & (power > 0)
    slope = float("nan")
    if band.sum() >= 2:
        slope = float(np.polyfit(np.log(ks[band]), np.log(power[band]), 1)[0])
    return Spectrum(ks.astype(float), power, counts[ks], slope)


@dataclass
class MetricsReport:
    r2: float
    rmse: float
    rmse_q68: float
    rmse_q95: float
    rmse_q997: float
    ssim: float
    psnr: float
    transform: str
    n_pixels: int

    def to_json(self) -> str:
        doc = asdict(self)
        if math.isinf(doc["psnr"]):
            doc["psnr"] = "inf"
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        if doc["psnr"] == "inf":
            doc["psnr"] = math.inf
        return cls(**doc)


def evaluate(pred_grid, truth_grid, transform: str = "none") -> MetricsReport:
    """All metrics over every channel and pixel, after the optional log1p transform.

    Accepts :class:`~downscale.gridio.Grid` objects or ``[C, H, W]`` arrays.
    """
    p = np.asarray(getattr(pred_grid, "data", pred_grid), dtype=np.float64)
    t = np.asarray(getattr(truth_grid, "data", truth_grid), dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"geometry mismatch: {p.shape} vs {t.shape}")
    if transform == "log1p":
        p, t = log1p_transform(np.maximum(p, 0.0)), log1p_transform(t)
    elif transform != "none":
        raise ValueError(f"unknown transform {transform!r}")
    if p.ndim == 2:
        p, t = p[None], t[None]
    quant = {name: rmse_quantile(p, t, q) for name, q in QUANTILES.items()}
    return MetricsReport(r2=r2(p, t), rmse=rmse(p, t), ssim=ssim(p, t), psnr=psnr(p, t),
                         transform=transform, n_pixels=int(t.size), **quant)
