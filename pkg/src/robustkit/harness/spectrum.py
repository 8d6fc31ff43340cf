"""Radially averaged power spectra and their log-log slope."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class SpectrumProfile:
    bins: np.ndarray  # integer radial frequency, strictly increasing from 0
    power: np.ndarray  # mean power in each bin
    slope: float
    intercept: float
    fit_range: tuple[int, int]  # [lo, hi) in bin units

    def to_dict(self) -> dict:
        return {
            "bins": self.bins.tolist(),
            "power": self.power.tolist(),
            "slope": self.slope,
            "intercept": self.intercept,
            "fit_range": list(self.fit_range),
        }


def radial_power_spectrum(image, fit_range: tuple[int, int] | None = None) -> SpectrumProfile:
    """Power of the 2-D DFT binned by rounded frequency magnitude.

    ``image`` is [R,R] or [C,R,R]; channel powers are averaged.  The slope is
    a least-squares fit of log power on log frequency over bins
    ``[2, R/2)`` by default, which leaves out DC and Nyquist.
    """
    a = image.detach().double().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image, float)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"square [R,R] or [C,R,R] input required, got shape {a.shape}")
    r = a.shape[-1]
    power = (np.abs(np.fft.fft2(a)) ** 2).mean(axis=0)
    fy = np.fft.fftfreq(r) * r
    radius = np.rint(np.hypot(fy[:, None], fy[None, :])).astype(int)
    counts = np.bincount(radius.ravel())
    sums = np.bincount(radius.ravel(), weights=power.ravel())
    keep = counts > 0
    bins = np.nonzero(keep)[0]
    mean_power = sums[keep] / counts[keep]

    lo, hi = fit_range or (2, r // 2)
    sel = (bins >= lo) & (bins < hi) & (mean_power > 0)
    if sel.sum() >= 2:
        slope, intercept = np.polyfit(np.log(bins[sel]), np.log(mean_power[sel]), 1)
    else:
        slope, intercept = float("nan"), float("nan")
    return SpectrumProfile(bins, mean_power, float(slope), float(intercept), (lo, hi))
