"""Averaged-periodogram spectra of model residuals and peak picking."""

from dataclasses import dataclass

import numpy as np
from scipy import integrate, signal

from .exceptions import ValidationError

MIN_SAMPLES = 256


@dataclass(frozen=True)
class SpectrumEstimate:
    frequencies: np.ndarray  # Hz, ascending from 0
    power: np.ndarray        # one-sided density, units^2 / Hz
    segment_length: int
    averages: int

    @property
    def df(self):
        return float(self.frequencies[1] - self.frequencies[0])

    def total_power(self):
        return float(integrate.trapezoid(self.power, self.frequencies))


def segment_length(n):
    return int(2 ** np.ceil(np.log2(n / 8.0)))


def residual_psd(residuals, dt, nperseg=None):
    """Welch estimate (Hann taper, 50% overlap) averaged over channels."""
    values = residuals.values if hasattr(residuals, "values") else np.asarray(residuals, float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    n = values.shape[0]
    if n < MIN_SAMPLES:
        raise ValidationError(f"residual PSD needs at least {MIN_SAMPLES} samples, got {n}")
    seg = int(nperseg or segment_length(n))
    seg = min(seg, n)
    freqs, p = signal.welch(values, fs=1.0 / dt, window="hann", nperseg=seg,
                            noverlap=seg // 2, detrend="constant", scaling="density",
                            axis=0)
    averages = 1 + (n - seg) // (seg - seg // 2)
    return SpectrumEstimate(freqs, p.mean(axis=1), seg, averages)


def _peaks(spec, threshold=3.0, min_separation=2):
    p = spec.power
    height = threshold * np.median(p)
    idx, props = signal.find_peaks(p, height=height, distance=min_separation, prominence=0.0)
    return idx, props["prominences"]


def suggest_modes(spec, m_max, threshold=3.0, min_separation=2):
    """Candidate kernel frequencies (rad/s), most prominent first.

    Local maxima must exceed ``threshold`` times the median power and be at
    least ``min_separation`` bins apart.
    """
    if m_max < 1:
        raise ValidationError("m_max must be >= 1")
    idx, prom = _peaks(spec, threshold, min_separation)
    order = np.argsort(-prom, kind="stable")[:m_max]
    return [float(2.0 * np.pi * spec.frequencies[i]) for i in idx[order]]


def peak_fwhm(spec, omega):
    """Full width at half maximum (rad/s) of the spectral peak nearest ``omega``."""
    f = omega / (2.0 * np.pi)
    i = int(np.clip(np.rint(f / spec.df), 1, spec.power.size - 2))
    # largest bin near omega, so that estimator noise does not stop the search early
    reach = max(3, int(np.ceil(0.05 * i)))
    lo, hi = max(1, i - reach), min(spec.power.size - 1, i + reach + 1)
    i = lo + int(np.argmax(spec.power[lo:hi]))
    widths = signal.peak_widths(spec.power, [i], rel_height=0.5)[0]
    return float(max(widths[0], 1.0) * spec.df * 2.0 * np.pi)
