from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError


@dataclass(frozen=True)
class TimeSeries:
    """Uniformly sampled multichannel record: ``values[k, c]`` at ``times[k]``."""

    times: np.ndarray
    values: np.ndarray
    names: tuple = None

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != t.size:
            raise ValidationError(
                f"values shape {v.shape} does not match {t.size} time stamps")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError("time stamps must be strictly increasing")
        names = self.names
        if names is None:
            names = tuple(f"ch{c}" for c in range(v.shape[1]))
        names = tuple(str(n) for n in names)
        if len(names) != v.shape[1]:
            raise ValidationError("one name per channel is required")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "names", names)

    def __len__(self):
        return self.times.size

    @property
    def n_channels(self):
        return self.values.shape[1]

    @property
    def dt(self):
        if self.times.size < 2:
            raise ValidationError("sampling interval undefined for fewer than two samples")
        return float((self.times[-1] - self.times[0]) / (self.times.size - 1))

    def window(self, start, stop):
        return TimeSeries(self.times[start:stop], self.values[start:stop], self.names)

    def with_values(self, values, names=None):
        return TimeSeries(self.times, values, self.names if names is None else names)


# Inputs share the container; the alias documents intent at call sites.
Excitation = TimeSeries


def uniform_times(n, dt, t0=0.0):
    return t0 + dt * np.arange(n)


def stack_channels(values):
    """Channel-major stacking: all samples of channel 0, then channel 1, ..."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return values.copy()
    return values.T.reshape(-1)


def unstack_channels(vec, n_channels):
    vec = np.asarray(vec, dtype=float)
    return vec.reshape(n_channels, -1).T
