"""Kernel-order selection from residual spectra and a BIC score.

Scores follow ``log L - (N_delta / 2) log(n N_o N_D)`` so that the largest
score is preferred.  Each candidate order is fitted on at most the first
three partitions.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .inference import FitOptions, initial_delta, run_pipeline
from .spectral import (MIN_SAMPLES, SpectrumEstimate, peak_fwhm, residual_psd,
                       segment_length, suggest_modes)

__all__ = ["MAX_SCORING_PARTITIONS", "OrderScore", "OrderSelection", "bic_penalty",
           "bic_score", "score_order", "select_order", "residual_psd", "suggest_modes",
           "peak_fwhm", "segment_length", "SpectrumEstimate", "MIN_SAMPLES"]

MAX_SCORING_PARTITIONS = 3


@dataclass(frozen=True)
class OrderScore:
    m: int
    score: float
    log_likelihood: float
    n_delta: int
    n_samples: int
    omega: tuple
    converged: bool


@dataclass(frozen=True)
class OrderSelection:
    scores: tuple

    @property
    def best(self):
        # ties go to the smaller order
        return max(self.scores, key=lambda s: (s.score, -s.m))

    @property
    def m(self):
        return self.best.m

    def table(self):
        lines = ["# BIC = log L - (N_delta/2) log(n N_o N_D); larger is better",
                 f"{'m':>3} {'score':>14} {'logL':>14} {'N_delta':>8}  omega (rad/s)"]
        for s in self.scores:
            w = ", ".join(f"{v:.3f}" for v in s.omega)
            mark = "  *" if s.m == self.m else ""
            lines.append(f"{s.m:>3} {s.score:>14.4f} {s.log_likelihood:>14.4f} "
                         f"{s.n_delta:>8d}  [{w}]{mark}")
        return "\n".join(lines)


def bic_penalty(n_delta, n_samples):
    return 0.5 * n_delta * np.log(n_samples)


def score_order(dataset, system, m, opts=None, delta0=None):
    """Reduced-budget fit at order ``m`` and its BIC score."""
    if m < 1:
        raise ValidationError("kernel order m must be >= 1")
    parts = list(dataset)[:MAX_SCORING_PARTITIONS]
    if not parts:
        raise ValidationError("dataset has no partitions")
    opts = opts or FitOptions()
    if delta0 is None:
        delta0 = initial_delta(parts, system, m)
    elif delta0.m != m:
        raise ValidationError(f"delta0 has m={delta0.m}, expected {m}")
    result = run_pipeline(parts, system, delta0, opts, m=m, n_samples=1)
    log_l = result.total_log_likelihood()
    n_total = sum(p.n * p.y.n_channels for p in parts)
    n_delta = delta0.n_delta
    score = log_l - bic_penalty(n_delta, n_total)
    omega = tuple(float(w) for w in result.deltas[-1].phi.omega)
    return OrderScore(int(m), float(score), log_l, n_delta, n_total, omega, result.converged)


def bic_score(dataset, system, m, opts=None, delta0=None):
    return score_order(dataset, system, m, opts, delta0).score


def select_order(dataset, system, m_max=4, opts=None, orders=None):
    """Score every order in ``orders`` (default ``1..m_max``) and pick the maximum."""
    orders = range(1, m_max + 1) if orders is None else orders
    orders = [int(m) for m in orders]
    if not orders:
        raise ValidationError("no kernel orders to score")
    return OrderSelection(tuple(score_order(dataset, system, m, opts) for m in orders))
