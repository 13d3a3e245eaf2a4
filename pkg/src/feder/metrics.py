"""Learning metrics over weight spectra.

Effective rank is the Shannon entropy (nats) of the l1-normalized singular
values: a layer that maps through many comparably strong directions scores
high, a near rank-1 layer scores near zero. Stable rank and condition
number are the standard spectral definitions. ``denoise_spectrum`` can
optionally shrink a spectrum with the global analytic VBMF threshold to
separate learned structure from initialization noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import optimize

from .linalg import Matrix, SingularSpectrum, Tensor4, svd_values, unfold


class ZeroSpectrumError(ValueError):
    """All singular values are zero; spectrum ratios are undefined."""


def normalize_spectrum(s: SingularSpectrum) -> np.ndarray:
    """sigma / sum(sigma): a probability vector over spectral directions."""
    total = float(np.sum(s.sigma))
    if total <= 0.0:
        raise ZeroSpectrumError("cannot normalize an all-zero spectrum")
    return s.sigma / total


def effective_rank(s: SingularSpectrum) -> float:
    """Shannon entropy of the normalized spectrum in nats, with 0 ln 0 = 0.

    Lies in [0, ln n'] for n' nonzero singular values and is invariant
    under positive rescaling of the spectrum.
    """
    p = normalize_spectrum(s)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def model_effective_rank(layer_ers: Iterable[float], d: int) -> float:
    """ln( sqrt(sum_i er_i^2) / d ): one scalar for a d-layer model."""
    ers = np.asarray(list(layer_ers), dtype=np.float64)
    if d < 1 or ers.size != d:
        raise ValueError(f"expected {d} layer values, got {ers.size}")
    if np.any(ers < 0):
        raise ValueError("layer effective ranks must be non-negative")
    rss = float(np.sqrt(np.sum(ers * ers)))
    if rss == 0.0:
        raise ZeroSpectrumError("model effective rank diverges to -inf on all-zero input")
    return math.log(rss / d)


def stable_rank(s: SingularSpectrum) -> float:
    """sum(sigma^2) / sigma_max^2: a smooth lower bound on matrix rank."""
    sig = s.sigma
    if sig[0] <= 0:
        raise ZeroSpectrumError("stable rank undefined for an all-zero spectrum")
    return float(np.sum(sig * sig) / (sig[0] * sig[0]))


def condition_number(s: SingularSpectrum) -> float:
    """sigma_max / sigma_min, or inf once any singular value was clamped to 0."""
    sig = s.sigma
    if sig[0] <= 0:
        raise ZeroSpectrumError("condition number undefined for an all-zero spectrum")
    smallest = float(sig[-1])
    if smallest == 0.0:
        return math.inf
    return float(sig[0]) / smallest


def denoise_spectrum(m: Matrix, noise_mode: str = "off") -> SingularSpectrum:
    """Spectrum of ``m``, optionally shrunk by the analytic VBMF threshold.

    ``off`` is exactly ``svd_values(m)``. ``analytic`` estimates the noise
    variance by minimizing the variational free energy, zeroes singular
    values below the detectability threshold and shrinks the survivors.
    Output entries never exceed the raw ones and the nonzero count never
    grows; with fewer than two positive singular values there is nothing to
    estimate noise from and the raw spectrum is returned unchanged.
    """
    if noise_mode not in ("off", "analytic"):
        raise ValueError(f"noise_mode must be 'off' or 'analytic', got {noise_mode!r}")
    raw = svd_values(m)
    if noise_mode == "off":
        return raw
    return _analytic_vbmf_spectrum(raw, m.rows, m.cols)


def _analytic_vbmf_spectrum(raw: SingularSpectrum, rows: int, cols: int) -> SingularSpectrum:
    s = raw.sigma
    positive = s[s > 0]
    if positive.size <= 1:
        return SingularSpectrum(s.copy())
    smaller, larger = min(rows, cols), max(rows, cols)
    alpha = smaller / larger
    tau_bar = 2.5129 * math.sqrt(alpha)
    x_bar = (1.0 + tau_bar) * (1.0 + alpha / tau_bar)
    sigma2 = _noise_variance(positive, smaller, larger, alpha, x_bar)
    threshold = math.sqrt(larger * sigma2 * x_bar)

    out = np.zeros_like(s)
    keep = s > threshold
    si = s[keep]
    a = 1.0 - (smaller + larger) * sigma2 / si**2
    disc = np.maximum(a * a - 4.0 * smaller * larger * sigma2**2 / si**4, 0.0)
    out[keep] = 0.5 * si * (a + np.sqrt(disc))
    np.minimum(out, s, out=out)  # shrinkage contract even under fp noise
    return SingularSpectrum(out)


def _noise_variance(s: np.ndarray, smaller: int, larger: int,
                    alpha: float, x_bar: float) -> float:
    # Bracket sigma^2 between what the spectrum tail and the total energy
    # allow, then minimize the free energy inside the bracket.
    upper = float(np.sum(s * s)) / (smaller * larger)
    signal_cut = int(min(math.ceil(smaller / (1.0 + alpha)) - 1, s.size)) - 1
    tail = s[min(max(signal_cut, -1) + 1, s.size - 1):]
    lower = max(float(tail[0] ** 2) / (larger * x_bar),
                float(np.mean(tail * tail)) / larger)
    if not lower < upper:
        return upper
    res = optimize.minimize_scalar(
        _free_energy, bounds=(lower, upper), method="bounded",
        args=(s, smaller, alpha, larger, x_bar))
    return float(res.x)


def _free_energy(sigma2: float, s: np.ndarray, smaller: int, alpha: float,
                 larger: int, x_bar: float) -> float:
    x = s * s / (larger * sigma2)
    big = x[x > x_bar]
    small = x[x <= x_bar]
    root = np.sqrt(np.maximum((big - (1.0 + alpha)) ** 2 - 4.0 * alpha, 0.0))
    tau = 0.5 * (big - (1.0 + alpha) + root)
    value = float(np.sum(small - np.log(small)))
    value += float(np.sum(big - tau))
    value += float(np.sum(np.log((tau + 1.0) / big)))
    value += alpha * float(np.sum(np.log(tau / alpha + 1.0)))
    value += (smaller - s.size) * math.log(sigma2)
    return value


def layer_effective_rank(tensor, unfold_mode: int = 4, noise_mode: str = "off"):
    """Effective rank of one layer's weights, or None if it carries none.

    4-D kernels are unfolded along ``unfold_mode`` first; 2-D weights are
    used as-is; 1-D tensors (biases, scales) carry no effective rank. An
    all-zero layer maps through zero directions, so it scores 0.0 here
    rather than raising.
    """
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim == 4:
        m = unfold(Tensor4(arr), unfold_mode)
    elif arr.ndim == 2:
        m = Matrix(arr)
    else:
        return None
    spectrum = denoise_spectrum(m, noise_mode)
    if float(spectrum.sigma[0]) == 0.0:
        return 0.0
    return effective_rank(spectrum)


@dataclass
class MetricReport:
    """Per-layer spectral metrics plus the model-level scalar.

    Stable rank and condition number are reported only for layers with a
    nonzero spectrum; all-zero layers appear with effective rank 0.
    """
    per_layer_effective_rank: dict[str, float]
    model_q_er: float
    per_layer_stable_rank: dict[str, float]
    per_layer_condition_number: dict[str, float]


def metric_report(named_tensors: Iterable[tuple[str, np.ndarray]],
                  unfold_mode: int = 4, noise_mode: str = "off") -> MetricReport:
    """Spectral metrics for every rank-bearing layer of a model."""
    ers: dict[str, float] = {}
    stable: dict[str, float] = {}
    cond: dict[str, float] = {}
    for name, tensor in named_tensors:
        arr = np.asarray(tensor, dtype=np.float64)
        if arr.ndim == 4:
            m = unfold(Tensor4(arr), unfold_mode)
        elif arr.ndim == 2:
            m = Matrix(arr)
        else:
            continue
        spectrum = denoise_spectrum(m, noise_mode)
        if float(spectrum.sigma[0]) == 0.0:
            ers[name] = 0.0
            continue
        ers[name] = effective_rank(spectrum)
        stable[name] = stable_rank(spectrum)
        cond[name] = condition_number(spectrum)
    if not ers:
        raise ValueError("model has no effective-rank-bearing layer")
    q_er = model_effective_rank(list(ers.values()), len(ers))
    return MetricReport(ers, q_er, stable, cond)
