"""Multifractal analysis over sliding windows.

MF-DFA with polynomial detrending: profile the series, detrend dyadic
segments taken from both ends, form moment-averaged fluctuation functions
F_q(s) and read the generalized Hurst exponent h(q) off log-log fits.
H = h(2) and the spectrum width is h(q_min) - h(q_max).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .traffic import TimeSeries

__all__ = [
    "WindowConfig",
    "MfdfaConfig",
    "HurstSpectrum",
    "Window",
    "sliding_windows",
    "fit_loglog",
    "mfdfa",
    "spectrum_summary",
    "analyze_series",
    "DEFAULT_Q_GRID",
]

DEFAULT_Q_GRID = (-4.0, -3.0, -2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 3.0, 4.0)


@dataclass(frozen=True)
class WindowConfig:
    """Sliding analysis window: length and shift, both in samples."""

    length: int
    shift: int

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError(f"window length must be > 0, got {self.length}")
        if not 0 < self.shift <= self.length:
            raise ValueError(
                f"window shift must satisfy 0 < shift <= length, got {self.shift}"
            )


@dataclass(frozen=True)
class MfdfaConfig:
    """Estimator parameters: moment grid, segment sizes, detrending order."""

    q_grid: tuple[float, ...] = DEFAULT_Q_GRID
    scale_grid: tuple[int, ...] = ()
    detrend_order: int = 1

    def __post_init__(self):
        q = tuple(float(v) for v in self.q_grid)
        if len(q) < 2:
            raise ValueError("q_grid needs at least two points")
        if any(v == 0.0 for v in q):
            raise ValueError("q_grid must exclude 0")
        if any(b <= a for a, b in zip(q, q[1:])):
            raise ValueError("q_grid must be strictly increasing")
        if 2.0 not in q:
            raise ValueError("q_grid must contain q = 2 (H = h(2))")
        if self.detrend_order < 1:
            raise ValueError(f"detrend_order must be >= 1, got {self.detrend_order}")
        s = tuple(int(v) for v in self.scale_grid)
        if s:
            if any(b <= a for a, b in zip(s, s[1:])):
                raise ValueError("scale_grid must be strictly increasing")
            if s[0] < self.detrend_order + 2:
                raise ValueError(
                    f"scales must be >= detrend_order + 2 = {self.detrend_order + 2}"
                )
        object.__setattr__(self, "q_grid", q)
        object.__setattr__(self, "scale_grid", s)

    @classmethod
    def for_length(cls, n: int, q_grid: Sequence[float] = DEFAULT_Q_GRID,
                   n_scales: int = 16, min_scale: int = 16,
                   detrend_order: int = 1) -> "MfdfaConfig":
        """Default grid: n_scales log-spaced segment sizes from min_scale to n/4."""
        max_scale = n // 4
        if max_scale < min_scale:
            raise ValueError(f"series too short for MF-DFA: n={n}, need n >= {4 * min_scale}")
        scales = np.unique(np.round(np.geomspace(min_scale, max_scale, n_scales)).astype(int))
        return cls(q_grid=tuple(q_grid), scale_grid=tuple(int(s) for s in scales),
                   detrend_order=detrend_order)


@dataclass(frozen=True)
class HurstSpectrum:
    """Estimated h(q) over a q-grid with H = h(2) and width delta_h."""

    q_grid: tuple[float, ...]
    h: tuple[float, ...]
    fit_r2: tuple[float, ...]
    H: float
    delta_h: float

    def __post_init__(self):
        q = tuple(float(v) for v in self.q_grid)
        h = tuple(float(v) for v in self.h)
        r2 = tuple(float(v) for v in self.fit_r2)
        if not len(q) == len(h) == len(r2):
            raise ValueError("q_grid, h and fit_r2 must have equal length")
        if any(b <= a for a, b in zip(q, q[1:])):
            raise ValueError("q_grid must be strictly increasing")
        if 2.0 not in q:
            raise ValueError("q_grid must contain q = 2")
        if self.H != h[q.index(2.0)]:
            raise ValueError("H must equal the h entry at q = 2")
        if self.delta_h != h[0] - h[-1]:
            raise ValueError("delta_h must equal h(q_min) - h(q_max)")
        object.__setattr__(self, "q_grid", q)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "fit_r2", r2)

    @classmethod
    def from_fit(cls, q_grid: Sequence[float], h: Sequence[float],
                 fit_r2: Sequence[float]) -> "HurstSpectrum":
        q = tuple(float(v) for v in q_grid)
        hv = tuple(float(v) for v in h)
        return cls(q_grid=q, h=hv, fit_r2=tuple(float(v) for v in fit_r2),
                   H=hv[q.index(2.0)], delta_h=hv[0] - hv[-1])

    def low_confidence(self, threshold: float = 0.95) -> list[float]:
        """q values whose log-log fit fell below the r2 threshold (diagnostic only)."""
        return [q for q, r2 in zip(self.q_grid, self.fit_r2) if r2 < threshold]


class Window(NamedTuple):
    start: int
    series: TimeSeries


def sliding_windows(series: TimeSeries, cfg: WindowConfig) -> list[Window]:
    """Windows of cfg.length samples starting at 0, shift, 2*shift, ..."""
    n = len(series)
    if n < cfg.length:
        raise ValueError(f"series length {n} is shorter than window length {cfg.length}")
    count = (n - cfg.length) // cfg.shift + 1
    return [
        Window(start, TimeSeries(series.values[start:start + cfg.length], series.dt))
        for start in (k * cfg.shift for k in range(count))
    ]


def fit_loglog(points: Iterable[tuple[float, float]]) -> tuple[float, float, float]:
    """OLS fit of ln F against ln s; returns (slope, intercept, r2)."""
    pts = list(points)
    if len(pts) < 2:
        raise ValueError("fit_loglog needs at least 2 points")
    s = np.array([p[0] for p in pts], dtype=float)
    f = np.array([p[1] for p in pts], dtype=float)
    if (s <= 0).any() or (f <= 0).any():
        raise ValueError("fit_loglog requires strictly positive coordinates")
    ls, lf = np.log(s), np.log(f)
    slope, intercept = np.polyfit(ls, lf, 1)
    resid = lf - (slope * ls + intercept)
    ss_res = float(resid @ resid)
    centered = lf - lf.mean()
    ss_tot = float(centered @ centered)
    if ss_tot <= 1e-24:
        r2 = 1.0 if ss_res <= 1e-18 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), float(r2)


def _segment_fluctuations(profile: np.ndarray, scale: int, order: int) -> np.ndarray:
    """Mean-square residual of an order-m polynomial fit, per segment.

    Segments of length ``scale`` are taken from the front and, to use the
    trailing samples, again from the back: 2*floor(N/s) in total.
    """
    n = profile.size
    nseg = n // scale
    fwd = profile[:nseg * scale].reshape(nseg, scale)
    bwd = profile[n - nseg * scale:].reshape(nseg, scale)
    segments = np.concatenate([fwd, bwd], axis=0)

    t = np.arange(scale, dtype=float)
    vander = np.vander(t, order + 1)
    coef, *_ = np.linalg.lstsq(vander, segments.T, rcond=None)
    resid = segments.T - vander @ coef
    return np.mean(resid * resid, axis=0)


def mfdfa(series: TimeSeries, cfg: MfdfaConfig | None = None) -> HurstSpectrum:
    """MF-DFA generalized Hurst spectrum of a series.

    Profile the mean-centered series, detrend segments at every scale with
    an order-m polynomial, average the q/2-th moments of the squared
    residuals and fit F_q(s) ~ s^h(q) in log-log coordinates.
    """
    x = np.asarray(series.values, dtype=float)
    n = x.size
    if cfg is None:
        cfg = MfdfaConfig.for_length(n)
    if not cfg.scale_grid:
        cfg = MfdfaConfig.for_length(n, q_grid=cfg.q_grid, detrend_order=cfg.detrend_order)
    if np.ptp(x) == 0.0:
        raise ValueError("constant series has no fluctuations to analyze")
    if cfg.scale_grid[-1] > n // 4:
        raise ValueError(
            f"max scale {cfg.scale_grid[-1]} exceeds series length / 4 = {n // 4}"
        )

    profile = np.cumsum(x - x.mean())
    q = np.array(cfg.q_grid)
    log_fq = np.empty((q.size, len(cfg.scale_grid)))
    for si, s in enumerate(cfg.scale_grid):
        f2 = _segment_fluctuations(profile, s, cfg.detrend_order)
        log_f2 = np.log(np.maximum(f2, 1e-300))
        # F_q(s) = (mean of (F^2)^(q/2))^(1/q), evaluated in log space
        moments = logsumexp(np.outer(0.5 * q, log_f2), axis=1) - math.log(f2.size)
        log_fq[:, si] = moments / q

    scales = np.array(cfg.scale_grid, dtype=float)
    h = np.empty(q.size)
    r2 = np.empty(q.size)
    for qi in range(q.size):
        h[qi], _, r2[qi] = fit_loglog(zip(scales, np.exp(log_fq[qi])))
    return HurstSpectrum.from_fit(cfg.q_grid, h, r2)


def spectrum_summary(spec: HurstSpectrum) -> tuple[float, float]:
    """The (H, delta_h) pair exactly as stored on the spectrum."""
    if 2.0 not in spec.q_grid:
        raise ValueError("spectrum q_grid must contain q = 2")
    return spec.H, spec.delta_h


def analyze_series(series: TimeSeries, window: WindowConfig,
                   cfg: MfdfaConfig | None = None) -> list[tuple[int, HurstSpectrum]]:
    """Per-window spectra over a sliding analysis: [(window_start, spectrum), ...]."""
    out = []
    for win in sliding_windows(series, window):
        wcfg = cfg if cfg is not None and cfg.scale_grid else MfdfaConfig.for_length(
            window.length,
            q_grid=cfg.q_grid if cfg is not None else DEFAULT_Q_GRID,
            detrend_order=cfg.detrend_order if cfg is not None else 1,
        )
        out.append((win.start, mfdfa(win.series, wcfg)))
    return out
