"""Feedback load balancing driven by multifractal traffic analysis.

Per analysis window: estimate the Hurst spectrum of the input traffic,
measure per-class intensities and per-server utilization, size each class
with a self-similar effective-bandwidth formula widened by the spectrum
width, split flows across servers in proportion to forecast headroom, and
correct for under-forecast intensities (over-forecasts are never scaled
back down).  Baseline routers (round robin, least loaded, weighted random)
share the dispatcher interface for comparison runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .mfa import HurstSpectrum, MfdfaConfig, mfdfa
from .qsim import ServerConfig, ServerState, TraceEvent
from .traffic import Packet, TimeSeries

__all__ = [
    "TraceWindow",
    "FlowStats",
    "ResourceDemand",
    "FlowAssignment",
    "Forecast",
    "BalancerConfig",
    "BalancerState",
    "BalanceResult",
    "collect_stats",
    "effective_bandwidth",
    "forecast_util",
    "compute_assignment",
    "correct_underestimate",
    "balance_step",
    "AssignmentRouter",
    "BaselineRouter",
    "BASELINE_KINDS",
]

BASELINE_KINDS = ("round_robin", "least_loaded", "weighted_random")


@dataclass(frozen=True)
class TraceWindow:
    """Observed slice of one analysis window: [t0, t1) at slot resolution dt."""

    t0: float
    t1: float
    dt: float
    arrivals: tuple[Packet, ...]
    events: tuple[TraceEvent, ...]

    @property
    def span(self) -> float:
        return self.t1 - self.t0


@dataclass
class FlowStats:
    """Per-class measured intensity, mean work rate and variance coefficient."""

    lambda_hat: dict[int, float]
    mean_rate: dict[int, float]        # m_i, work-units/second
    var_coeff: dict[int, float]        # a_i, work-units * seconds
    util_history: dict[int, list[tuple[float, tuple[float, float, float]]]] = field(default_factory=dict)


@dataclass(frozen=True)
class ResourceDemand:
    """Provisioned service capacity for one class."""

    class_id: int
    hurst: float
    delta_h: float
    bandwidth: float     # C, work-units/second
    safety: float = 1.0  # multifractal widening factor, >= 1

    def __post_init__(self):
        if self.safety < 1.0:
            raise ValueError(f"safety factor must be >= 1, got {self.safety}")


@dataclass(frozen=True)
class FlowAssignment:
    """Row-stochastic split: fraction of class-i packets sent to server j."""

    classes: tuple[int, ...]
    server_ids: tuple[int, ...]
    weights: np.ndarray   # shape (len(classes), len(server_ids))

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.classes), len(self.server_ids)):
            raise ValueError("weight matrix shape does not match classes x servers")
        if (w < 0).any():
            raise ValueError("assignment weights must be nonnegative")
        if np.abs(w.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("every assignment row must sum to 1")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def weights_for(self, class_id: int) -> dict[int, float]:
        row = self.weights[self.classes.index(class_id)]
        return {sid: float(v) for sid, v in zip(self.server_ids, row)}

    def sample(self, class_id: int, rng: np.random.Generator) -> int:
        try:
            row = self.weights[self.classes.index(class_id)]
        except ValueError:
            row = np.full(len(self.server_ids), 1.0 / len(self.server_ids))
        u = rng.random()
        acc = 0.0
        for sid, w in zip(self.server_ids, row):
            acc += w
            if u < acc:
                return sid
        return self.server_ids[-1]

    @classmethod
    def uniform(cls, classes: Sequence[int], server_ids: Sequence[int]) -> "FlowAssignment":
        n, m = len(classes), len(server_ids)
        return cls(tuple(classes), tuple(server_ids), np.full((n, m), 1.0 / m))


@dataclass(frozen=True)
class Forecast:
    """Exponentially smoothed next-window utilization for one server."""

    utilization: tuple[float, float, float]  # clamped to [0, 1]
    level: tuple[float, float, float]        # raw smoothing state


def collect_stats(window: TraceWindow, classes: Sequence[int],
                  window_span: float) -> FlowStats:
    """Measured per-class arrival intensity, admitted work rate and the
    variance coefficient of per-slot admitted work at slot resolution dt."""
    if not window_span > 0:
        raise ValueError(f"window_span must be > 0, got {window_span}")
    lost_full = {ev.packet_id for ev in window.events if ev.kind == "loss_full"}
    n_slots = max(1, int(round(window.span / window.dt)))
    lam: dict[int, float] = {}
    mean_rate: dict[int, float] = {}
    var_coeff: dict[int, float] = {}
    for cls in classes:
        pkts = [p for p in window.arrivals if p.class_id == cls]
        lam[cls] = len(pkts) / window_span
        admitted = [p for p in pkts if p.id not in lost_full]
        work = sum(p.size for p in admitted)
        m = work / window_span
        mean_rate[cls] = m
        if m > 0 and n_slots > 1:
            slots = np.zeros(n_slots)
            for p in admitted:
                k = min(int((p.arrival_time - window.t0) / window.dt), n_slots - 1)
                slots[k] += p.size
            var_coeff[cls] = float(slots.var(ddof=1) / m)
        else:
            var_coeff[cls] = 0.0
    return FlowStats(lam, mean_rate, var_coeff)


def effective_bandwidth(m: float, a: float, hurst: float, x: float, eps: float,
                        delta_h: float | None = None, gamma: float = 0.5) -> float:
    """Service capacity for a self-similar source to hold buffer overflow
    below eps, with an optional multifractal widening.

    C = m + (kappa(H) sqrt(-2 ln eps))^(1/H) * a^(1/2H) * m^(1/2H) * x^(-(1-H)/H)
    with kappa(H) = H^H (1-H)^(1-H); multiplied by 1 + gamma*max(0, delta_h)
    when a spectrum width is supplied.
    """
    if not m > 0:
        raise ValueError(f"mean rate m must be > 0, got {m}")
    if not a > 0:
        raise ValueError(f"variance coefficient a must be > 0, got {a}")
    if not 0.0 < hurst < 1.0:
        raise ValueError(f"hurst must lie in (0, 1), got {hurst}")
    if not x > 0:
        raise ValueError(f"buffer size x must be > 0, got {x}")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"loss target eps must lie in (0, 1), got {eps}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    kappa = hurst ** hurst * (1.0 - hurst) ** (1.0 - hurst)
    burst = ((kappa * math.sqrt(-2.0 * math.log(eps))) ** (1.0 / hurst)
             * a ** (0.5 / hurst)
             * m ** (0.5 / hurst)
             * x ** (-(1.0 - hurst) / hurst))
    c = m + burst
    if delta_h is not None:
        c *= 1.0 + gamma * max(0.0, delta_h)
    return c


def forecast_util(history: Sequence[tuple[float, tuple[float, float, float]]],
                  alpha: float) -> Forecast:
    """Component-wise exponential smoothing of a utilization history;
    the forecast is the last smoothing level, clamped to [0, 1]."""
    if not history:
        raise ValueError("forecast_util needs a nonempty history")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    level = np.array(history[0][1], dtype=float)
    for _, u in history[1:]:
        level = alpha * np.array(u, dtype=float) + (1.0 - alpha) * level
    clamped = tuple(float(min(1.0, max(0.0, v))) for v in level)
    return Forecast(utilization=clamped, level=tuple(float(v) for v in level))


def compute_assignment(demands: Sequence[ResourceDemand],
                       forecasts: Mapping[int, Forecast],
                       servers: Sequence[ServerConfig]) -> FlowAssignment:
    """Headroom-proportional split: weight of server j for class i is
    max(0, 1 - max-component forecast utilization) times the server's work
    capacity for that class, normalized per class; uniform fallback when
    every server is saturated."""
    if not servers:
        raise ValueError("need at least one server")
    if not demands:
        raise ValueError("need at least one demand")
    server_ids = tuple(sorted(s.id for s in servers))
    by_id = {s.id: s for s in servers}
    classes = tuple(d.class_id for d in demands)
    w = np.zeros((len(demands), len(server_ids)))
    for i, d in enumerate(demands):
        for j, sid in enumerate(server_ids):
            f = forecasts.get(sid)
            peak = max(f.utilization) if f is not None else 0.0
            w[i, j] = max(0.0, 1.0 - peak) * by_id[sid].work_capacity(d.class_id)
        total = w[i].sum()
        if total > 0:
            w[i] /= total
        else:
            w[i] = 1.0 / len(server_ids)
    return FlowAssignment(classes, server_ids, w)


def correct_underestimate(assignment: FlowAssignment,
                          demands: Sequence[ResourceDemand],
                          observed: FlowStats,
                          forecast_intensities: Mapping[int, float],
                          forecasts: Mapping[int, Forecast],
                          servers: Sequence[ServerConfig],
                          ) -> tuple[FlowAssignment, dict[int, float], list[ResourceDemand]]:
    """Scale up classes whose observed intensity beat the forecast.

    f_i = max(1, observed / forecast): only under-forecasts trigger a
    correction, over-forecasts keep factor 1.  Demands are scaled by f_i
    and the assignment recomputed from the scaled demands.
    """
    factors: dict[int, float] = {}
    scaled: list[ResourceDemand] = []
    for d in demands:
        lam_hat = observed.lambda_hat.get(d.class_id, 0.0)
        lam_fc = forecast_intensities.get(d.class_id, 0.0)
        if lam_hat > 0 and lam_fc > 0:
            f = max(1.0, lam_hat / lam_fc)
        else:
            f = 1.0
        factors[d.class_id] = f
        scaled.append(replace(d, bandwidth=d.bandwidth * f) if f != 1.0 else d)
    if all(f == 1.0 for f in factors.values()):
        return assignment, factors, scaled
    return compute_assignment(scaled, forecasts, servers), factors, scaled


@dataclass
class BalancerConfig:
    alpha: float = 0.3        # utilization / intensity smoothing
    gamma: float = 0.5        # spectrum-width safety weight
    eps: float = 1e-3         # buffer overflow target
    buffer_work: float | None = None  # x in work-units; default derived from server buffers

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")


@dataclass
class BalancerState:
    """Mutable feedback state carried across windows."""

    spectrum: HurstSpectrum | None = None
    lambda_level: dict[int, float] = field(default_factory=dict)   # smoothed intensities
    util_history: dict[int, list[tuple[float, tuple[float, float, float]]]] = field(default_factory=dict)

    def observe_utilization(self, t: float,
                            util: Mapping[int, tuple[float, float, float]]) -> None:
        for sid, u in util.items():
            self.util_history.setdefault(sid, []).append((t, tuple(u)))


@dataclass(frozen=True)
class BalanceResult:
    assignment: FlowAssignment
    forecasts: dict[int, Forecast]
    spectrum: HurstSpectrum
    demands: list[ResourceDemand]
    factors: dict[int, float]
    degenerate_window: bool


_FLAT_SPECTRUM = HurstSpectrum.from_fit((-2.0, 2.0), (0.5, 0.5), (1.0, 1.0))


def balance_step(window_series: TimeSeries, window: TraceWindow,
                 state: BalancerState, servers: Sequence[ServerConfig],
                 flows_classes: Sequence[int], cfg: BalancerConfig,
                 mfdfa_cfg: MfdfaConfig) -> BalanceResult:
    """One pass of the feedback loop over a completed analysis window.

    Spectrum estimation, statistics collection, per-class effective
    bandwidth, headroom-proportional assignment and the under-forecast
    correction, in that order.  A degenerate (constant) window reuses the
    previous spectrum instead of aborting.
    """
    degenerate = False
    try:
        spectrum = mfdfa(window_series, mfdfa_cfg)
    except ValueError:
        spectrum = state.spectrum if state.spectrum is not None else _FLAT_SPECTRUM
        degenerate = True
    state.spectrum = spectrum

    stats = collect_stats(window, flows_classes, window.span)
    stats.util_history = {sid: list(h) for sid, h in state.util_history.items()}

    # forecast intensities were smoothed from windows before this one;
    # first window falls back to the observation itself (factor 1)
    lam_forecast = {
        cls: state.lambda_level.get(cls, stats.lambda_hat.get(cls, 0.0))
        for cls in flows_classes
    }

    mean_buffer = float(np.mean([s.buffer for s in servers])) if servers else 1.0
    demands: list[ResourceDemand] = []
    for cls in flows_classes:
        m = stats.mean_rate.get(cls, 0.0)
        a = stats.var_coeff.get(cls, 0.0)
        h, dh = spectrum.H, spectrum.delta_h
        h = min(max(h, 0.01), 0.99)  # estimator noise can leave (0,1)
        if m <= 0:
            demands.append(ResourceDemand(cls, h, dh, 0.0))
            continue
        if a <= 0:
            # zero measured variance: no burst overprovision needed
            demands.append(ResourceDemand(cls, h, dh, m))
            continue
        lam_hat = stats.lambda_hat.get(cls, 0.0)
        mean_work = m / lam_hat if lam_hat > 0 else 1.0
        x = cfg.buffer_work if cfg.buffer_work is not None else max(mean_buffer * mean_work, mean_work, 1e-9)
        c = effective_bandwidth(m, a, h, x, cfg.eps, delta_h=dh, gamma=cfg.gamma)
        safety = 1.0 + cfg.gamma * max(0.0, dh)
        demands.append(ResourceDemand(cls, h, dh, c, safety=safety))

    forecasts = {
        sid: forecast_util(hist, cfg.alpha)
        for sid, hist in state.util_history.items() if hist
    }
    assignment = compute_assignment(demands, forecasts, servers)
    assignment, factors, scaled = correct_underestimate(
        assignment, demands, stats, lam_forecast, forecasts, servers)

    # advance the intensity smoothing for the next window's forecast
    for cls in flows_classes:
        lam_hat = stats.lambda_hat.get(cls, 0.0)
        prev = state.lambda_level.get(cls)
        state.lambda_level[cls] = lam_hat if prev is None else cfg.alpha * lam_hat + (1.0 - cfg.alpha) * prev

    return BalanceResult(assignment, forecasts, spectrum, scaled, factors, degenerate)


class AssignmentRouter:
    """Dispatcher that samples the current flow assignment per packet."""

    def __init__(self, servers: Sequence[ServerConfig], classes: Sequence[int]):
        self._server_ids = tuple(sorted(s.id for s in servers))
        self.assignment = FlowAssignment.uniform(tuple(classes), self._server_ids)

    def set_assignment(self, assignment: FlowAssignment) -> None:
        self.assignment = assignment

    def route(self, pkt: Packet, states: Mapping[int, ServerState],
              rng: np.random.Generator) -> int:
        return self.assignment.sample(pkt.class_id, rng)


class BaselineRouter:
    """Comparison baselines: round_robin, least_loaded, weighted_random."""

    def __init__(self, kind: str, servers: Sequence[ServerConfig]):
        if kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINE_KINDS}")
        if not servers:
            raise ValueError("need at least one server")
        self.kind = kind
        self._server_ids = tuple(sorted(s.id for s in servers))
        self._counters: dict[int, int] = {}
        by_id = {s.id: s for s in servers}
        caps = np.array([
            by_id[sid].channels * float(np.mean(list(by_id[sid].service_rate.values())))
            for sid in self._server_ids
        ])
        self._cap_weights = caps / caps.sum()

    def route(self, pkt: Packet, states: Mapping[int, ServerState],
              rng: np.random.Generator) -> int:
        if self.kind == "round_robin":
            k = self._counters.get(pkt.class_id, 0)
            self._counters[pkt.class_id] = k + 1
            return self._server_ids[k % len(self._server_ids)]
        if self.kind == "least_loaded":
            return min(self._server_ids,
                       key=lambda sid: (max(states[sid].current_utilization()), sid))
        u = rng.random()
        acc = 0.0
        for sid, w in zip(self._server_ids, self._cap_weights):
            acc += w
            if u < acc:
                return sid
        return self._server_ids[-1]
