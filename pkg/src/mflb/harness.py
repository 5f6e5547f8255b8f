"""Scenario configuration and the end-to-end experiment loop.

A scenario document (strict YAML schema, unknown keys fatal) describes
servers, traffic classes, the analysis window and the routing algorithm.
run_scenario generates the traffic, drives the event engine, re-balances
at every completed analysis window when the multifractal algorithm is
selected, and reduces the trace to a metrics report.  compare_algorithms
replays the same arrival streams under different routing algorithms.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import csv
from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .balancer import (
    AssignmentRouter,
    BalanceResult,
    BalancerConfig,
    BalancerState,
    BaselineRouter,
    TraceWindow,
    balance_step,
)
from .mfa import DEFAULT_Q_GRID, MfdfaConfig, WindowConfig
from .qsim import EjectPolicy, Engine, ServerConfig, Trace, utilization
from .traffic import (
    FlowSpec,
    Packet,
    TimeSeries,
    derive_seed,
    flow_rate_series,
    gen_arrivals,
    merge_streams,
)

__all__ = [
    "Scenario",
    "ScenarioError",
    "ScenarioModel",
    "MetricsReport",
    "WindowLog",
    "RunResult",
    "ComparisonResult",
    "parse_scenario",
    "run_scenario",
    "jain_index",
    "metrics_from_trace",
    "compare_algorithms",
    "build_arrivals",
    "run_balanced",
    "metrics_to_dict",
    "write_metrics_json",
    "window_logs_to_csv",
    "comparison_to_csv",
    "ALGORITHMS",
]

ALGORITHMS = ("multifractal", "round_robin", "least_loaded", "weighted_random")


class ScenarioError(ValueError):
    """Configuration document rejected; message names the offending keys."""


# -- strict document schema -------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WindowModel(_Strict):
    length: int = Field(gt=0)
    shift: int = Field(gt=0)

    @model_validator(mode="after")
    def _shift_le_length(self):
        if self.shift > self.length:
            raise ValueError("window shift must not exceed window length")
        return self


class MfdfaModel(_Strict):
    q_grid: list[float] | None = None
    n_scales: int = Field(default=16, ge=4)
    min_scale: int = Field(default=16, ge=3)
    detrend_order: int = Field(default=1, ge=1)


class EjectModel(_Strict):
    beta: float = Field(default=1.0, ge=0.0, le=1.0)
    displaced_fate: Literal["requeue", "drop"] = "requeue"
    preempt: bool = True


class BalancerModel(_Strict):
    alpha: float = Field(default=0.3, gt=0.0, le=1.0)
    gamma: float = Field(default=0.5, ge=0.0)
    eps: float = Field(default=1e-3, gt=0.0, lt=1.0)
    buffer_work: float | None = Field(default=None, gt=0.0)


class ServerModel(_Strict):
    id: int
    channels: int = Field(default=1, ge=1)
    buffer: int = Field(default=0, ge=0)
    service_rate: dict[int, float] | float
    capacity: tuple[float, float, float] | None = None
    demand_per_work: dict[int, tuple[float, float, float]] = Field(default_factory=dict)


class FlowModel(_Strict):
    class_id: int = Field(ge=1)
    priority: int = Field(default=0, ge=0)
    rate: float = Field(ge=0.0)
    hurst: float = Field(default=0.5, gt=0.0, lt=1.0)
    cascade_weight: float = Field(default=0.5, gt=0.0, lt=1.0)
    mean_size: float = Field(default=1.0, gt=0.0)
    lifetime: float | None = Field(default=None, gt=0.0)


class ScenarioModel(_Strict):
    name: str = ""
    duration: float = Field(gt=0.0)
    dt: float = Field(default=1.0, gt=0.0)
    seed: int = 0
    algorithm: Literal["multifractal", "round_robin", "least_loaded", "weighted_random"] = "multifractal"
    window: WindowModel
    mfdfa: MfdfaModel = Field(default_factory=MfdfaModel)
    eject: EjectModel = Field(default_factory=EjectModel)
    balancer: BalancerModel = Field(default_factory=BalancerModel)
    servers: list[ServerModel] = Field(min_length=1)
    flows: list[FlowModel] = Field(min_length=1)

    @model_validator(mode="after")
    def _invariants(self):
        if self.duration < self.window.length * self.dt:
            raise ValueError(
                f"duration ({self.duration}) must cover one analysis window "
                f"(window.length * dt = {self.window.length * self.dt})"
            )
        ids = [s.id for s in self.servers]
        if len(set(ids)) != len(ids):
            raise ValueError("server ids must be unique")
        classes = [f.class_id for f in self.flows]
        if len(set(classes)) != len(classes):
            raise ValueError("flow class_ids must be unique")
        return self

    def to_domain(self) -> "Scenario":
        classes = [f.class_id for f in self.flows]
        servers = []
        for sm in self.servers:
            rate = sm.service_rate
            rates = {cls: float(rate) for cls in classes} if isinstance(rate, (int, float)) else {
                int(k): float(v) for k, v in rate.items()
            }
            missing = [c for c in classes if c not in rates]
            if missing:
                raise ScenarioError(
                    f"server {sm.id}: service_rate missing classes {missing}")
            servers.append(ServerConfig(
                id=sm.id, channels=sm.channels, buffer=sm.buffer,
                service_rate=rates, capacity=sm.capacity,
                demand_per_work={int(k): tuple(v) for k, v in sm.demand_per_work.items()},
            ))
        flows = [FlowSpec(
            class_id=f.class_id, priority=f.priority, rate=f.rate, hurst=f.hurst,
            cascade_weight=f.cascade_weight, mean_size=f.mean_size, lifetime=f.lifetime,
        ) for f in self.flows]
        return Scenario(
            name=self.name,
            servers=servers,
            flows=flows,
            algorithm=self.algorithm,
            window=WindowConfig(self.window.length, self.window.shift),
            mfdfa=self.mfdfa,
            eject=EjectPolicy(self.eject.beta, self.eject.displaced_fate, self.eject.preempt),
            balancer=BalancerConfig(self.balancer.alpha, self.balancer.gamma,
                                    self.balancer.eps, self.balancer.buffer_work),
            duration=self.duration,
            dt=self.dt,
            seed=self.seed,
        )

    def digest(self) -> str:
        """Configuration digest, independent of the runtime seed."""
        doc = self.model_dump(mode="json")
        doc.pop("seed", None)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class Scenario:
    """Validated experiment description."""

    servers: list[ServerConfig]
    flows: list[FlowSpec]
    algorithm: str
    window: WindowConfig
    mfdfa: MfdfaModel
    eject: EjectPolicy
    balancer: BalancerConfig
    duration: float
    dt: float
    seed: int
    name: str = ""

    @property
    def n_slots(self) -> int:
        return int(math.ceil(self.duration / self.dt))

    @property
    def n_windows(self) -> int:
        return (self.n_slots - self.window.length) // self.window.shift + 1

    def mfdfa_config(self) -> MfdfaConfig:
        q = tuple(self.mfdfa.q_grid) if self.mfdfa.q_grid else DEFAULT_Q_GRID
        return MfdfaConfig.for_length(
            self.window.length, q_grid=q, n_scales=self.mfdfa.n_scales,
            min_scale=self.mfdfa.min_scale, detrend_order=self.mfdfa.detrend_order)


def parse_scenario(text: str) -> Scenario:
    """Parse and validate a scenario document; unknown keys are fatal."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"not a valid configuration document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError("configuration document must be a mapping")
    return scenario_model(doc).to_domain()


def scenario_model(doc: Mapping) -> ScenarioModel:
    try:
        return ScenarioModel.model_validate(doc)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<document>"
            lines.append(f"{loc}: {err['msg']}")
        raise ScenarioError("invalid scenario: " + "; ".join(lines)) from exc


# -- metrics ------------------------------------------------------------------

@dataclass
class MetricsReport:
    throughput: float
    loss: dict[int, float]
    total_loss: float
    response_p50: float | None
    response_p95: float | None
    response_p99: float | None
    utilization: dict[int, tuple[float, float, float]]
    jain: float
    control_overhead: int


def jain_index(x: Sequence[float]) -> float:
    """(sum x)^2 / (n sum x^2); 1 for equal shares, 1/n for one-hot.

    All-zero input is reported as 1 by convention (an idle system is
    perfectly even)."""
    arr = np.asarray(list(x), dtype=float)
    if arr.size == 0:
        raise ValueError("jain_index needs a nonempty input")
    if (arr < 0).any():
        raise ValueError("jain_index inputs must be nonnegative")
    denom = float((arr * arr).sum())
    if denom == 0.0:
        return 1.0
    total = float(arr.sum())
    return total * total / (arr.size * denom)


def _nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    n = len(sorted_values)
    idx = max(0, math.ceil(pct / 100.0 * n) - 1)
    return sorted_values[idx]


def metrics_from_trace(trace: Trace, servers: Sequence[ServerConfig], duration: float,
                       n_windows: int = 0) -> MetricsReport:
    """Reduce a trace to the evaluation metrics.

    Response time is departure minus arrival per served packet with
    nearest-rank percentiles; loss is (full + expired + ejected) over
    arrivals per class; control overhead counts one balancer message per
    window per server."""
    arrivals_at: dict[int, float] = {}
    responses: list[float] = []
    for ev in trace.events:
        if ev.kind == "arrival":
            arrivals_at[ev.packet_id] = ev.time
        elif ev.kind == "departure":
            responses.append(ev.time - arrivals_at[ev.packet_id])
    responses.sort()

    arr_c = trace.per_class("arrival")
    lost_c: dict[int, int] = {}
    for kind in ("loss_full", "loss_expired", "eject"):
        for cls, n in trace.per_class(kind).items():
            lost_c[cls] = lost_c.get(cls, 0) + n
    loss = {cls: (lost_c.get(cls, 0) / n if n else 0.0) for cls, n in sorted(arr_c.items())}
    total_arr = sum(arr_c.values())
    total_loss = sum(lost_c.values()) / total_arr if total_arr else 0.0

    if responses:
        p50, p95, p99 = (_nearest_rank(responses, p) for p in (50, 95, 99))
    else:
        p50 = p95 = p99 = None

    util = {s.id: trace.server_mean_util.get(s.id, (0.0, 0.0, 0.0)) for s in servers}
    peaks = [max(u) for u in util.values()]
    return MetricsReport(
        throughput=trace.total("departure") / duration if duration > 0 else 0.0,
        loss=loss,
        total_loss=total_loss,
        response_p50=p50,
        response_p95=p95,
        response_p99=p99,
        utilization=util,
        jain=jain_index(peaks),
        control_overhead=n_windows * len(servers),
    )


def metrics_to_dict(report: MetricsReport, config_digest: str = "", seed: int = 0) -> dict:
    """metrics.json payload; keys are stable and JSON-serializable."""
    return {
        "throughput": report.throughput,
        "loss": {str(cls): frac for cls, frac in sorted(report.loss.items())},
        "response_p50": report.response_p50,
        "response_p95": report.response_p95,
        "response_p99": report.response_p99,
        "utilization": {str(sid): list(u) for sid, u in sorted(report.utilization.items())},
        "jain": report.jain,
        "control_overhead": report.control_overhead,
        "config_digest": config_digest,
        "seed": seed,
    }


def write_metrics_json(report: MetricsReport, path, config_digest: str = "", seed: int = 0) -> None:
    payload = metrics_to_dict(report, config_digest, seed)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


# -- the experiment loop ------------------------------------------------------

@dataclass
class WindowLog:
    """One balancer pass: spectrum summary plus per-class demand rows."""

    window_start: int            # slot index
    H: float
    delta_h: float
    rows: list[tuple[int, float, float, float, dict[int, float]]]
    # rows: (class_id, lambda_hat, bandwidth, factor, weights per server)
    degenerate: bool = False


@dataclass
class RunResult:
    trace: Trace
    window_logs: list[WindowLog]
    metrics: MetricsReport
    arrivals: list[Packet]
    scenario: Scenario


def build_arrivals(s: Scenario) -> list[Packet]:
    """Merged packet stream for a scenario; depends only on (flows, duration,
    dt, seed), never on the routing algorithm."""
    streams = []
    for k, flow in enumerate(sorted(s.flows, key=lambda f: f.class_id)):
        if flow.rate == 0:
            continue
        series = flow_rate_series(flow, s.n_slots, s.dt,
                                  seed=derive_seed(s.seed, 100, flow.class_id))
        streams.append(gen_arrivals(series, flow, s.duration,
                                    seed=derive_seed(s.seed, 200, flow.class_id),
                                    id_base=k << 40))
    return merge_streams(streams)


def aggregate_work_series(arrivals: Sequence[Packet], n_slots: int, dt: float) -> TimeSeries:
    """Total arriving work per analysis slot (the series the balancer watches)."""
    values = np.zeros(n_slots)
    for p in arrivals:
        k = min(int(p.arrival_time / dt), n_slots - 1)
        values[k] += p.size
    return TimeSeries(values, dt)


def stream_hash(arrivals: Sequence[Packet]) -> str:
    h = hashlib.sha256()
    for p in arrivals:
        h.update(f"{p.id},{p.class_id},{p.priority},{p.arrival_time!r},{p.size!r},{p.expiry_time!r}\n".encode())
    return h.hexdigest()


def run_balanced(s: Scenario, arrivals: Sequence[Packet]) -> RunResult:
    """Drive the engine with the selected routing algorithm, re-balancing at
    every completed analysis window when algorithm is multifractal."""
    classes = sorted(f.class_id for f in s.flows)
    use_balancer = s.algorithm == "multifractal"
    if use_balancer:
        router = AssignmentRouter(s.servers, classes)
        mf_cfg = s.mfdfa_config()
        bal_state = BalancerState()
    else:
        router = BaselineRouter(s.algorithm, s.servers)

    eng = Engine(s.servers, s.eject, seed=derive_seed(s.seed, 300), record_events=True)
    eng.load(list(arrivals))
    eng.set_routing(router.route)

    agg = aggregate_work_series(arrivals, s.n_slots, s.dt)
    arrival_times = np.array([p.arrival_time for p in arrivals])
    window_logs: list[WindowLog] = []
    last_mark = 0.0

    for k in range(s.n_windows):
        start_slot = k * s.window.shift
        t0 = start_slot * s.dt
        t1 = (start_slot + s.window.length) * s.dt
        eng.run_until(t1)
        eng.mark_all(t1)
        if not use_balancer:
            last_mark = t1
            continue

        # utilization over the window just ended feeds the forecaster
        span = t1 - max(t0, 0.0)
        bal_state.observe_utilization(t1, {
            sid: utilization(st, st.cfg, span) for sid, st in eng.states.items()
        })

        lo, hi = np.searchsorted(arrival_times, [t0, t1])
        w_arrivals = tuple(arrivals[lo:hi])
        w_events = tuple(ev for ev in eng.rec.events if t0 <= ev.time < t1)
        window = TraceWindow(t0, t1, s.dt, w_arrivals, w_events)
        wseries = TimeSeries(agg.values[start_slot:start_slot + s.window.length], s.dt)

        result = balance_step(wseries, window, bal_state, s.servers, classes,
                              s.balancer, mf_cfg)
        router.set_assignment(result.assignment)
        window_logs.append(WindowLog(
            window_start=start_slot,
            H=result.spectrum.H,
            delta_h=result.spectrum.delta_h,
            rows=[
                (d.class_id,
                 0.0 if window.span <= 0 else sum(1 for p in w_arrivals if p.class_id == d.class_id) / window.span,
                 d.bandwidth,
                 result.factors.get(d.class_id, 1.0),
                 result.assignment.weights_for(d.class_id))
                for d in result.demands
            ],
            degenerate=result.degenerate_window,
        ))
        last_mark = t1

    trace = eng.finish(s.duration)
    metrics = metrics_from_trace(trace, s.servers, s.duration, s.n_windows)
    return RunResult(trace, window_logs, metrics, list(arrivals), s)


def run_scenario(s: Scenario) -> RunResult:
    """Generate traffic and run the full scenario; deterministic per seed."""
    if s.algorithm not in ALGORITHMS:
        raise ScenarioError(f"unknown algorithm {s.algorithm!r}")
    return run_balanced(s, build_arrivals(s))


# -- algorithm comparison ------------------------------------------------------

_SCALAR_METRICS = ("throughput", "total_loss", "response_p50", "response_p95",
                   "response_p99", "jain", "control_overhead")


def _scalar(report: MetricsReport, name: str) -> float:
    v = getattr(report, name)
    return float("nan") if v is None else float(v)


@dataclass
class ComparisonResult:
    algorithms: list[str]
    seeds: list[int]
    rows: list[tuple[str, str, float, float, int]]   # algorithm, metric, mean, stddev, n
    per_seed: dict[str, list[MetricsReport]]
    stream_hashes: dict[str, list[str]]              # algorithm -> per-seed hash
    wins: dict[str, dict[str, int]]                  # metric -> algorithm -> wins vs first


def compare_algorithms(s: Scenario, algorithms: Sequence[str],
                       seeds: Sequence[int]) -> ComparisonResult:
    """Run every (algorithm, seed) pair on identical traffic realizations.

    For each seed the arrival stream is generated once and shared across
    algorithms, so differences are attributable to routing alone."""
    if len(algorithms) < 2:
        raise ValueError("compare_algorithms needs at least 2 algorithms")
    if not seeds:
        raise ValueError("compare_algorithms needs at least 1 seed")
    for alg in algorithms:
        if alg not in ALGORITHMS:
            raise ScenarioError(f"unknown algorithm {alg!r}")

    per_seed: dict[str, list[MetricsReport]] = {alg: [] for alg in algorithms}
    hashes: dict[str, list[str]] = {alg: [] for alg in algorithms}
    for seed in seeds:
        base = Scenario(**{**s.__dict__, "seed": int(seed)})
        arrivals = build_arrivals(base)
        digest = stream_hash(arrivals)
        for alg in algorithms:
            variant = Scenario(**{**base.__dict__, "algorithm": alg})
            result = run_balanced(variant, arrivals)
            per_seed[alg].append(result.metrics)
            hashes[alg].append(digest)

    rows = []
    for alg in algorithms:
        for metric in _SCALAR_METRICS:
            vals = np.array([_scalar(r, metric) for r in per_seed[alg]])
            std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            rows.append((alg, metric, float(vals.mean()), std, vals.size))

    first = algorithms[0]
    wins: dict[str, dict[str, int]] = {"jain": {}, "total_loss": {}}
    for alg in algorithms[1:]:
        wins["jain"][alg] = sum(
            1 for a, b in zip(per_seed[alg], per_seed[first]) if a.jain >= b.jain)
        wins["total_loss"][alg] = sum(
            1 for a, b in zip(per_seed[alg], per_seed[first]) if a.total_loss <= b.total_loss)
    return ComparisonResult(list(algorithms), [int(x) for x in seeds], rows,
                            per_seed, hashes, wins)


# -- CSV writers ---------------------------------------------------------------

def window_logs_to_csv(logs: Sequence[WindowLog], server_ids: Sequence[int]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    ids = sorted(server_ids)
    writer.writerow(["window_start", "H", "delta_h", "class", "lambda_hat", "C", "factor"]
                    + [f"w_{sid}" for sid in ids])
    for log in logs:
        for cls, lam, c, factor, weights in log.rows:
            writer.writerow([log.window_start, repr(log.H), repr(log.delta_h), cls,
                             repr(lam), repr(c), repr(factor)]
                            + [repr(weights.get(sid, 0.0)) for sid in ids])
    return buf.getvalue()


def comparison_to_csv(result: ComparisonResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["algorithm", "metric", "mean", "stddev", "n_seeds"])
    for alg, metric, mean, std, n in result.rows:
        writer.writerow([alg, metric, repr(mean), repr(std), n])
    return buf.getvalue()
