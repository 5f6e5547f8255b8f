"""Discrete-event simulation of priority queueing servers.

Each server is a multi-channel station with one shared finite buffer.
Service is preemptive-priority with resume, buffers are priority-ordered,
and a probabilistic eject mechanism lets an arriving packet displace a
strictly lower-priority buffered packet when the buffer is full.  Buffered
packets expire at the end of their lifetime; expiry is checked lazily
before every admission and departure, and once more at the horizon.

Resource model: CPU and disk are rate resources consumed by in-service
work (service rate times per-work demand), memory is an occupancy resource
consumed by all resident work (original size of in-service plus buffered
packets).  Utilization is the time-averaged demand over capacity, clamped
to [0, 1], with per-class contributions kept separate until clamping.
"""

from __future__ import annotations

import csv
import heapq
import math
from bisect import insort
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .traffic import Packet, derive_seed

__all__ = [
    "ServerConfig",
    "EjectPolicy",
    "ServerState",
    "TraceEvent",
    "Trace",
    "AdmissionOutcome",
    "Engine",
    "admit",
    "select_victim",
    "expire",
    "run",
    "utilization",
    "trace_to_csv",
    "EVENT_KINDS",
]

EVENT_KINDS = (
    "arrival", "service_start", "preempt", "departure",
    "eject", "loss_full", "loss_expired",
)

REQUEUE = "requeue"
DROP = "drop"


@dataclass(frozen=True)
class ServerConfig:
    """Static description of one server."""

    id: int
    channels: int
    buffer: int                       # waiting places, excludes channels
    service_rate: Mapping[int, float]  # class -> work-units/second
    capacity: tuple[float, float, float] | None = None  # (cpu, mem, disk)
    demand_per_work: Mapping[int, tuple[float, float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"server {self.id}: channels must be >= 1")
        if self.buffer < 0:
            raise ValueError(f"server {self.id}: buffer must be >= 0")
        if not self.service_rate:
            raise ValueError(f"server {self.id}: service_rate map must not be empty")
        for cls, mu in self.service_rate.items():
            if not mu > 0:
                raise ValueError(f"server {self.id}: service rate for class {cls} must be > 0")
        cap = self.capacity
        if cap is None:
            # rate resources scale with channels, memory with total places
            top = self.channels * max(self.service_rate.values())
            cap = (top, float(self.channels + self.buffer), top)
            object.__setattr__(self, "capacity", cap)
        if any(not c > 0 for c in cap):
            raise ValueError(f"server {self.id}: capacities must be > 0")

    def rate_for(self, class_id: int) -> float:
        try:
            return self.service_rate[class_id]
        except KeyError:
            raise ValueError(f"server {self.id} has no service rate for class {class_id}") from None

    def demand_for(self, class_id: int) -> tuple[float, float, float]:
        return self.demand_per_work.get(class_id, (1.0, 1.0, 1.0))

    def work_capacity(self, class_id: int) -> float:
        return self.channels * self.rate_for(class_id)


@dataclass(frozen=True)
class EjectPolicy:
    """Buffer-full behavior: eject probability, fate of displaced packets, preemption."""

    beta: float = 1.0
    displaced_fate: str = REQUEUE
    preempt: bool = True

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.displaced_fate not in (REQUEUE, DROP):
            raise ValueError(f"displaced_fate must be 'requeue' or 'drop', got {self.displaced_fate}")


class _Job:
    """Mutable runtime state of one packet (preemptive-resume bookkeeping)."""

    __slots__ = ("packet", "priority", "class_id", "remaining", "inserted_at", "seq")

    def __init__(self, packet: Packet, seq: int):
        self.packet = packet
        self.priority = packet.priority
        self.class_id = packet.class_id
        self.remaining = packet.size
        self.inserted_at = packet.arrival_time
        self.seq = seq

    def sort_key(self):
        return (self.priority, self.inserted_at, self.seq)


class _Service:
    """One busy channel: the job, its start time and scheduled completion."""

    __slots__ = ("job", "start", "rate", "completion", "token")

    def __init__(self, job: _Job, start: float, rate: float, token: int):
        self.job = job
        self.start = start
        self.rate = rate
        self.completion = start + job.remaining / rate
        self.token = token


class ServerState:
    """Dynamic state of one server plus resource-demand accounting.

    Demand levels are maintained incrementally at every transition so the
    per-event time integration touches only classes with live demand.
    """

    def __init__(self, cfg: ServerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.channels: list[_Service | None] = [None] * cfg.channels
        self.buffer: list[_Job] = []
        self.last_t = 0.0
        self.nis_integral = 0.0
        # per-class cumulative and instantaneous (cpu, mem, disk) demand
        self.class_integrals: dict[int, list[float]] = {}
        self.total_integral = [0.0, 0.0, 0.0]
        self.marks: list[tuple[float, tuple[float, float, float]]] = [(0.0, (0.0, 0.0, 0.0))]
        self._level: dict[int, list[float]] = {}
        self._coeff: dict[int, tuple[float, float, float]] = {}  # (mu*d_cpu, d_mem, mu*d_disk)
        self._n_busy = 0
        self._has_expiring = False

    # -- occupancy ---------------------------------------------------------

    def free_channel(self) -> int | None:
        for i, svc in enumerate(self.channels):
            if svc is None:
                return i
        return None

    @property
    def queue_len(self) -> int:
        return len(self.buffer)

    @property
    def buffer_full(self) -> bool:
        return len(self.buffer) >= self.cfg.buffer

    @property
    def in_system(self) -> int:
        return self._n_busy + len(self.buffer)

    # -- demand accounting -------------------------------------------------

    def _coef(self, cls: int) -> tuple[float, float, float]:
        c = self._coeff.get(cls)
        if c is None:
            mu = self.cfg.rate_for(cls)
            d = self.cfg.demand_for(cls)
            c = (mu * d[0], d[1], mu * d[2])
            self._coeff[cls] = c
        return c

    def _level_for(self, cls: int) -> list[float]:
        lv = self._level.get(cls)
        if lv is None:
            lv = self._level[cls] = [0.0, 0.0, 0.0]
            self.class_integrals.setdefault(cls, [0.0, 0.0, 0.0])
        return lv

    def advance(self, t: float) -> None:
        """Integrate demand levels up to time t (piecewise constant between events)."""
        dt = t - self.last_t
        if dt <= 0.0:
            if dt == 0.0:
                return
            raise ValueError("time must not run backwards")
        total = self.total_integral
        for cls, lv in self._level.items():
            l0, l1, l2 = lv
            if l0 == 0.0 and l1 == 0.0 and l2 == 0.0:
                continue
            acc = self.class_integrals[cls]
            i0, i1, i2 = l0 * dt, l1 * dt, l2 * dt
            acc[0] += i0
            acc[1] += i1
            acc[2] += i2
            total[0] += i0
            total[1] += i1
            total[2] += i2
        self.nis_integral += (self._n_busy + len(self.buffer)) * dt
        self.last_t = t

    def mark(self, t: float) -> None:
        self.advance(t)
        self.marks.append((t, tuple(self.total_integral)))

    def integral_at(self, t: float) -> tuple[float, float, float]:
        """Cumulative demand integral at time t, linear between recorded marks."""
        pts = self.marks
        if t >= self.last_t:
            return tuple(self.total_integral)
        lo = pts[0]
        for pt in pts:
            if pt[0] > t:
                hi = pt
                break
            lo = pt
        else:
            hi = (self.last_t, tuple(self.total_integral))
        if hi[0] == lo[0]:
            return lo[1]
        w = (t - lo[0]) / (hi[0] - lo[0])
        return tuple(a + w * (b - a) for a, b in zip(lo[1], hi[1]))

    # -- transitions (keep the levels in sync) -------------------------------

    def start_service(self, job: _Job, channel: int, t: float, token: int) -> _Service:
        c = self._coef(job.class_id)
        svc = _Service(job, t, self.cfg.rate_for(job.class_id), token)
        self.channels[channel] = svc
        lv = self._level_for(job.class_id)
        lv[0] += c[0]
        lv[2] += c[2]
        self._n_busy += 1
        return svc

    def stop_service(self, channel: int, t: float) -> _Job:
        svc = self.channels[channel]
        self.channels[channel] = None
        job = svc.job
        c = self._coef(job.class_id)
        lv = self._level[job.class_id]
        lv[0] -= c[0]
        lv[2] -= c[2]
        self._n_busy -= 1
        job.remaining = max(0.0, job.remaining - (t - svc.start) * svc.rate)
        return job

    def job_entered(self, job: _Job) -> None:
        self._level_for(job.class_id)[1] += job.packet.size * self._coef(job.class_id)[1]

    def job_left(self, job: _Job) -> None:
        self._level[job.class_id][1] -= job.packet.size * self._coef(job.class_id)[1]

    def buffer_insert(self, job: _Job, inserted_at: float) -> None:
        job.inserted_at = inserted_at
        insort(self.buffer, job, key=_Job.sort_key)
        if job.packet.expiry_time != math.inf:
            self._has_expiring = True

    def mean_utilization(self, horizon: float) -> tuple[float, float, float]:
        if horizon <= 0:
            return (0.0, 0.0, 0.0)
        cap = self.cfg.capacity
        return tuple(min(1.0, integ / (cap[i] * horizon)) for i, integ in enumerate(self.total_integral))

    def current_utilization(self) -> tuple[float, float, float]:
        """Instantaneous demand over capacity (for least-loaded routing)."""
        cpu = mem = disk = 0.0
        for lv in self._level.values():
            cpu += lv[0]
            mem += lv[1]
            disk += lv[2]
        cap = self.cfg.capacity
        return (min(1.0, cpu / cap[0]), min(1.0, mem / cap[1]), min(1.0, disk / cap[2]))


def utilization(state: ServerState, server: ServerConfig, window: float) -> tuple[float, float, float]:
    """Time-averaged demand over the trailing window divided by capacity, clamped to [0, 1]."""
    if not window > 0:
        raise ValueError(f"window must be > 0, got {window}")
    now = state.last_t
    t0 = max(0.0, now - window)
    span = now - t0
    if span <= 0:
        return (0.0, 0.0, 0.0)
    i_now = tuple(state.total_integral)
    i_then = state.integral_at(t0)
    cap = server.capacity
    return tuple(min(1.0, (a - b) / (cap[k] * span)) for k, (a, b) in enumerate(zip(i_now, i_then)))


def select_victim(buffer: Sequence[_Job], arriving_priority: int) -> int | None:
    """Index of the eject victim: numerically largest priority strictly greater
    than the arriving one, most recently enqueued on ties; None otherwise."""
    if not buffer:
        return None
    tail = buffer[-1]
    if tail.priority > arriving_priority:
        return len(buffer) - 1
    return None


def expire(state: ServerState, t: float) -> list[_Job]:
    """Remove every buffered packet whose lifetime ended at or before t."""
    if not state._has_expiring or not state.buffer:
        return []
    expired = [j for j in state.buffer if j.packet.expiry_time <= t]
    if expired:
        state.buffer = [j for j in state.buffer if j.packet.expiry_time > t]
        for job in expired:
            state.job_left(job)
    state._has_expiring = any(j.packet.expiry_time != math.inf for j in state.buffer)
    return expired


@dataclass(frozen=True, slots=True)
class TraceEvent:
    time: float
    kind: str
    packet_id: int
    class_id: int
    priority: int
    server_id: int
    queue_len_after: int


class _Recorder:
    """Event log plus lifecycle counters; event storage can be switched off."""

    def __init__(self, record_events: bool = True):
        self.record_events = record_events
        self.events: list[TraceEvent] = []
        self.counts: Counter = Counter()          # (kind, class_id) -> n

    def emit(self, t: float, kind: str, pkt: Packet, server_id: int, qlen: int) -> None:
        self.counts[(kind, pkt.class_id)] += 1
        if self.record_events:
            self.events.append(TraceEvent(t, kind, pkt.id, pkt.class_id, pkt.priority, server_id, qlen))


@dataclass(frozen=True)
class AdmissionOutcome:
    """What happened to an arriving packet: served_now | queued |
    queued_after_eject | lost_full, with the displaced parties if any."""

    kind: str
    started_channel: int | None = None
    victim: Packet | None = None
    preempted: Packet | None = None


def _place_displaced(state: ServerState, job: _Job, policy: EjectPolicy, t: float,
                     rec: _Recorder, sid: int) -> bool:
    """Put a packet displaced from service back into the buffer, behind all
    packets of its own priority class.  With a full buffer the requeue fate
    tries to make room by ejecting a strictly lower-priority buffered
    packet; failing that (or under the drop fate) the displaced packet
    leaves the system.  Returns True if the packet stayed."""
    if not state.buffer_full:
        state.buffer_insert(job, t)
        return True
    if policy.displaced_fate == REQUEUE:
        vidx = select_victim(state.buffer, job.priority)
        if vidx is not None:
            deep = state.buffer.pop(vidx)
            state.job_left(deep)
            rec.emit(t, "eject", deep.packet, sid, len(state.buffer))
            state.buffer_insert(job, t)
            return True
    state.job_left(job)
    rec.emit(t, "eject", job.packet, sid, len(state.buffer))
    return False


def _preempt_candidate(state: ServerState, priority: int) -> int | None:
    """Channel serving the strictly lowest-priority work: numerically largest
    priority, most recent arrival on ties."""
    best = None
    best_key = None
    for i, svc in enumerate(state.channels):
        if svc is None or svc.job.priority <= priority:
            continue
        key = (svc.job.priority, svc.job.packet.arrival_time, svc.job.seq)
        if best_key is None or key > best_key:
            best, best_key = i, key
    return best


def admit(state: ServerState, pkt: Packet, policy: EjectPolicy, t: float,
          rng: np.random.Generator, rec: _Recorder | None = None,
          seq: int = 0, token: int = 0) -> AdmissionOutcome:
    """Admission of one arriving packet; emits trace events via ``rec``.

    Order of resolution: free channel, preemption of strictly lower-priority
    service, buffer space, probabilistic eject, loss.
    """
    if rec is None:
        rec = _Recorder(record_events=False)
    sid = state.cfg.id
    job = _Job(pkt, seq)
    rec.emit(t, "arrival", pkt, sid, len(state.buffer))

    ch = state.free_channel()
    if ch is not None:
        state.job_entered(job)
        state.start_service(job, ch, t, token)
        rec.emit(t, "service_start", pkt, sid, len(state.buffer))
        return AdmissionOutcome("served_now", started_channel=ch)

    if policy.preempt:
        vch = _preempt_candidate(state, pkt.priority)
        if vch is not None:
            displaced = state.stop_service(vch, t)
            rec.emit(t, "preempt", displaced.packet, sid, len(state.buffer))
            state.job_entered(job)
            state.start_service(job, vch, t, token)
            rec.emit(t, "service_start", pkt, sid, len(state.buffer))
            _place_displaced(state, displaced, policy, t, rec, sid)
            return AdmissionOutcome("served_now", started_channel=vch,
                                    preempted=displaced.packet)

    if not state.buffer_full:
        state.job_entered(job)
        state.buffer_insert(job, t)
        return AdmissionOutcome("queued")

    if policy.beta > 0 and rng.random() < policy.beta:
        vidx = select_victim(state.buffer, pkt.priority)
        if vidx is not None:
            victim = state.buffer.pop(vidx)
            state.job_left(victim)
            rec.emit(t, "eject", victim.packet, sid, len(state.buffer))
            state.job_entered(job)
            state.buffer_insert(job, t)
            return AdmissionOutcome("queued_after_eject", victim=victim.packet)

    rec.emit(t, "loss_full", pkt, sid, len(state.buffer))
    return AdmissionOutcome("lost_full")


@dataclass
class Trace:
    """Complete record of one simulation run."""

    events: list[TraceEvent]
    horizon: float
    counts: Counter                                    # (kind, class_id) -> n
    in_system_end: int
    nis_time_integral: float
    server_mean_util: dict[int, tuple[float, float, float]]
    class_util_integrals: dict[int, dict[int, tuple[float, float, float]]]
    util_marks: dict[int, list[tuple[float, tuple[float, float, float]]]]

    def total(self, kind: str) -> int:
        return sum(n for (k, _), n in self.counts.items() if k == kind)

    def per_class(self, kind: str) -> dict[int, int]:
        out: dict[int, int] = {}
        for (k, cls), n in self.counts.items():
            if k == kind:
                out[cls] = out.get(cls, 0) + n
        return out

    def loss_fraction(self) -> float:
        arr = self.total("arrival")
        if arr == 0:
            return 0.0
        lost = self.total("loss_full") + self.total("loss_expired") + self.total("eject")
        return lost / arr

    def mean_number_in_system(self) -> float:
        return self.nis_time_integral / self.horizon if self.horizon > 0 else 0.0

    def conservation_balance(self) -> tuple[int, int]:
        """(arrivals, departures + losses + ejects + in-system at horizon)."""
        arr = self.total("arrival")
        acc = (self.total("departure") + self.total("loss_full")
               + self.total("loss_expired") + self.total("eject") + self.in_system_end)
        return arr, acc


RoutingFn = Callable[[Packet, Mapping[int, ServerState], np.random.Generator], int]


class Engine:
    """Single-threaded event loop over a set of servers.

    Arrivals come from a pre-generated time-ordered stream; departures are
    kept in a heap.  At equal times departures are processed before
    arrivals.  One seeded rng per server (eject coin flips) plus one for
    routing, all derived from the master seed.
    """

    def __init__(self, servers: Sequence[ServerConfig], policy: EjectPolicy,
                 seed: int = 0, record_events: bool = True):
        if not servers:
            raise ValueError("need at least one server")
        ids = [s.id for s in servers]
        if len(set(ids)) != len(ids):
            raise ValueError("server ids must be unique")
        self.policy = policy
        self.states: dict[int, ServerState] = {
            s.id: ServerState(s, np.random.default_rng(derive_seed(seed, 1, s.id)))
            for s in servers
        }
        self.routing_rng = np.random.default_rng(derive_seed(seed, 0))
        self.rec = _Recorder(record_events)
        self._heap: list[tuple[float, int, int, int, int]] = []  # (time, seq, sid, ch, token)
        self._seq = 0
        self._token = 0
        self._arrivals: Sequence[Packet] = ()
        self._next_arrival = 0
        self._routing: RoutingFn | None = None
        self.now = 0.0

    def load(self, arrivals: Sequence[Packet]) -> None:
        for prev, cur in zip(arrivals, arrivals[1:]):
            if cur.arrival_time < prev.arrival_time:
                raise ValueError("arrival stream must be time-ordered")
        self._arrivals = arrivals
        self._next_arrival = 0

    def set_routing(self, routing: RoutingFn) -> None:
        self._routing = routing

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _schedule_departure(self, sid: int, ch: int, svc: _Service) -> None:
        heapq.heappush(self._heap, (svc.completion, self._next_seq(), sid, ch, svc.token))

    def _expire_server(self, st: ServerState, t: float) -> None:
        for job in expire(st, t):
            self.rec.emit(t, "loss_expired", job.packet, st.cfg.id, len(st.buffer))

    def _on_arrival(self, t: float, pkt: Packet) -> None:
        sid = self._routing(pkt, self.states, self.routing_rng)
        st = self.states.get(sid)
        if st is None:
            raise ValueError(f"routing function returned unknown server id {sid!r}")
        st.advance(t)
        self._expire_server(st, t)
        self._token += 1
        outcome = admit(st, pkt, self.policy, t, st.rng, self.rec,
                        seq=self._next_seq(), token=self._token)
        if outcome.started_channel is not None:
            self._schedule_departure(sid, outcome.started_channel,
                                     st.channels[outcome.started_channel])

    def _on_departure(self, t: float, sid: int, ch: int, token: int) -> None:
        st = self.states[sid]
        svc = st.channels[ch]
        if svc is None or svc.token != token:
            return  # stale event: the job was preempted
        st.advance(t)
        job = st.stop_service(ch, t)
        st.job_left(job)
        self.rec.emit(t, "departure", job.packet, sid, len(st.buffer))
        self._expire_server(st, t)
        if st.buffer:
            head = st.buffer.pop(0)
            self._token += 1
            svc = st.start_service(head, ch, t, self._token)
            self.rec.emit(t, "service_start", head.packet, sid, len(st.buffer))
            self._schedule_departure(sid, ch, svc)

    def run_until(self, t_end: float) -> None:
        """Process all events up to and including t_end, in time order."""
        heap = self._heap
        arrivals = self._arrivals
        i = self._next_arrival
        n = len(arrivals)
        while True:
            ta = arrivals[i].arrival_time if i < n else math.inf
            td = heap[0][0] if heap else math.inf
            if ta > t_end and td > t_end:
                break
            if td <= ta:
                t, _, sid, ch, token = heapq.heappop(heap)
                self._on_departure(t, sid, ch, token)
            else:
                pkt = arrivals[i]
                i += 1
                self._on_arrival(ta, pkt)
        self._next_arrival = i
        self.now = t_end

    def mark_all(self, t: float) -> None:
        for st in self.states.values():
            st.mark(t)

    def finish(self, horizon: float) -> Trace:
        if not horizon > 0:
            raise ValueError(f"horizon must be > 0, got {horizon}")
        self.run_until(horizon)
        in_system = 0
        mean_util: dict[int, tuple[float, float, float]] = {}
        class_integrals: dict[int, dict[int, tuple[float, float, float]]] = {}
        marks: dict[int, list] = {}
        nis = 0.0
        for sid, st in sorted(self.states.items()):
            st.advance(horizon)
            self._expire_server(st, horizon)
            st.mark(horizon)
            in_system += st.in_system
            mean_util[sid] = st.mean_utilization(horizon)
            class_integrals[sid] = {cls: tuple(v) for cls, v in st.class_integrals.items()}
            marks[sid] = list(st.marks)
            nis += st.nis_integral
        return Trace(
            events=self.rec.events,
            horizon=horizon,
            counts=self.rec.counts,
            in_system_end=in_system,
            nis_time_integral=nis,
            server_mean_util=mean_util,
            class_util_integrals=class_integrals,
            util_marks=marks,
        )


def run(servers: Sequence[ServerConfig], arrivals: Sequence[Packet], routing: RoutingFn,
        policy: EjectPolicy, horizon: float, seed: int = 0,
        record_events: bool = True) -> Trace:
    """One complete simulation run; deterministic for fixed inputs and seed."""
    eng = Engine(servers, policy, seed=seed, record_events=record_events)
    eng.load(list(arrivals))
    eng.set_routing(routing)
    return eng.finish(horizon)


def trace_to_csv(trace: Trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "kind", "packet_id", "class", "priority", "server", "queue_len_after"])
        for ev in trace.events:
            writer.writerow([repr(ev.time), ev.kind, ev.packet_id, ev.class_id,
                             ev.priority, ev.server_id, ev.queue_len_after])
