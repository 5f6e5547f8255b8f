"""Synthetic traffic generation.

Rate series come from two generators with closed-form ground truth: exact
circulant-embedding fractional Gaussian noise (self-similar, Hurst H) and
the binomial multiplicative cascade (multifractal, weight a).  Packet
streams are doubly-stochastic Poisson processes modulated by a rate series,
one stream per traffic class.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "TimeSeries",
    "FlowSpec",
    "Packet",
    "gen_fgn",
    "gen_binomial_cascade",
    "analytic_binomial_h",
    "gen_arrivals",
    "merge_streams",
    "flow_rate_series",
    "derive_seed",
    "timeseries_to_csv",
    "timeseries_from_csv",
    "packets_to_csv",
    "packets_from_csv",
]


@dataclass(frozen=True)
class TimeSeries:
    """Uniformly sampled series of load values; ``dt`` is the slot duration in seconds."""

    values: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size < 1:
            raise ValueError("TimeSeries needs a one-dimensional series of length >= 1")
        if not np.all(np.isfinite(vals)):
            raise ValueError("TimeSeries values must all be finite")
        if not self.dt > 0:
            raise ValueError(f"TimeSeries dt must be > 0, got {self.dt}")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def duration(self) -> float:
        return self.values.size * self.dt


@dataclass(frozen=True)
class FlowSpec:
    """Static description of one traffic class."""

    class_id: int
    priority: int = 0
    rate: float = 1.0            # packets/second
    hurst: float = 0.5           # target H of the self-similar envelope
    cascade_weight: float = 0.5  # binomial cascade split; 0.5 = no multifractality
    mean_size: float = 1.0       # work-units
    lifetime: float | None = None  # seconds; None = unbounded

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"class_id must be >= 1, got {self.class_id}")
        if self.priority < 0:
            raise ValueError(f"priority must be >= 0, got {self.priority}")
        if self.rate < 0:
            raise ValueError(f"rate must be >= 0, got {self.rate}")
        if not 0.0 < self.hurst < 1.0:
            raise ValueError(f"hurst must lie in (0, 1), got {self.hurst}")
        if not 0.0 < self.cascade_weight < 1.0:
            raise ValueError(f"cascade_weight must lie in (0, 1), got {self.cascade_weight}")
        if not self.mean_size > 0:
            raise ValueError(f"mean_size must be > 0, got {self.mean_size}")
        if self.lifetime is not None and not self.lifetime > 0:
            raise ValueError(f"lifetime must be > 0 or None, got {self.lifetime}")

    @property
    def expiry_delay(self) -> float:
        return math.inf if self.lifetime is None else self.lifetime


@dataclass(frozen=True, slots=True)
class Packet:
    """A class-tagged service request."""

    id: int
    class_id: int
    priority: int
    arrival_time: float
    size: float
    expiry_time: float

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError(f"packet size must be > 0, got {self.size}")
        if self.expiry_time < self.arrival_time:
            raise ValueError("expiry_time must be >= arrival_time")


def derive_seed(seed: int, *key: int) -> int:
    """Deterministic child seed so independent streams never share draws."""
    ss = np.random.SeedSequence([int(seed)] + [int(k) for k in key])
    return int(ss.generate_state(1, np.uint64)[0])


def _fgn_autocov(hurst: float, sigma: float, kmax: int) -> np.ndarray:
    # gamma(k) = sigma^2/2 * (|k+1|^2H - 2|k|^2H + |k-1|^2H)
    k = np.arange(kmax + 1, dtype=float)
    two_h = 2.0 * hurst
    return 0.5 * sigma * sigma * (
        np.abs(k + 1.0) ** two_h - 2.0 * np.abs(k) ** two_h + np.abs(k - 1.0) ** two_h
    )


def gen_fgn(hurst: float, n: int, sigma: float = 1.0, seed: int = 0, dt: float = 1.0) -> TimeSeries:
    """Exact fractional Gaussian noise by circulant embedding (Davies-Harte).

    Returns ``n`` stationary samples with autocovariance
    gamma(k) = sigma^2/2 (|k+1|^2H - 2|k|^2H + |k-1|^2H); bit-identical
    output for identical arguments.
    """
    if not 0.0 < hurst < 1.0:
        raise ValueError(f"hurst must lie in (0, 1), got {hurst}")
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")

    gamma = _fgn_autocov(hurst, sigma, n)
    # first row of the 2n circulant: gamma(0..n) then mirrored gamma(n-1..1)
    c = np.concatenate([gamma, gamma[n - 1:0:-1]])
    lam = np.fft.fft(c).real
    # the embedding is nonnegative-definite for fGn; tolerate fp dust only
    if lam.min() < -1e-8 * max(lam.max(), 1.0):
        raise ArithmeticError("circulant embedding produced negative eigenvalues")
    lam = np.maximum(lam, 0.0)

    m = 2 * n
    rng = np.random.default_rng(seed)
    v_edge = rng.standard_normal(2)
    v_pair = rng.standard_normal((n - 1, 2))

    w = np.zeros(m, dtype=complex)
    w[0] = math.sqrt(lam[0] / m) * v_edge[0]
    w[n] = math.sqrt(lam[n] / m) * v_edge[1]
    w[1:n] = np.sqrt(lam[1:n] / (2.0 * m)) * (v_pair[:, 0] + 1j * v_pair[:, 1])
    w[n + 1:] = np.conj(w[1:n][::-1])

    samples = np.fft.fft(w).real[:n]
    return TimeSeries(samples, dt)


def gen_binomial_cascade(
    a: float,
    depth: int,
    randomize: bool = False,
    seed: int = 0,
    dt: float = 1.0,
) -> TimeSeries:
    """Binomial multiplicative cascade: unit mass split (a, 1-a) at each dyadic level.

    Deterministic variant sends fraction ``a`` to the left child at every
    split; the randomized variant assigns the (a, 1-a) pair to the two
    children in seeded random order per split.  Output length is 2**depth
    and total mass stays 1.
    """
    if not 0.0 < a < 1.0:
        raise ValueError(f"a must lie in (0, 1), got {a}")
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")

    rng = np.random.default_rng(seed) if randomize else None
    mass = np.array([1.0])
    for _ in range(depth):
        left = np.full(mass.size, a)
        if rng is not None:
            swap = rng.random(mass.size) < 0.5
            left[swap] = 1.0 - a
        children = np.empty(mass.size * 2)
        children[0::2] = mass * left
        children[1::2] = mass * (1.0 - left)
        mass = children
    return TimeSeries(mass, dt)


def analytic_binomial_h(a: float, q: float) -> float:
    """Closed-form generalized Hurst exponent of the binomial cascade.

    h(q) = 1/q - ln(a^q + (1-a)^q) / (q ln 2); the removable q=0 point is
    not implemented, callers use q-grids excluding 0.
    """
    if not 0.0 < a < 1.0:
        raise ValueError(f"a must lie in (0, 1), got {a}")
    if q == 0:
        raise ValueError("q = 0 is not supported (removable singularity)")
    return 1.0 / q - math.log(a ** q + (1.0 - a) ** q) / (q * math.log(2.0))


def gen_arrivals(rate: TimeSeries, spec: FlowSpec, horizon: float, seed: int = 0,
                 id_base: int = 0) -> list[Packet]:
    """Inhomogeneous Poisson packet stream modulated by ``rate``.

    The rate series is normalized to mean 1 over the slots covering the
    horizon (tiled cyclically if shorter) and scaled by ``spec.rate``, so
    the realized mean intensity equals spec.rate exactly.  Sizes are
    exponential with mean ``spec.mean_size``; timestamps strictly increase
    with ids assigned in time order starting at ``id_base`` (callers keep
    ids globally unique across merged flows by spacing the bases).
    """
    if not horizon > 0:
        raise ValueError(f"horizon must be > 0, got {horizon}")
    values = np.asarray(rate.values, dtype=float)
    if (values < 0).any():
        raise ValueError("rate samples must be nonnegative")
    if spec.rate == 0:
        return []

    n_slots = int(math.ceil(horizon / rate.dt))
    u = values[np.arange(n_slots) % values.size]
    mean_u = u.mean()
    if mean_u <= 0:
        return []
    intensity = spec.rate * (u / mean_u)  # packets/second per slot

    rng = np.random.default_rng(seed)
    counts = rng.poisson(intensity * rate.dt)
    slot_starts = np.repeat(np.arange(n_slots) * rate.dt, counts)
    times = slot_starts + rng.random(counts.sum()) * rate.dt
    times = np.sort(times[times < horizon])
    sizes = rng.exponential(spec.mean_size, times.size)

    delay = spec.expiry_delay
    return [
        Packet(
            id=id_base + i,
            class_id=spec.class_id,
            priority=spec.priority,
            arrival_time=float(t),
            size=float(s),
            expiry_time=float(t) + delay,
        )
        for i, (t, s) in enumerate(zip(times, sizes))
    ]


def merge_streams(streams: Sequence[Sequence[Packet]]) -> list[Packet]:
    """Stable time-ordered merge; ties broken by (class_id, id)."""
    for k, stream in enumerate(streams):
        for prev, cur in zip(stream, stream[1:]):
            if cur.arrival_time < prev.arrival_time:
                raise ValueError(f"input stream {k} is not time-ordered")
    key = lambda p: (p.arrival_time, p.class_id, p.id)
    return list(heapq.merge(*streams, key=key))


def flow_rate_series(spec: FlowSpec, n: int, dt: float = 1.0, seed: int = 0,
                     envelope_sigma: float = 0.25) -> TimeSeries:
    """Per-flow modulation series combining both burst mechanisms.

    Self-similar envelope max(0, 1 + fGn(H, sigma)) times the randomized
    binomial cascade scaled to mean 1.  With cascade_weight 0.5 the cascade
    is flat and the series is purely self-similar; with H = 0.5 the
    envelope is white.  gen_arrivals renormalizes, so only the shape
    matters here.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    depth = max(1, math.ceil(math.log2(max(n, 2))))
    n_pow = 2 ** depth
    envelope = gen_fgn(spec.hurst, n_pow, sigma=envelope_sigma,
                       seed=derive_seed(seed, 1, spec.class_id)).values
    envelope = np.maximum(0.0, 1.0 + envelope)
    cascade = gen_binomial_cascade(spec.cascade_weight, depth, randomize=True,
                                   seed=derive_seed(seed, 2, spec.class_id)).values
    combined = envelope[:n] * cascade[:n] * n_pow
    if combined.sum() <= 0:
        combined = np.ones(n)
    return TimeSeries(combined, dt)


def timeseries_to_csv(series: TimeSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot_index", "value"])
        for i, v in enumerate(series.values):
            writer.writerow([i, repr(float(v))])


def timeseries_from_csv(path, dt: float = 1.0) -> TimeSeries:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["slot_index", "value"]:
            raise ValueError(f"{path}: expected header 'slot_index,value'")
        values = [float(row[1]) for row in reader if row]
    return TimeSeries(np.array(values), dt)


def packets_to_csv(packets: Iterable[Packet], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "class", "priority", "arrival_time", "size", "expiry_time"])
        for p in packets:
            writer.writerow([p.id, p.class_id, p.priority,
                             repr(p.arrival_time), repr(p.size), repr(p.expiry_time)])


def packets_from_csv(path) -> list[Packet]:
    packets = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            packets.append(Packet(
                id=int(row["id"]),
                class_id=int(row["class"]),
                priority=int(row["priority"]),
                arrival_time=float(row["arrival_time"]),
                size=float(row["size"]),
                expiry_time=float(row["expiry_time"]),
            ))
    return packets
