"""Discrete-event engine: arrivals, lifespans, policy-driven admission, metrics.

One replication is a single-threaded event loop over its own state and RNG
streams.  Streams are split deterministically per (replication seed, class,
purpose) so paired policies see common random numbers; a unit-mean lifespan
variate is drawn once per arrival and scaled by the admitted tuple's 1/u,
keeping the lifespan stream aligned across policies regardless of decisions.
"""

from __future__ import annotations

import csv
import enum
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from heapq import heappush, heappop
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .model import (NetworkConfig, ResourceTuple, SystemState, instantaneous_power,
                    tuple_available)
from .policies import PolicySpec, make_policy


class SimulationInvariantError(RuntimeError):
    """A policy or engine invariant (capacity, legality, conservation) failed."""


class TraceFormatError(ValueError):
    """Malformed arrival-trace file; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class LifespanFamily(str, enum.Enum):
    EXPONENTIAL = "exp"
    DETERMINISTIC = "det"
    PARETO_FINITE = "pareto-f"
    PARETO_INFINITE = "pareto-inf"


_DEFAULT_SHAPE = {LifespanFamily.PARETO_FINITE: 2.001,
                  LifespanFamily.PARETO_INFINITE: 1.98}


@dataclass(frozen=True)
class LifespanModel:
    """Task lifespan distribution with a given mean.

    Pareto scale is mean*(shape-1)/shape so the distribution mean equals the
    target; sampling is by inverse transform.
    """

    family: LifespanFamily
    mean: float
    shape: float | None = None

    def __post_init__(self):
        if self.mean <= 0:
            raise ValueError("lifespan mean must be positive")
        if self.family in _DEFAULT_SHAPE:
            shape = self.shape if self.shape is not None else _DEFAULT_SHAPE[self.family]
            if shape <= 1.0:
                raise ValueError("Pareto shape must exceed 1 for a finite mean")
            object.__setattr__(self, "shape", shape)


def sample_lifespan(model: LifespanModel, rng: np.random.Generator,
                    size: int | None = None):
    """Draw lifespan(s) from the model; scalar when ``size`` is None."""
    if model.family is LifespanFamily.DETERMINISTIC:
        return model.mean if size is None else np.full(size, model.mean)
    if model.family is LifespanFamily.EXPONENTIAL:
        return rng.exponential(model.mean, size)
    xm = model.mean * (model.shape - 1.0) / model.shape
    u = rng.random(size)
    return xm * u ** (-1.0 / model.shape)


def _unit_batch(family: LifespanFamily, shape: float | None,
                rng: np.random.Generator, n: int) -> np.ndarray:
    """Batch of unit-mean lifespan variates (no draws for the deterministic family)."""
    if family is LifespanFamily.DETERMINISTIC:
        return np.ones(n)
    if family is LifespanFamily.EXPONENTIAL:
        return rng.exponential(1.0, n)
    xm = (shape - 1.0) / shape
    return xm * rng.random(n) ** (-1.0 / shape)


@dataclass(frozen=True)
class TraceSchedule:
    """Piecewise-constant rate multipliers: bucket start times x classes."""

    starts: tuple[float, ...]
    multipliers: tuple[tuple[float, ...], ...]  # [bucket][class]

    def multiplier(self, j: int, t: float) -> float:
        b = bisect_right(self.starts, t) - 1
        return self.multipliers[max(b, 0)][j]

    def max_multiplier(self, j: int) -> float:
        return max(row[j] for row in self.multipliers)


@dataclass(frozen=True)
class ArrivalModel:
    """Per-class Poisson rates, optionally modulated by a trace schedule."""

    rates: tuple[float, ...]
    schedule: TraceSchedule | None = None

    def __post_init__(self):
        if any(r <= 0 for r in self.rates):
            raise ValueError("arrival rates must be strictly positive")
        if self.schedule is not None and any(
                m <= 0 for row in self.schedule.multipliers for m in row):
            raise ValueError("rate multipliers must be strictly positive")


def load_trace(path) -> TraceSchedule:
    """Parse a delimited trace file with rows (bucket_start_time, class_id, multiplier).

    Class ids are 1-based in the file.  Every class must appear in every
    bucket and the first bucket must start at time 0.
    """
    rows: list[tuple[float, int, float, int]] = []
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(csv.reader(fh), start=1):
            if not raw or (raw[0].lstrip().startswith("#")):
                continue
            cells = [c.strip() for c in raw]
            if lineno == 1 and cells and not _is_number(cells[0]):
                continue  # header row
            if len(cells) != 3:
                raise TraceFormatError(f"expected 3 fields, got {len(cells)}", lineno)
            try:
                start, class_id, mult = float(cells[0]), int(cells[1]), float(cells[2])
            except ValueError as exc:
                raise TraceFormatError(str(exc), lineno) from None
            if start < 0:
                raise TraceFormatError("bucket start must be non-negative", lineno)
            if class_id < 1:
                raise TraceFormatError("class ids are 1-based", lineno)
            if not math.isfinite(mult) or mult <= 0:
                raise TraceFormatError("rate multiplier must be positive", lineno)
            rows.append((start, class_id - 1, mult, lineno))
    if not rows:
        raise TraceFormatError("trace file holds no data rows")
    starts = sorted({r[0] for r in rows})
    if starts[0] != 0.0:
        raise TraceFormatError("first bucket must start at time 0",
                               min(r[3] for r in rows))
    classes = sorted({r[1] for r in rows})
    table: dict[tuple[float, int], float] = {}
    for start, j, mult, lineno in rows:
        if (start, j) in table:
            raise TraceFormatError(f"duplicate entry for bucket {start}, class {j + 1}",
                                   lineno)
        table[(start, j)] = mult
    for start in starts:
        for j in classes:
            if (start, j) not in table:
                raise TraceFormatError(
                    f"gap: class {j + 1} has no multiplier in bucket starting {start}")
    multipliers = tuple(tuple(table[(s, j)] for j in classes) for s in starts)
    if classes != list(range(len(classes))):
        raise TraceFormatError("class ids must cover 1..J without gaps")
    return TraceSchedule(starts=tuple(starts), multipliers=multipliers)


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


@dataclass(frozen=True)
class Event:
    """One processed event of a replication trace."""

    time: float
    kind: str                      # "arrival" or "departure"
    class_id: int
    tuple: ResourceTuple | None    # None for a blocked arrival


class MetricsAccumulator:
    """Windowed (post warm-up) metrics of one replication plus raw flow counters."""

    def __init__(self, policy_name: str, replication, horizon: float, warm_up: float,
                 config: NetworkConfig, bin_width: float | None = None):
        self.policy_name = policy_name
        self.replication = replication
        self.horizon = horizon
        self.warm_up = warm_up
        self.bin_width = bin_width
        J = config.num_classes
        self.arrivals_total = 0
        self.admissions_total = 0
        self.blocks_total = 0
        self.completions_total = 0
        self.arrivals = 0
        self.admissions = 0
        self.blocks = 0
        self.completions = 0
        self.arrivals_by_class = [0] * J
        self.blocks_by_class = [0] * J
        self.delay_sum = 0.0
        self.edge_energy = 0.0
        self.cloud_energy = 0.0
        self.static_energy = config.static_power * (horizon - warm_up)
        self.admitted_per_tuple: dict[tuple[int, int, int, int], int] = {}
        self.in_flight_end = 0
        if bin_width is not None:
            nbins = max(1, math.ceil((horizon - warm_up) / bin_width))
            self.bin_energy = np.zeros(nbins)
            self.bin_completions = np.zeros(nbins, dtype=np.int64)
            self.bin_delay = np.zeros(nbins)
        else:
            self.bin_energy = self.bin_completions = self.bin_delay = None

    @property
    def window(self) -> float:
        return self.horizon - self.warm_up

    @property
    def operational_energy(self) -> float:
        return self.edge_energy + self.cloud_energy

    @property
    def avg_power(self) -> float:
        """Average operational power (edge occupancy + cloud), watts."""
        return self.operational_energy / self.window

    @property
    def avg_total_power(self) -> float:
        return (self.operational_energy + self.static_energy) / self.window

    @property
    def throughput(self) -> float:
        return self.completions / self.window

    @property
    def throughput_per_watt(self) -> float:
        return self.throughput / self.avg_power if self.avg_power > 0 else math.inf

    @property
    def avg_delay(self) -> float:
        return self.delay_sum / self.completions if self.completions else 0.0

    @property
    def blocking_rate(self) -> float:
        return self.blocks / self.arrivals if self.arrivals else 0.0

    def metric(self, name: str) -> float:
        return {"avg_power": self.avg_power,
                "avg_total_power": self.avg_total_power,
                "throughput": self.throughput,
                "throughput_per_watt": self.throughput_per_watt,
                "avg_delay": self.avg_delay,
                "blocking_rate": self.blocking_rate}[name]

    def check_flow_conservation(self) -> None:
        if self.arrivals_total != self.admissions_total + self.blocks_total:
            raise SimulationInvariantError("arrivals != admissions + blocks")
        if self.admissions_total != self.completions_total + self.in_flight_end:
            raise SimulationInvariantError("admissions != completions + in-flight")


METRIC_NAMES = ("avg_power", "avg_total_power", "throughput", "throughput_per_watt",
                "avg_delay", "blocking_rate")

_PURPOSES = {"arrivals": 0, "lifespans": 1, "ties": 2}
_BATCH = 512


def _stream(seed, j: int, purpose: str) -> np.random.Generator:
    material = seed if isinstance(seed, (tuple, list)) else (seed,)
    entropy = tuple(int(s) for s in material) + (j, _PURPOSES[purpose])
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


class _ClassDraws:
    """Buffered per-class draws: arrival gaps, thinning uniforms, unit lifespans."""

    __slots__ = ("gap_rng", "life_rng", "gap_scale", "gaps", "gi",
                 "family", "shape", "lifes", "li")

    def __init__(self, seed, j: int, rate_hat: float, family: LifespanFamily,
                 shape: float | None):
        self.gap_rng = _stream(seed, j, "arrivals")
        self.life_rng = _stream(seed, j, "lifespans")
        self.gap_scale = 1.0 / rate_hat
        self.gaps = self.gap_rng.exponential(self.gap_scale, _BATCH)
        self.gi = 0
        self.family = family
        self.shape = shape
        self.lifes = _unit_batch(family, shape, self.life_rng, _BATCH)
        self.li = 0

    def gap(self) -> float:
        if self.gi == _BATCH:
            self.gaps = self.gap_rng.exponential(self.gap_scale, _BATCH)
            self.gi = 0
        g = self.gaps[self.gi]
        self.gi += 1
        return g

    def accept_uniform(self) -> float:
        return self.gap_rng.random()

    def unit_lifespan(self) -> float:
        if self.li == _BATCH:
            self.lifes = _unit_batch(self.family, self.shape, self.life_rng, _BATCH)
            self.li = 0
        v = self.lifes[self.li]
        self.li += 1
        return v


def run_replication(config: NetworkConfig, policy_spec: PolicySpec | str,
                    horizon: float, warm_up: float | None = None, seed=0, *,
                    lifespan: LifespanFamily | str = LifespanFamily.EXPONENTIAL,
                    pareto_shape: float | None = None,
                    trace: TraceSchedule | None = None,
                    bin_width: float | None = None,
                    record_trace: bool = False,
                    deep_checks: bool = False,
                    replication=None) -> MetricsAccumulator:
    """Run one seeded replication and return its metrics.

    Deterministic in (config, policy_spec, seed and the remaining controls);
    two identical calls produce bit-identical accumulators and event traces.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if warm_up is None:
        warm_up = 0.1 * horizon
    if not 0 <= warm_up < horizon:
        raise ValueError("need horizon > warm_up >= 0")
    family = LifespanFamily(lifespan)
    shape = pareto_shape if pareto_shape is not None else _DEFAULT_SHAPE.get(family)
    if family in _DEFAULT_SHAPE and shape <= 1.0:
        raise ValueError("Pareto shape must exceed 1")
    J = config.num_classes
    if trace is not None:
        if len(trace.multipliers[0]) != J:
            raise TraceFormatError(
                f"trace covers {len(trace.multipliers[0])} classes, config has {J}")
        arrivals_model = ArrivalModel(config.arrival_rate, trace)
    else:
        arrivals_model = ArrivalModel(config.arrival_rate)

    policy = make_policy(policy_spec, config)
    acc = MetricsAccumulator(policy.name, replication, horizon, warm_up, config,
                             bin_width)
    state = SystemState(config)
    tables = config.tables
    tuples_by_class = [t.tuples for t in tables]

    max_mult = [trace.max_multiplier(j) if trace else 1.0 for j in range(J)]
    draws = [_ClassDraws(seed, j, config.arrival_rate[j] * max_mult[j], family, shape)
             for j in range(J)]

    def next_arrival(j: int, t_from: float) -> float | None:
        t = t_from
        d = draws[j]
        while True:
            t += d.gap()
            if t > horizon:
                return None
            if trace is None:
                return t
            p = trace.multiplier(j, t) / max_mult[j]
            if p >= 1.0 or d.accept_uniform() < p:
                return t

    heap: list[tuple] = []
    seq = 0
    for j in range(J):
        t0 = next_arrival(j, 0.0)
        if t0 is not None:
            heappush(heap, (t0, 1, seq, j, -1, 0.0))
            seq += 1

    edge_power = 0.0
    cloud_power = 0.0
    last_t = 0.0
    events = []
    n_events = 0
    bw = bin_width
    C, N = config.sc_capacity, config.channel_capacity

    def advance(t_new: float) -> None:
        nonlocal last_t
        a = last_t if last_t > warm_up else warm_up
        b = t_new if t_new < horizon else horizon
        if b > a:
            power = edge_power + cloud_power
            acc.edge_energy += edge_power * (b - a)
            acc.cloud_energy += cloud_power * (b - a)
            if bw is not None:
                x = a
                while x < b:
                    bi = int((x - warm_up) / bw)
                    edge = min(b, warm_up + (bi + 1) * bw)
                    acc.bin_energy[bi if bi < len(acc.bin_energy) else -1] += \
                        power * (edge - x)
                    x = edge
        last_t = t_new

    def deep_verify() -> None:
        if not state.capacity_ok():
            raise SimulationInvariantError("capacity constraint violated")
        if n_events % 1000 == 0:
            sc, ch = state.recomputed_loads()
            if sc != state.sc_load or ch != state.channel_load:
                raise SimulationInvariantError("incremental loads diverged")
            ref = instantaneous_power(state, config)
            if abs(ref - (edge_power + cloud_power + config.static_power)) > \
                    1e-6 * max(1.0, ref):
                raise SimulationInvariantError("power accounting diverged")

    while heap:
        ev = heappop(heap)
        t = ev[0]
        if t > horizon:
            break
        advance(t)
        state.clock = t
        kind, j = ev[1], ev[3]
        in_window = t > warm_up
        if kind == 0:  # departure
            m, dur = ev[4], ev[5]
            tpl = tuples_by_class[j][m]
            state.depart(j, tpl)
            rec = tables[j].recs[m]
            if rec[4]:
                edge_power -= rec[5]
            else:
                cloud_power -= rec[5]
            acc.completions_total += 1
            if in_window:
                acc.completions += 1
                acc.delay_sum += dur
                if bw is not None:
                    bi = min(int((t - warm_up) / bw), len(acc.bin_completions) - 1)
                    acc.bin_completions[bi] += 1
                    acc.bin_delay[bi] += dur
            if record_trace:
                events.append(Event(t, "departure", j, tpl))
        else:  # arrival
            acc.arrivals_total += 1
            if in_window:
                acc.arrivals += 1
                acc.arrivals_by_class[j] += 1
            unit = draws[j].unit_lifespan()
            rec = policy.decide_rec(state, j)
            if rec is not None:
                i, i2, k, u, w, power, m = rec
                tpl = tuples_by_class[j][m]
                if not tuple_available(state, j, tpl):
                    raise SimulationInvariantError(
                        f"{policy.name} admitted unavailable tuple {tpl} for class {j}")
                state.admit(j, tpl)
                if w:
                    if state.sc_load[k] > C[k]:
                        raise SimulationInvariantError(f"SC group {k} over capacity")
                    edge_power += power
                else:
                    cloud_power += power
                if state.channel_load[i] > N[i] or state.channel_load[i2] > N[i2]:
                    raise SimulationInvariantError("channel over capacity")
                dur = unit / u
                heappush(heap, (t + dur, 0, seq, j, m, dur))
                seq += 1
                acc.admissions_total += 1
                if in_window:
                    acc.admissions += 1
                    key = (j, i, i2, k)
                    acc.admitted_per_tuple[key] = acc.admitted_per_tuple.get(key, 0) + 1
                if record_trace:
                    events.append(Event(t, "arrival", j, tpl))
            else:
                for cand in tuples_by_class[j]:
                    if tuple_available(state, j, cand):
                        raise SimulationInvariantError(
                            f"{policy.name} blocked class {j} while {cand} was available")
                acc.blocks_total += 1
                if in_window:
                    acc.blocks += 1
                    acc.blocks_by_class[j] += 1
                if record_trace:
                    events.append(Event(t, "arrival", j, None))
            t_next = next_arrival(j, t)
            if t_next is not None:
                heappush(heap, (t_next, 1, seq, j, -1, 0.0))
                seq += 1
        n_events += 1
        if deep_checks:
            deep_verify()

    advance(horizon)
    acc.in_flight_end = acc.admissions_total - acc.completions_total
    acc.check_flow_conservation()
    acc.events = events if record_trace else None
    acc.n_events = n_events
    return acc


@dataclass
class ExperimentReport:
    """Replication results per policy plus the aggregate/relative computations."""

    config: NetworkConfig
    policy_names: list[str]
    runs: dict[str, list[MetricsAccumulator]]
    baseline: str | None
    horizon: float
    warm_up: float

    def values(self, policy: str, metric: str) -> np.ndarray:
        return np.array([acc.metric(metric) for acc in self.runs[policy]])

    def mean(self, policy: str, metric: str) -> float:
        return float(self.values(policy, metric).mean())

    def halfwidth(self, policy: str, metric: str, level: float = 0.95) -> float:
        vals = self.values(policy, metric)
        n = len(vals)
        t_crit = stats.t.ppf(0.5 + level / 2.0, n - 1)
        return float(t_crit * vals.std(ddof=1) / math.sqrt(n))

    def conservation(self, policy: str) -> float:
        """Relative power conservation of ``policy`` against the baseline."""
        base = self.mean(self.baseline, "avg_power")
        return (base - self.mean(policy, "avg_power")) / base

    def throughput_per_watt_gain(self, policy: str) -> float:
        base = self.mean(self.baseline, "throughput_per_watt")
        return (self.mean(policy, "throughput_per_watt") - base) / base

    def timeline(self, policy: str) -> dict[str, np.ndarray] | None:
        """Per-bin series averaged over replications (empty without binning)."""
        accs = self.runs[policy]
        if accs[0].bin_energy is None:
            return None
        bw = accs[0].bin_width
        energy = np.mean([a.bin_energy for a in accs], axis=0)
        comps = np.mean([a.bin_completions for a in accs], axis=0)
        delay = np.sum([a.bin_delay for a in accs], axis=0)
        total_comps = np.sum([a.bin_completions for a in accs], axis=0)
        nbins = len(energy)
        widths = np.full(nbins, bw)
        widths[-1] = (self.horizon - self.warm_up) - bw * (nbins - 1)
        power = energy / widths
        with np.errstate(invalid="ignore", divide="ignore"):
            avg_delay = np.where(total_comps > 0, delay / np.maximum(total_comps, 1), 0.0)
            tpw = np.where(power > 0, (comps / widths) / power, 0.0)
        return {"bin_start": self.warm_up + bw * np.arange(nbins),
                "avg_power": power, "throughput_per_watt": tpw,
                "avg_delay": avg_delay}


def run_experiment(config: NetworkConfig, policy_specs: Sequence[PolicySpec | str],
                   replications: int, horizon: float, warm_up: float | None = None,
                   base_seed: int = 0, *,
                   lifespan: LifespanFamily | str = LifespanFamily.EXPONENTIAL,
                   pareto_shape: float | None = None,
                   trace: TraceSchedule | None = None,
                   bin_width: float | None = None,
                   baseline: str | None = "nrm-vne",
                   deep_checks: bool = False,
                   progress=None) -> ExperimentReport:
    """Run R seeded replications of every policy and aggregate the comparison.

    Replication r of every policy uses seed material (base_seed, r): common
    random numbers across policies for variance reduction.
    """
    if replications < 2:
        raise ValueError("need at least 2 replications")
    specs = [PolicySpec(s) if isinstance(s, str) else s for s in policy_specs]
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate policy names in experiment")
    if baseline is not None and baseline not in names:
        raise ValueError(f"relative metrics requested but baseline {baseline!r} "
                         "is not in the policy list")
    if warm_up is None:
        warm_up = 0.1 * horizon
    runs: dict[str, list[MetricsAccumulator]] = {}
    for spec in specs:
        accs = []
        for r in range(replications):
            acc = run_replication(config, spec, horizon, warm_up,
                                  seed=(base_seed, r), lifespan=lifespan,
                                  pareto_shape=pareto_shape, trace=trace,
                                  bin_width=bin_width, deep_checks=deep_checks,
                                  replication=r)
            accs.append(acc)
            if progress is not None:
                progress(spec.name, r)
        runs[spec.name] = accs
    return ExperimentReport(config=config, policy_names=names, runs=runs,
                            baseline=baseline, horizon=horizon, warm_up=warm_up)
