"""Network model: static configuration, system state, feasibility and power accounting.

Index conventions (everywhere in this package): channels ``0..I-1``, task
classes ``0..J-1``, edge SC groups ``0..K-1``, and the cloud is the extra
group index ``K`` (``NetworkConfig.cloud_group``).  Scenario files and the
CLI speak 1-based ids with ``K+1`` (or the word ``cloud``) for the cloud;
the translation happens at the file boundary only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple

import numpy as np


class ConfigError(ValueError):
    """Raised when a network configuration violates a structural invariant."""


class ResourceTuple(NamedTuple):
    """A (starting channel, ending channel, SC group) reservation for one task."""

    start_channel: int
    end_channel: int
    sc_group: int


@dataclass(frozen=True)
class ChannelPhysics:
    """Inputs of the achievable-rate formula for one (channel, class) pair.

    Only used by the optional rate derivation; scenarios normally specify
    service rates directly.
    """

    bandwidth: float          # Hz
    transmit_power: float     # W
    channel_gain: float       # dimensionless
    noise_power: float        # W
    snr_threshold: float = 100.0  # linear ratio, i.e. 20 dB

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")
        if self.noise_power <= 0:
            raise ConfigError("noise power must be positive")
        if self.transmit_power < 0:
            raise ConfigError("transmit power must be non-negative")
        if self.channel_gain <= 0:
            raise ConfigError("channel gain must be positive")
        if self.snr_threshold != 100.0:
            raise ConfigError("snr threshold is fixed at 100 (20 dB)")


def transmission_rate(phys: ChannelPhysics) -> float:
    """Achievable rate B*log2(1 + SNR), or exactly 0 below the 20 dB threshold."""
    snr = phys.transmit_power * phys.channel_gain / phys.noise_power
    if snr < phys.snr_threshold:
        return 0.0
    return phys.bandwidth * math.log2(1.0 + snr)


class _ClassTable:
    """Per-class flat view of the eligible tuples, precomputed for the hot paths.

    ``w`` is 0 for cloud tuples (no SC occupancy is charged there) and
    ``power`` is the instantaneous power contribution of one in-flight task
    on that tuple (eps_k * w for edge, cloud_energy_rate * u for cloud).
    """

    __slots__ = ("class_id", "n", "i", "i2", "k", "u", "w", "power", "ratio",
                 "mult", "cap", "recs", "base_order", "tuples")

    def __init__(self, class_id: int, config: "NetworkConfig"):
        cloud = config.cloud_group
        lam = config.arrival_rate[class_id]
        rows = [(i, i2, k, u) for (j, i, i2, k), u in config.service_rate_map.items()
                if j == class_id]
        rows.sort(key=lambda r: (r[2], r[0], r[1]))
        self.class_id = class_id
        self.n = len(rows)
        self.i = np.array([r[0] for r in rows], dtype=np.int64)
        self.i2 = np.array([r[1] for r in rows], dtype=np.int64)
        self.k = np.array([r[2] for r in rows], dtype=np.int64)
        self.u = np.array([r[3] for r in rows], dtype=np.float64)
        w = []
        power = []
        ratio = []
        cap = []
        for i, i2, k, u in rows:
            if k == cloud:
                w.append(0)
                power.append(config.cloud_energy_rate[class_id] * u)
                ratio.append(lam * config.cloud_energy_rate[class_id])
                cap.append(min(config.channel_capacity[i], config.channel_capacity[i2]))
            else:
                wk = config.occupancy_requirement[class_id][k]
                w.append(wk)
                power.append(config.edge_operational_power[k] * wk)
                ratio.append((lam / u) * config.edge_operational_power[k] * wk)
                cap.append(min(config.sc_capacity[k] // wk,
                               config.channel_capacity[i], config.channel_capacity[i2]))
        self.w = np.array(w, dtype=np.int64)
        self.power = np.array(power, dtype=np.float64)
        self.ratio = np.array(ratio, dtype=np.float64)
        self.mult = 1.0 + lam / self.u
        self.cap = np.array(cap, dtype=np.int64)
        # hot-loop records: (i, i2, k, u, w, power, m); w == 0 marks the cloud
        self.recs = [(int(self.i[m]), int(self.i2[m]), int(self.k[m]),
                      float(self.u[m]), int(self.w[m]), float(self.power[m]), m)
                     for m in range(self.n)]
        self.tuples = [ResourceTuple(r[0], r[1], r[2]) for r in self.recs]
        # ascending (ratio, -u, k, i, i2): the zero-coefficient index order
        self.base_order = np.lexsort((self.i2, self.i, self.k, -self.u, self.ratio))

    def psi(self, gamma_ext: np.ndarray, eta: np.ndarray) -> np.ndarray:
        """Index values for every eligible tuple under the given coefficients.

        ``gamma_ext`` has a trailing 0 entry for the cloud group, whose w is
        also 0, so the cloud term reduces to eta_i + eta_i'.
        """
        return self.ratio + self.mult * (self.w * gamma_ext[self.k]
                                         + eta[self.i] + eta[self.i2])


@dataclass(frozen=True)
class NetworkConfig:
    """Full static description of the MEC network.

    ``occupancy_requirement[j][k]`` is the SC units a class-j task occupies on
    edge group k, or ``None`` when the pair is forbidden.  ``service_rates``
    holds strictly positive rates ``u_j(i, i', k)`` keyed ``(j, i, i', k)``;
    any absent tuple is ineligible.  The cloud group ``K`` never appears in
    ``sc_capacity`` (its capacity is unbounded).
    """

    num_sc_groups: int
    num_channels: int
    num_classes: int
    num_areas: int
    sc_capacity: tuple[int, ...]
    channel_capacity: tuple[int, ...]
    occupancy_requirement: tuple[tuple[int | None, ...], ...]
    service_rates: tuple[tuple[tuple[int, int, int, int], float], ...]
    arrival_rate: tuple[float, ...]
    edge_operational_power: tuple[float, ...]
    edge_static_power: tuple[float, ...]
    cloud_energy_rate: tuple[float, ...]
    cloud_backhaul_delay: float = 0.0
    area_map: tuple[int, ...] = ()
    mrr_cloud_occupancy: tuple[int, ...] | None = None
    nrm_cloud_capacity: int | None = None

    @property
    def cloud_group(self) -> int:
        return self.num_sc_groups

    @staticmethod
    def build(*, service_rates: dict[tuple[int, int, int, int], float],
              **kwargs) -> "NetworkConfig":
        """Construct from a plain dict of service rates (zero entries dropped)."""
        entries = tuple(sorted((key, float(u)) for key, u in service_rates.items()
                               if u != 0.0))
        return NetworkConfig(service_rates=entries, **kwargs)

    def __post_init__(self):
        K, I, J, L = (self.num_sc_groups, self.num_channels,
                      self.num_classes, self.num_areas)
        if min(K, I, J, L) < 1:
            raise ConfigError("K, I, J, L must all be at least 1")
        if len(self.sc_capacity) != K or any(c < 1 for c in self.sc_capacity):
            raise ConfigError("need K SC capacities, all >= 1")
        if len(self.channel_capacity) != I or any(n < 1 for n in self.channel_capacity):
            raise ConfigError("need I channel capacities, all >= 1")
        if len(self.occupancy_requirement) != J or any(
                len(row) != K for row in self.occupancy_requirement):
            raise ConfigError("occupancy_requirement must be J x K")
        for j, row in enumerate(self.occupancy_requirement):
            for k, w in enumerate(row):
                if w is None:
                    continue
                if not 1 <= w <= self.sc_capacity[k]:
                    raise ConfigError(
                        f"occupancy w[{j}][{k}]={w} outside 1..C_{k}={self.sc_capacity[k]}")
        for name, vec, m in (("arrival_rate", self.arrival_rate, J),
                             ("edge_operational_power", self.edge_operational_power, K),
                             ("edge_static_power", self.edge_static_power, K),
                             ("cloud_energy_rate", self.cloud_energy_rate, J)):
            if len(vec) != m:
                raise ConfigError(f"{name} must have length {m}")
            if any(not math.isfinite(v) or v < 0 for v in vec):
                raise ConfigError(f"{name} entries must be finite and non-negative")
        if any(lam <= 0 for lam in self.arrival_rate):
            raise ConfigError("arrival rates must be positive")
        if self.area_map and (len(self.area_map) != K or any(
                not 0 <= a < L for a in self.area_map)):
            raise ConfigError("area_map must assign each edge group an area in 0..L-1")
        cloud = self.cloud_group
        for (j, i, i2, k), u in self.service_rates:
            if not (0 <= j < J and 0 <= i < I and 0 <= i2 < I and 0 <= k <= cloud):
                raise ConfigError(f"service rate key out of range: {(j, i, i2, k)}")
            if not math.isfinite(u) or u <= 0:
                raise ConfigError(f"service rate for {(j, i, i2, k)} must be positive")
            if k < K and self.occupancy_requirement[j][k] is None:
                raise ConfigError(
                    f"u > 0 for forbidden pair (class {j}, group {k})")
        if self.mrr_cloud_occupancy is not None and len(self.mrr_cloud_occupancy) != J:
            raise ConfigError("mrr_cloud_occupancy must have one entry per class")

    @cached_property
    def service_rate_map(self) -> dict[tuple[int, int, int, int], float]:
        return dict(self.service_rates)

    def service_rate(self, j: int, i: int, i2: int, k: int) -> float:
        """u_j(i, i', k); 0.0 encodes ineligibility."""
        return self.service_rate_map.get((j, i, i2, k), 0.0)

    @cached_property
    def tables(self) -> tuple[_ClassTable, ...]:
        return tuple(_ClassTable(j, self) for j in range(self.num_classes))

    @cached_property
    def static_power(self) -> float:
        return float(sum(self.edge_static_power))

    def class_tuples(self, j: int) -> list[ResourceTuple]:
        """Eligible tuples of class j in the deterministic (k, i, i') order."""
        return list(self.tables[j].tuples)

    def cloud_occupancy_proxy(self, j: int) -> int:
        """w_{j,K+1} stand-in used by the MRR denominator (configurable)."""
        if self.mrr_cloud_occupancy is not None:
            return self.mrr_cloud_occupancy[j]
        best = None
        for k in range(self.num_sc_groups):
            w = self.occupancy_requirement[j][k]
            if w is None:
                continue
            if any(key[0] == j and key[3] == k for key, _ in self.service_rates):
                cost = self.edge_operational_power[k] * w
                if best is None or cost < best[0]:
                    best = (cost, w)
        return best[1] if best is not None else 1


def cloud_duration(mu_ij: float, config: NetworkConfig) -> float:
    """Expected edge-to-cloud task duration 1/mu + D_0."""
    if mu_ij <= 0:
        raise ConfigError("cloud transmission rate must be positive")
    return 1.0 / mu_ij + config.cloud_backhaul_delay


class SystemState:
    """Mutable occupancy state of one simulation run.

    ``counts`` maps (j, i, i', k) to in-flight task counts; ``sc_load`` and
    ``channel_load`` are the derived loads kept incrementally in sync.  A task
    with i == i' consumes two sub-channel slots on its single channel (the
    channel load formula counts both orientations).
    """

    __slots__ = ("config", "counts", "sc_load", "channel_load", "clock")

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.counts: dict[tuple[int, int, int, int], int] = {}
        self.sc_load = [0] * config.num_sc_groups
        self.channel_load = [0] * config.num_channels
        self.clock = 0.0

    def occupancy(self, j: int, tpl: ResourceTuple) -> int:
        return self.counts.get((j, *tpl), 0)

    def _shift(self, j: int, tpl: ResourceTuple, delta: int) -> None:
        key = (j, tpl.start_channel, tpl.end_channel, tpl.sc_group)
        new = self.counts.get(key, 0) + delta
        if new < 0:
            raise ValueError(f"negative occupancy for {key}")
        if new:
            self.counts[key] = new
        else:
            self.counts.pop(key, None)
        if tpl.sc_group < self.config.num_sc_groups:
            w = self.config.occupancy_requirement[j][tpl.sc_group]
            self.sc_load[tpl.sc_group] += delta * w
        if tpl.start_channel == tpl.end_channel:
            self.channel_load[tpl.start_channel] += 2 * delta
        else:
            self.channel_load[tpl.start_channel] += delta
            self.channel_load[tpl.end_channel] += delta

    def admit(self, j: int, tpl: ResourceTuple) -> None:
        self._shift(j, tpl, +1)

    def depart(self, j: int, tpl: ResourceTuple) -> None:
        self._shift(j, tpl, -1)

    def recomputed_loads(self) -> tuple[list[int], list[int]]:
        """From-scratch loads; must always equal the incremental ones."""
        sc = [0] * self.config.num_sc_groups
        ch = [0] * self.config.num_channels
        for (j, i, i2, k), x in self.counts.items():
            if k < self.config.num_sc_groups:
                sc[k] += self.config.occupancy_requirement[j][k] * x
            if i == i2:
                ch[i] += 2 * x
            else:
                ch[i] += x
                ch[i2] += x
        return sc, ch

    def capacity_ok(self) -> bool:
        return (all(load <= cap for load, cap in zip(self.sc_load, self.config.sc_capacity))
                and all(load <= cap for load, cap
                        in zip(self.channel_load, self.config.channel_capacity)))


def tuple_available(state: SystemState, j: int, tpl: ResourceTuple) -> bool:
    """Whether admitting one class-j task on ``tpl`` keeps every capacity test."""
    config = state.config
    if config.service_rate(j, *tpl) <= 0.0:
        return False
    i, i2, k = tpl
    if k < config.num_sc_groups:
        w = config.occupancy_requirement[j][k]
        if state.sc_load[k] + w > config.sc_capacity[k]:
            return False
    if i == i2:
        return state.channel_load[i] + 2 <= config.channel_capacity[i]
    return (state.channel_load[i] + 1 <= config.channel_capacity[i]
            and state.channel_load[i2] + 1 <= config.channel_capacity[i2])


def available_tuples(state: SystemState, j: int,
                     config: NetworkConfig | None = None) -> set[ResourceTuple]:
    """The availability set: eligible tuples that can take one more class-j task."""
    config = config or state.config
    return {tpl for tpl in config.tables[j].tuples if tuple_available(state, j, tpl)}


def instantaneous_power(state: SystemState, config: NetworkConfig | None = None) -> float:
    """Current power draw in watts: edge occupancy + static + cloud terms."""
    config = config or state.config
    total = config.static_power
    for (j, i, i2, k), x in state.counts.items():
        if k < config.num_sc_groups:
            total += config.edge_operational_power[k] \
                * config.occupancy_requirement[j][k] * x
        else:
            total += config.cloud_energy_rate[j] * config.service_rate(j, i, i2, k) * x
    return total
