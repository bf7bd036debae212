"""Admission policies: the HEE-ACC family and the MRR / NRM-VNE baselines.

Every policy answers one question per class-j arrival: which eligible
(start channel, end channel, SC group) tuple takes the task, or Block when
none has room.  Blocking is legal only when the availability set is empty;
the engine re-verifies that independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .bandit import (CapacityCoefficients, DualPoint, class_order, compute_nu_star,
                     subgradient_eta, subgradient_gamma)
from .model import ConfigError, NetworkConfig, ResourceTuple, SystemState

POLICY_NAMES = ("hee-acc", "hee-acc-zero", "hee-alrn", "mrr", "nrm-vne")


@dataclass(frozen=True)
class PolicyDecision:
    """Either Admit(tuple) or Block (tuple is None)."""

    tuple: ResourceTuple | None

    @property
    def is_admit(self) -> bool:
        return self.tuple is not None

    @classmethod
    def admit(cls, tpl: ResourceTuple) -> "PolicyDecision":
        return cls(tpl)

    @classmethod
    def block(cls) -> "PolicyDecision":
        return cls(None)


BLOCK = PolicyDecision(None)


@dataclass(frozen=True)
class PolicySpec:
    """Policy selection by name plus its parameter block (scenario-file form)."""

    name: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in POLICY_NAMES:
            raise ConfigError(f"unknown policy {self.name!r}; expected one of {POLICY_NAMES}")


def _first_available(state: SystemState, recs) -> tuple | None:
    """First record whose admission keeps all capacity tests satisfied."""
    config = state.config
    sc, ch = state.sc_load, state.channel_load
    C, N = config.sc_capacity, config.channel_capacity
    for rec in recs:
        i, i2, k, _u, w, _p, _m = rec
        if w and sc[k] + w > C[k]:
            continue
        if i == i2:
            if ch[i] + 2 > N[i]:
                continue
        elif ch[i] + 1 > N[i] or ch[i2] + 1 > N[i2]:
            continue
        return rec
    return None


class HeeAccPolicy:
    """Index policy with given capacity coefficients: lowest psi first.

    Ties go to the largest u (shortest expected lifespan), then the fixed
    (k, i, i') order.  The per-class ordering is cached against the
    coefficients' version so unchanged coefficients never re-sort.
    """

    name = "hee-acc"

    def __init__(self, config: NetworkConfig, coeffs: CapacityCoefficients | None = None):
        self.config = config
        self.coeffs = coeffs if coeffs is not None else CapacityCoefficients.zeros(config)
        self._orders: dict[int, tuple[int, list]] = {}

    def order(self, j: int) -> list:
        cached = self._orders.get(j)
        if cached is not None and cached[0] == self.coeffs.version:
            return cached[1]
        table = self.config.tables[j]
        if not self.coeffs.gamma.any() and not self.coeffs.eta.any():
            positions = table.base_order
        else:
            positions, _ = class_order(j, self.coeffs, self.config)
        recs = [table.recs[m] for m in positions]
        self._orders[j] = (self.coeffs.version, recs)
        return recs

    def decide_rec(self, state: SystemState, j: int):
        return _first_available(state, self.order(j))

    def decide(self, state: SystemState, j: int) -> PolicyDecision:
        rec = self.decide_rec(state, j)
        return PolicyDecision.admit(ResourceTuple(rec[0], rec[1], rec[2])) if rec else BLOCK


class HeeAccZeroPolicy(HeeAccPolicy):
    """HEE-ACC with zero coefficients: pure energy-efficiency ordering."""

    name = "hee-acc-zero"

    def __init__(self, config: NetworkConfig):
        super().__init__(config, CapacityCoefficients.zeros(config))


@dataclass
class LearnerState:
    """Mutable state of the coefficient learner.

    ``violation_counters[n]`` tracks SC-group n (n < K) or channel n - K
    capacity-test violations; each counter resets to zero the moment it
    reaches ``m_bar``, which queues an increment adjustment.
    """

    coefficients: CapacityCoefficients
    violation_counters: np.ndarray
    delta_gamma: float = 2.0
    delta_eta: float = 2.0
    delta_gamma_plus: float = 2.0
    delta_eta_plus: float = 2.0
    m_bar: int = 100
    dual_cache: dict[bytes, DualPoint] = field(default_factory=dict)

    @classmethod
    def fresh(cls, config: NetworkConfig, coeffs: CapacityCoefficients | None = None,
              **hyper) -> "LearnerState":
        coeffs = coeffs if coeffs is not None else CapacityCoefficients.zeros(config)
        return cls(coefficients=coeffs,
                   violation_counters=np.zeros(config.num_sc_groups + config.num_channels,
                                               dtype=np.int64),
                   **hyper)

    def dual(self, config: NetworkConfig) -> DualPoint:
        key = self.coefficients.key()
        dual = self.dual_cache.get(key)
        if dual is None:
            dual = compute_nu_star(self.coefficients, config)
            if len(self.dual_cache) > 8192:
                self.dual_cache.clear()
            self.dual_cache[key] = dual
        return dual


class HeeAlrnPolicy:
    """HEE-ACC with coefficients learned online from capacity-test violations.

    Walks the arriving class's index order; each examined tuple that fails a
    capacity test bumps the violation counter of every violated constraint
    (a same-channel i = i' tuple charges its channel twice, matching the
    double-orientation load accounting).  Admitting a tuple applies the
    decrement adjustment to its group and channels.  A counter reaching
    m_bar resets and, after the walk, raises the matching coefficient iff
    the dual sub-gradient at nu*(gamma, eta) is positive.
    """

    name = "hee-alrn"

    def __init__(self, config: NetworkConfig, learner: LearnerState | None = None):
        self.config = config
        self.learner = learner if learner is not None else LearnerState.fresh(config)
        self._orders: dict[int, tuple[int, list]] = {}

    def order(self, j: int) -> list:
        coeffs = self.learner.coefficients
        cached = self._orders.get(j)
        if cached is not None and cached[0] == coeffs.version:
            return cached[1]
        table = self.config.tables[j]
        if not coeffs.gamma.any() and not coeffs.eta.any():
            positions = table.base_order
        else:
            positions, _ = class_order(j, coeffs, self.config)
        recs = [table.recs[m] for m in positions]
        self._orders[j] = (coeffs.version, recs)
        return recs

    def _bump(self, n: int, pending: list[int]) -> None:
        counters = self.learner.violation_counters
        counters[n] += 1
        if counters[n] >= self.learner.m_bar:
            counters[n] = 0
            pending.append(n)

    def decide_rec(self, state: SystemState, j: int):
        config = self.config
        learner = self.learner
        K = config.num_sc_groups
        sc, ch = state.sc_load, state.channel_load
        C, N = config.sc_capacity, config.channel_capacity
        pending: list[int] = []
        chosen = None
        for rec in self.order(j):
            i, i2, k, _u, w, _p, _m = rec
            ok = True
            if w and sc[k] + w > C[k]:
                self._bump(k, pending)
                ok = False
            if i == i2:
                if ch[i] + 2 > N[i]:
                    self._bump(K + i, pending)
                    self._bump(K + i, pending)
                    ok = False
            else:
                if ch[i] + 1 > N[i]:
                    self._bump(K + i, pending)
                    ok = False
                if ch[i2] + 1 > N[i2]:
                    self._bump(K + i2, pending)
                    ok = False
            if ok:
                chosen = rec
                break
        coeffs = learner.coefficients
        if chosen is not None:
            i, i2, k, _u, w, _p, _m = chosen
            if w:
                coeffs.decrement_gamma(k, learner.delta_gamma)
            coeffs.decrement_eta(i, learner.delta_eta)
            coeffs.decrement_eta(i2, learner.delta_eta)
        for n in pending:
            dual = learner.dual(config)
            if n < K:
                if subgradient_gamma(n, dual, config) > 0:
                    coeffs.increment_gamma(n, learner.delta_gamma_plus)
            else:
                if subgradient_eta(n - K, dual, config) > 0:
                    coeffs.increment_eta(n - K, learner.delta_eta_plus)
        return chosen

    def decide(self, state: SystemState, j: int) -> PolicyDecision:
        rec = self.decide_rec(state, j)
        return PolicyDecision.admit(ResourceTuple(rec[0], rec[1], rec[2])) if rec else BLOCK


class MrrPolicy:
    """Maximum expected revenue rate baseline.

    Tuple values are state-independent, so the preference order is computed
    once: descending revenue, ties by largest u then the fixed tuple order.
    """

    name = "mrr"

    def __init__(self, config: NetworkConfig):
        self.config = config
        self._orders: list[list] = []
        for j in range(config.num_classes):
            table = config.tables[j]
            values = np.array([mrr_value(j, tpl, config) for tpl in table.tuples])
            pos = np.lexsort((table.i2, table.i, table.k, -table.u, -values))
            self._orders.append([table.recs[m] for m in pos])

    def decide_rec(self, state: SystemState, j: int):
        return _first_available(state, self._orders[j])

    def decide(self, state: SystemState, j: int) -> PolicyDecision:
        rec = self.decide_rec(state, j)
        return PolicyDecision.admit(ResourceTuple(rec[0], rec[1], rec[2])) if rec else BLOCK


def mrr_value(j: int, tpl: ResourceTuple, config: NetworkConfig) -> float:
    """Instantaneous revenue per unit requirement of serving class j on ``tpl``."""
    u = config.service_rate(j, *tpl)
    if u <= 0.0:
        raise ConfigError(f"tuple {tpl} is not eligible for class {j}")
    lam = config.arrival_rate[j]
    if tpl.sc_group == config.cloud_group:
        w = config.cloud_occupancy_proxy(j)
        return -(lam * u * config.cloud_energy_rate[j]) / ((lam + u) * (w + 2))
    w = config.occupancy_requirement[j][tpl.sc_group]
    return -(lam * w * config.edge_operational_power[tpl.sc_group]) / ((lam + u) * (w + 2))


class NrmVnePolicy:
    """Node-ranking baseline: largest product of remaining capacities.

    The cloud group's SC factor is a fixed constant (max C_k + 1 unless the
    scenario overrides it) so it ranks deterministically against edge groups.
    """

    name = "nrm-vne"

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.cloud_factor = (config.nrm_cloud_capacity
                             if config.nrm_cloud_capacity is not None
                             else max(config.sc_capacity) + 1)

    def decide_rec(self, state: SystemState, j: int):
        config = self.config
        sc, ch = state.sc_load, state.channel_load
        C, N = config.sc_capacity, config.channel_capacity
        best = None
        best_score = None
        for rec in config.tables[j].recs:
            i, i2, k, u, w, _p, _m = rec
            if w:
                room = C[k] - sc[k]
                if room < w:
                    continue
            else:
                room = self.cloud_factor
            if i == i2:
                if ch[i] + 2 > N[i]:
                    continue
            elif ch[i] + 1 > N[i] or ch[i2] + 1 > N[i2]:
                continue
            score = (room * (N[i] - ch[i]) * (N[i2] - ch[i2]), u)
            if best_score is None or score > best_score:
                best, best_score = rec, score
        return best

    def decide(self, state: SystemState, j: int) -> PolicyDecision:
        rec = self.decide_rec(state, j)
        return PolicyDecision.admit(ResourceTuple(rec[0], rec[1], rec[2])) if rec else BLOCK


def make_policy(spec: PolicySpec | str, config: NetworkConfig):
    """Build a fresh policy instance (one per simulation run) from its spec."""
    if isinstance(spec, str):
        spec = PolicySpec(spec)
    p = spec.params
    K, I = config.num_sc_groups, config.num_channels
    if spec.name == "hee-acc":
        coeffs = CapacityCoefficients(p.get("gamma", [0.0] * K), p.get("eta", [0.0] * I))
        return HeeAccPolicy(config, coeffs)
    if spec.name == "hee-acc-zero":
        return HeeAccZeroPolicy(config)
    if spec.name == "hee-alrn":
        coeffs = CapacityCoefficients(p.get("gamma0", [0.0] * K), p.get("eta0", [0.0] * I))
        learner = LearnerState.fresh(
            config, coeffs,
            delta_gamma=float(p.get("delta_gamma", 2.0)),
            delta_eta=float(p.get("delta_eta", 2.0)),
            delta_gamma_plus=float(p.get("delta_gamma_plus", 2.0)),
            delta_eta_plus=float(p.get("delta_eta_plus", 2.0)),
            m_bar=int(p.get("m_bar", 100)))
        return HeeAlrnPolicy(config, learner)
    if spec.name == "mrr":
        return MrrPolicy(config)
    if spec.name == "nrm-vne":
        return NrmVnePolicy(config)
    raise ConfigError(f"unknown policy {spec.name!r}")


# Functional forms of the decision rules (the policy classes add caching on top).

def hee_acc_decide(j: int, state: SystemState, coeffs: CapacityCoefficients,
                   config: NetworkConfig) -> PolicyDecision:
    return HeeAccPolicy(config, coeffs).decide(state, j)


def hee_acc_zero_decide(j: int, state: SystemState, config: NetworkConfig) -> PolicyDecision:
    return HeeAccZeroPolicy(config).decide(state, j)


def hee_alrn_decide(j: int, state: SystemState, learner: LearnerState,
                    config: NetworkConfig) -> tuple[PolicyDecision, LearnerState]:
    decision = HeeAlrnPolicy(config, learner).decide(state, j)
    return decision, learner


def mrr_decide(j: int, state: SystemState, config: NetworkConfig) -> PolicyDecision:
    return MrrPolicy(config).decide(state, j)


def nrm_vne_decide(j: int, state: SystemState, config: NetworkConfig) -> PolicyDecision:
    return NrmVnePolicy(config).decide(state, j)
