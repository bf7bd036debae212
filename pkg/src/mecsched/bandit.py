"""Restless-bandit core: tuple indices, sub-problem chains, dual point and sub-gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ConfigError, NetworkConfig, ResourceTuple

# Interval width for the alpha bisections; tight enough that the binding
# constraint's left-hand side lands within 1e-9 of its bound.
_BISECT_TOL = 1e-12
_BIND_TOL = 1e-9


class CapacityCoefficients:
    """The (gamma, eta) multiplier vectors with projection onto the non-negative orthant.

    ``version`` increments only on actual value changes, so index orderings
    cached against it stay valid through no-op adjustments.
    """

    __slots__ = ("gamma", "eta", "version")

    def __init__(self, gamma: Sequence[float], eta: Sequence[float]):
        self.gamma = np.asarray(gamma, dtype=np.float64).copy()
        self.eta = np.asarray(eta, dtype=np.float64).copy()
        if (self.gamma < 0).any() or (self.eta < 0).any():
            raise ValueError("capacity coefficients must be non-negative")
        self.version = 0

    @classmethod
    def zeros(cls, config: NetworkConfig) -> "CapacityCoefficients":
        return cls(np.zeros(config.num_sc_groups), np.zeros(config.num_channels))

    def copy(self) -> "CapacityCoefficients":
        return CapacityCoefficients(self.gamma, self.eta)

    def _set(self, vec: np.ndarray, idx: int, value: float) -> None:
        if vec[idx] != value:
            vec[idx] = value
            self.version += 1

    def decrement_gamma(self, k: int, delta: float) -> None:
        self._set(self.gamma, k, max(0.0, self.gamma[k] - delta))

    def decrement_eta(self, i: int, delta: float) -> None:
        self._set(self.eta, i, max(0.0, self.eta[i] - delta))

    def increment_gamma(self, k: int, delta: float) -> None:
        self._set(self.gamma, k, self.gamma[k] + delta)

    def increment_eta(self, i: int, delta: float) -> None:
        self._set(self.eta, i, self.eta[i] + delta)

    def key(self) -> bytes:
        return self.gamma.tobytes() + self.eta.tobytes()


def energy_efficiency_ratio(j: int, tpl: ResourceTuple, config: NetworkConfig) -> float:
    """Expected power per unit service rate of serving class j on ``tpl``.

    (lambda_j / u) * eps_k * w for an edge group; lambda_j * cloud rate for
    the cloud.  Lower means more energy-efficient.
    """
    u = config.service_rate(j, *tpl)
    if u <= 0.0:
        raise ConfigError(f"tuple {tpl} is not eligible for class {j}")
    lam = config.arrival_rate[j]
    if tpl.sc_group == config.cloud_group:
        return lam * config.cloud_energy_rate[j]
    w = config.occupancy_requirement[j][tpl.sc_group]
    return (lam / u) * config.edge_operational_power[tpl.sc_group] * w


def index(j: int, tpl: ResourceTuple, coeffs: CapacityCoefficients,
          config: NetworkConfig) -> float:
    """Marginal cost psi of assigning a class-j task to ``tpl`` under (gamma, eta)."""
    u = config.service_rate(j, *tpl)
    if u <= 0.0:
        raise ConfigError(f"tuple {tpl} is not eligible for class {j}")
    lam = config.arrival_rate[j]
    if tpl.sc_group == config.cloud_group:
        extra = coeffs.eta[tpl.start_channel] + coeffs.eta[tpl.end_channel]
    else:
        w = config.occupancy_requirement[j][tpl.sc_group]
        extra = (w * coeffs.gamma[tpl.sc_group]
                 + coeffs.eta[tpl.start_channel] + coeffs.eta[tpl.end_channel])
    return energy_efficiency_ratio(j, tpl, config) + (1.0 + lam / u) * extra


def class_order(j: int, coeffs: CapacityCoefficients | None,
                config: NetworkConfig) -> tuple[np.ndarray, np.ndarray]:
    """(order, psi) for class j: positions into the class table, ascending by
    (psi, -u, k, i, i')."""
    table = config.tables[j]
    if coeffs is None:
        return table.base_order, table.ratio
    gamma_ext = np.append(coeffs.gamma, 0.0)
    psi = table.psi(gamma_ext, coeffs.eta)
    order = np.lexsort((table.i2, table.i, table.k, -table.u, psi))
    return order, psi


@dataclass(frozen=True)
class IndexTable:
    """Deterministic pop order over the eligible tuples of one class.

    ``entries`` is a tuple of (psi, tuple) pairs sorted ascending by psi with
    ties broken by largest u, then (k, i, i').
    """

    class_id: int
    entries: tuple[tuple[float, ResourceTuple], ...]

    @classmethod
    def build(cls, j: int, coeffs: CapacityCoefficients,
              config: NetworkConfig) -> "IndexTable":
        table = config.tables[j]
        order, psi = class_order(j, coeffs, config)
        return cls(j, tuple((float(psi[m]), table.tuples[m]) for m in order))

    def pop_order(self) -> list[ResourceTuple]:
        return [tpl for _, tpl in self.entries]


def stationary_distribution(alpha: Sequence[float], lam: float, u: float,
                            state_cap: int | None = None) -> np.ndarray:
    """Stationary law of the birth-death chain with birth lam*alpha(x), death x*u.

    Detailed balance gives pi(x+1)*(x+1)*u = pi(x)*lam*alpha(x); the weights
    are accumulated iteratively with on-the-fly renormalisation so large
    lam/u ratios cannot overflow.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if state_cap is None:
        state_cap = len(alpha) - 1
    if lam <= 0 or u <= 0:
        raise ValueError("lam and u must be positive")
    if len(alpha) < state_cap + 1:
        raise ValueError("alpha must cover states 0..state_cap")
    if ((alpha < 0) | (alpha > 1)).any():
        raise ValueError("action variables must lie in [0, 1]")
    weights = np.zeros(state_cap + 1)
    weights[0] = 1.0
    w = 1.0
    for x in range(state_cap):
        w = w * lam * alpha[x] / ((x + 1) * u)
        if w > 1e250:
            weights[:x + 1] /= w
            w = 1.0
        weights[x + 1] = w
    return weights / weights.sum()


@dataclass(frozen=True)
class SubProblemPolicy:
    """Randomised action variables of the decomposed sub-problems.

    Tuples absent from ``alpha`` have alpha identically zero (their chains
    never leave state 0).
    """

    alpha: dict[tuple[int, int, int, int], np.ndarray]

    def action_variables(self, j: int, tpl: ResourceTuple) -> np.ndarray | None:
        return self.alpha.get((j, *tpl))


@dataclass(frozen=True)
class DualPoint:
    """nu*(gamma, eta) with the saturation flags and the policy that realises it."""

    nu: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray
    flags: np.ndarray          # f_j: 0 once Constraint (8) bound for class j, else -1
    policy: SubProblemPolicy


def _min_a(g0: float, g1: float, g, bound: float) -> float:
    """Smallest a in [0, 1] with g(a) = bound for non-decreasing g, else 1."""
    if g0 >= bound - _BIND_TOL * max(1.0, abs(bound)):
        return 0.0
    if g1 <= bound:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > _BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if g(mid) >= bound:
            hi = mid
        else:
            lo = mid
    return hi


def compute_nu_star(coeffs: CapacityCoefficients, config: NetworkConfig) -> DualPoint:
    """Greedy computation of nu*(gamma, eta) and its sub-problem action variables.

    All tuples are ranked by ascending index (ties: largest u, then the fixed
    (k, i, i', class) order) and their alpha values raised state by state
    until one of the relaxed constraints binds: the class's admission budget
    caps alpha through a1, the SC-group occupancy through a2 and the two
    channel occupancies through a3.  A class saturates, fixing nu*_j to the
    index of the tuple under processing, when its admission budget reaches 1;
    an SC or channel budget binding only zeroes the rest of the current
    tuple.  Constraint left-hand sides are evaluated through the exact
    birth-death stationary laws of the already-assigned action variables.
    """
    J, K, I = config.num_classes, config.num_sc_groups, config.num_channels
    cloud = config.cloud_group
    gamma_ext = np.append(coeffs.gamma, 0.0)
    ranked = []
    for j in range(J):
        table = config.tables[j]
        if table.n == 0:
            raise ConfigError(f"class {j} has no eligible tuple")
        psi = table.psi(gamma_ext, coeffs.eta)
        for m in range(table.n):
            ranked.append((psi[m], -table.u[m], int(table.k[m]), int(table.i[m]),
                           int(table.i2[m]), j, m))
    ranked.sort()

    s8 = np.zeros(J)      # per-class admission budget used, Constraint (8)
    s9 = np.zeros(K)      # per-group weighted occupancy, Constraint (9)
    s10 = np.zeros(I)     # per-channel occupancy (both orientations), Constraint (10)
    flags = np.full(J, -1, dtype=np.int64)
    nu = np.zeros(J)
    alpha: dict[tuple[int, int, int, int], np.ndarray] = {}
    saturated = 0

    for psi, _, k, i, i2, j, m in ranked:
        if flags[j] == 0:
            continue
        nu[j] = psi
        table = config.tables[j]
        lam = config.arrival_rate[j]
        u = float(table.u[m])
        w = int(table.w[m])
        cap = int(table.cap[m])
        chan_mult = 2.0 if i == i2 else 1.0

        avec = np.zeros(cap + 1)
        q = 1.0          # weight of the current state x
        z0 = 1.0         # sum of weights over 0..x
        a8 = 0.0         # sum of q_y * alpha(y) over y < x
        b = 0.0          # sum of y * q_y over 0..x
        for x in range(cap + 1):
            c = 0.0 if x == cap else q * lam / ((x + 1) * u)

            def t8(a, a8=a8, q=q, z0=z0, c=c):
                return (a8 + q * a) / (z0 + c * a)

            def ex(a, b=b, z0=z0, c=c, x=x):
                return (b + (x + 1) * c * a) / (z0 + c * a)

            a1 = _min_a(s8[j] + t8(0.0), s8[j] + t8(1.0),
                        lambda a: s8[j] + t8(a), 1.0)
            a_step = a1
            if k != cloud:
                a2 = _min_a(s9[k] + w * ex(0.0), s9[k] + w * ex(1.0),
                            lambda a: s9[k] + w * ex(a), float(config.sc_capacity[k]))
                a_step = min(a_step, a2)
            a3 = _min_a(s10[i] + chan_mult * ex(0.0), s10[i] + chan_mult * ex(1.0),
                        lambda a: s10[i] + chan_mult * ex(a),
                        float(config.channel_capacity[i]))
            a_step = min(a_step, a3)
            if i2 != i:
                a3b = _min_a(s10[i2] + ex(0.0), s10[i2] + ex(1.0),
                             lambda a: s10[i2] + ex(a),
                             float(config.channel_capacity[i2]))
                a_step = min(a_step, a3b)

            avec[x] = a_step
            a8 += q * a_step
            if x < cap:
                q = c * a_step
                z0 += q
                b += (x + 1) * q
            if s8[j] + a8 / z0 >= 1.0 - _BIND_TOL:
                flags[j] = 0
                nu[j] = psi
                saturated += 1
                break
            if a_step == 0.0:
                break  # states above x are unreachable; move to the next tuple

        ex_final = b / z0
        s8[j] += a8 / z0
        if k != cloud:
            s9[k] += w * ex_final
        s10[i] += chan_mult * ex_final
        if i2 != i:
            s10[i2] += ex_final
        if avec.any():
            alpha[(j, i, i2, k)] = avec
        if saturated == J:
            break

    return DualPoint(nu=nu, gamma=coeffs.gamma.copy(), eta=coeffs.eta.copy(),
                     flags=flags, policy=SubProblemPolicy(alpha))


def _expected_occupancy(key: tuple[int, int, int, int], avec: np.ndarray,
                        config: NetworkConfig) -> float:
    u = config.service_rate_map[key]
    lam = config.arrival_rate[key[0]]
    pi = stationary_distribution(avec, lam, u)
    return float(pi @ np.arange(len(pi)))


def subgradient_gamma(k: int, dual: DualPoint, config: NetworkConfig) -> float:
    """Sub-gradient of the dual in gamma_k: total expected weighted load minus C_k."""
    total = 0.0
    for key, avec in dual.policy.alpha.items():
        j, _, _, kk = key
        if kk != k:
            continue
        total += config.occupancy_requirement[j][k] * _expected_occupancy(key, avec, config)
    return total - config.sc_capacity[k]


def subgradient_eta(i: int, dual: DualPoint, config: NetworkConfig) -> float:
    """Sub-gradient in eta_i; a tuple with i = i' contributes its occupancy twice."""
    total = 0.0
    for key, avec in dual.policy.alpha.items():
        _, ii, ii2, _ = key
        hits = (ii == i) + (ii2 == i)
        if not hits:
            continue
        total += hits * _expected_occupancy(key, avec, config)
    return total - config.channel_capacity[i]
