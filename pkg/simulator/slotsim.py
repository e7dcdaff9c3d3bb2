"""Slot-level check of a solution: ON-OFF patterns that follow rho, fast fading and a per-slot scheduler."""
from dataclasses import dataclass, field
from enum import IntEnum
import csv
import logging
import math
from pathlib import Path

import numpy as np

from common.calculations import alpha_utility, relative_change
from common.constants import DEFAULT_MC_SAMPLES, SLOTS_PER_FRAME
from common.model import ChannelGains, FadingModel, UtilityConfig
from common.rate import RateAllocation, as_activation, interference, kkt_gamma, rate_matrix, system_utility
from common.setfn import Association

logger = logging.getLogger(__name__)


class Scheduler(IntEnum):
    FRACTIONAL_RR = 1
    GRADIENT = 2

    @staticmethod
    def parse(name: str) -> "Scheduler":
        return Scheduler[name.strip().upper().replace("-", "_")]


@dataclass(eq=False)
class FramePlan:
    association: Association
    on_off: np.ndarray  # B x slots, True where the TP transmits
    gamma: RateAllocation | None = None

    def __post_init__(self):
        if not self.association.is_complete():
            raise ValueError("frame plan needs a complete association")
        if self.on_off.ndim != 2 or self.on_off.shape[0] != self.association.num_tps:
            raise ValueError(f"on_off must be {self.association.num_tps} x slots, got {self.on_off.shape}")
        self.on_off = self.on_off.astype(bool)

    @property
    def slots_per_frame(self) -> int:
        return self.on_off.shape[1]


def on_off_pattern(rho, slots: int = SLOTS_PER_FRAME, seed: int = 0, deterministic: bool = False) -> np.ndarray:
    """i.i.d. Bernoulli(rho_b) per slot, or the first ceil(rho_b * slots) slots ON."""
    rho = np.asarray(rho, dtype=float)
    if deterministic:
        on = np.ceil(np.round(rho * slots, 9)).astype(int)
        return np.arange(slots)[None, :] < on[:, None]
    rng = np.random.default_rng([seed, 0])
    return rng.random((len(rho), slots)) < rho[:, None]


def make_frame_plan(association: Association, rho, slots: int = SLOTS_PER_FRAME, seed: int = 0,
                    deterministic: bool = False, gamma: RateAllocation | None = None) -> FramePlan:
    rho = as_activation(rho, association.num_tps)
    return FramePlan(association, on_off_pattern(rho, slots, seed, deterministic), gamma)


@dataclass
class SlotOutcome:
    served: np.ndarray        # bool per user
    instantaneous: np.ndarray  # nats this slot, zero when not served
    average: np.ndarray       # running average rate up to this slot


@dataclass
class FrameResult:
    average_rates: np.ndarray
    service_counts: np.ndarray
    slots: list[SlotOutcome] = field(default_factory=list)


class _RoundRobin:
    """Serves each TP's users in proportion to gamma by deficit counting."""

    def __init__(self, association: Association, gamma: np.ndarray):
        self.tp_of = association.tp_of
        self.share = gamma[np.arange(len(self.tp_of)), self.tp_of]
        self.credit = np.zeros(len(self.tp_of))

    def pick(self, users: np.ndarray, rates: np.ndarray) -> int:
        self.credit[users] += self.share[users]
        chosen = users[int(np.argmax(self.credit[users]))]
        self.credit[chosen] -= 1.0
        return int(chosen)

    def served(self, user: int, rate: float):
        pass


class _Gradient:
    """alpha-fair gradient rule: argmax w r_inst R_avg^-alpha, R_avg warm-started."""

    def __init__(self, weights: np.ndarray, alpha: float, warm_rates: np.ndarray):
        self.weights = weights
        self.alpha = alpha
        self.total = warm_rates.astype(float).copy()
        self.count = 1

    def pick(self, users: np.ndarray, rates: np.ndarray) -> int:
        average = self.total[users] / self.count
        priority = self.weights[users] * rates[users] * np.maximum(average, 1e-300) ** -self.alpha
        return int(users[int(np.argmax(priority))])

    def served(self, user: int, rate: float):
        self.total[user] += rate

    def tick(self):
        self.count += 1


def _slot_fading(gains: ChannelGains, rng: np.random.Generator) -> np.ndarray:
    if gains.fading_model == FadingModel.NONE:
        return gains.slow_gain
    return gains.slow_gain * rng.exponential(1.0, size=gains.slow_gain.shape)


def simulate_frame(plan: FramePlan, gains: ChannelGains, util: UtilityConfig,
                   scheduler: Scheduler = Scheduler.GRADIENT, seed: int = 0,
                   warm_rates: np.ndarray | None = None, record: bool = False) -> FrameResult:
    association = plan.association
    num_users = association.num_users
    tp_of = association.tp_of
    users_on = [association.users_on(b) for b in range(association.num_tps)]

    if scheduler == Scheduler.FRACTIONAL_RR:
        if plan.gamma is None:
            raise ValueError("fractional round robin needs gamma in the frame plan")
        policy = _RoundRobin(association, plan.gamma.gamma)
    else:
        if warm_rates is None:
            warm_rates = np.ones(num_users)
        policy = _Gradient(util.weights, util.alpha, warm_rates)

    rng = np.random.default_rng([seed, 1])
    totals = np.zeros(num_users)
    counts = np.zeros(num_users, dtype=int)
    outcomes: list[SlotOutcome] = []

    for slot in range(plan.slots_per_frame):
        active = plan.on_off[:, slot]
        beta = _slot_fading(gains, rng)
        noise = interference(beta, active.astype(float))
        own = beta[np.arange(num_users), tp_of]
        rates = np.log1p(own / (1 + noise[np.arange(num_users), tp_of]))

        served = np.zeros(num_users, dtype=bool)
        for b in np.flatnonzero(active):
            users = users_on[b]
            if len(users) == 0:
                continue
            k = policy.pick(users, rates)
            served[k] = True
            totals[k] += rates[k]
            counts[k] += 1
            policy.served(k, rates[k])
        if isinstance(policy, _Gradient):
            policy.tick()
        if record:
            outcomes.append(SlotOutcome(served, np.where(served, rates, 0.0), totals / (slot + 1)))

    return FrameResult(totals / plan.slots_per_frame, counts, outcomes)


@dataclass
class VerificationReport:
    utility_conservative: float
    utility_actual_rr: float
    utility_actual_gradient: float
    conservative_rates: np.ndarray
    rates_rr: np.ndarray
    rates_gradient: np.ndarray

    def gain_over(self, baseline: "VerificationReport") -> float:
        """Relative gain in gradient-scheduled utility over a baseline solution."""
        sign = 1.0 if self.utility_actual_gradient >= baseline.utility_actual_gradient else -1.0
        return sign * relative_change(self.utility_actual_gradient, baseline.utility_actual_gradient)


def actual_utility(rates: np.ndarray, util: UtilityConfig) -> float:
    total = 0.0
    for w, r in zip(util.weights, rates):
        value = alpha_utility(float(r), util.alpha)
        if value == -math.inf:
            return -math.inf
        total += w * value
    return total


def verify_solution(association: Association, rho, gains: ChannelGains, util: UtilityConfig, seed: int = 0,
                    slots: int = SLOTS_PER_FRAME, mc_samples: int = DEFAULT_MC_SAMPLES,
                    deterministic: bool = False) -> VerificationReport:
    rho = as_activation(rho, gains.num_tps)
    rates = rate_matrix(gains, rho, mc_samples)
    gamma = kkt_gamma(association, rates, util)
    users = np.arange(association.num_users)
    conservative = gamma.gamma[users, association.tp_of] * rates.R[users, association.tp_of]

    plan = make_frame_plan(association, rho, slots, seed, deterministic, gamma)
    rr = simulate_frame(plan, gains, util, Scheduler.FRACTIONAL_RR, seed)
    gradient = simulate_frame(plan, gains, util, Scheduler.GRADIENT, seed, warm_rates=conservative)

    report = VerificationReport(
        utility_conservative=system_utility(association, gamma, rates, util),
        utility_actual_rr=actual_utility(rr.average_rates, util),
        utility_actual_gradient=actual_utility(gradient.average_rates, util),
        conservative_rates=conservative,
        rates_rr=rr.average_rates,
        rates_gradient=gradient.average_rates,
    )
    logger.info("slot verification: conservative %.6g, round robin %.6g, gradient %.6g",
                report.utility_conservative, report.utility_actual_rr, report.utility_actual_gradient)
    return report


def export_rates_csv(path: str | Path, report: VerificationReport):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["user", "conservative", "round_robin", "gradient"])
        for k, row in enumerate(zip(report.conservative_rates, report.rates_rr, report.rates_gradient)):
            writer.writerow([k, *map(repr, map(float, row))])
