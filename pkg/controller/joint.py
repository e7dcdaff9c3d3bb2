"""Alternating association / activation-fraction loops and the reference associations."""
from dataclasses import dataclass, field
from enum import IntEnum
import logging
import math
from typing import NamedTuple

import numpy as np

from common.calculations import xlogx
from common.convex import ConvexProblem, SmoothFunction, SolveReport, Tolerances, solve
from common.errors import InfeasibleUserError, SolverError
from common.model import ChannelGains, UtilityConfig
from common.rate import RateMatrix, kkt_gamma, rate_matrix, system_utility, theta_matrix
from common.setfn import Association, SetFunction
from controller.afopt import AfConfig, optimize_af, optimize_af_distributed
from controller.gls import GlsConfig, gls
from simulator.distsim import DistLsConfig, distributed_greedy, distributed_ls

logger = logging.getLogger(__name__)


class JointMethod(IntEnum):
    GLS_AF = 1
    RA_AF = 2


@dataclass
class JointConfig:
    improvement_threshold: float = 1e-3
    max_rounds: int = 10
    which: JointMethod = JointMethod.GLS_AF

    def __post_init__(self):
        if not self.improvement_threshold > 0:
            raise ValueError(f"improvement_threshold must be > 0, got {self.improvement_threshold}")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        self.which = JointMethod(self.which)


class HistoryRecord(NamedTuple):
    round: int
    stage: str
    score: float
    rho: np.ndarray


@dataclass
class JointResult:
    association: Association
    rho: np.ndarray
    history: list[HistoryRecord] = field(default_factory=list)
    relaxed_history: list[float] = field(default_factory=list)

    @property
    def score(self) -> float:
        return self.history[-1].score


@dataclass
class RelaxedAssociation:
    x: np.ndarray
    value: float
    bound: float
    report: SolveReport | None = None


def association_score(association: Association, rates: RateMatrix, util: UtilityConfig) -> float:
    """System utility of an association at the KKT-optimal time split."""
    return system_utility(association, kkt_gamma(association, rates, util), rates, util)


def _relaxed_objective(rates: RateMatrix, util: UtilityConfig, pairs: np.ndarray) -> SmoothFunction:
    """Convex (minimization) form of the set function over fractional x on the feasible pairs."""
    alpha = util.alpha
    tps = pairs[:, 1]
    num_tps = rates.num_tps
    members = [np.flatnonzero(tps == b) for b in range(num_tps)]
    if alpha == 1:
        weights = util.weights[pairs[:, 0]]
        linear = weights * np.log(weights * rates.R[pairs[:, 0], tps])
        coeffs = weights
    else:
        coeffs = theta_matrix(rates, util).theta[pairs[:, 0], tps]
        linear = None

    def loads(x):
        return np.bincount(tps, weights=x * coeffs, minlength=num_tps)

    def fun(x):
        psi = loads(x)
        if alpha == 1:
            return float(-linear @ x + np.sum(xlogx(psi)))
        value = float(np.sum(psi**alpha))
        return value if alpha > 1 else -value

    def grad(x):
        psi = loads(x)
        if alpha == 1:
            return -linear + (np.log(psi[tps]) + 1) * coeffs
        g = alpha * psi[tps] ** (alpha - 1) * coeffs
        return g if alpha > 1 else -g

    def hess(x):
        psi = loads(x)
        with np.errstate(divide="ignore"):
            if alpha == 1:
                curvature = 1 / psi
            else:
                curvature = abs(alpha * (alpha - 1)) * psi ** (alpha - 2)
        h = np.zeros((len(x), len(x)))
        for b, idx in enumerate(members):
            if len(idx):
                h[np.ix_(idx, idx)] += curvature[b] * np.outer(coeffs[idx], coeffs[idx])
        return h

    return SmoothFunction(fun, grad, hess)


def relaxed_association(rates: RateMatrix, util: UtilityConfig, tol: Tolerances | None = None) -> RelaxedAssociation:
    """Continuous relaxation of the association problem over per-user simplices."""
    feasible = rates.R > 0
    unserved = np.flatnonzero(~feasible.any(axis=1))
    if len(unserved):
        raise InfeasibleUserError(int(unserved[0]))
    pairs = np.argwhere(feasible)
    num_users = rates.num_users
    eq_matrix = np.zeros((num_users, len(pairs)))
    eq_matrix[pairs[:, 0], np.arange(len(pairs))] = 1.0
    start = 1 / feasible.sum(axis=1)[pairs[:, 0]]

    problem = ConvexProblem(
        num_vars=len(pairs),
        objective=_relaxed_objective(rates, util, pairs),
        eq_matrix=eq_matrix,
        eq_rhs=np.ones(num_users),
        lower=np.zeros(len(pairs)),
        x0=start,
    )
    report = solve(problem, tol)
    if not report.converged:
        logger.warning("relaxed association: solver stopped early (kkt residual %.3g)", report.kkt_residual)
    x = np.zeros(rates.R.shape)
    x[pairs[:, 0], pairs[:, 1]] = np.clip(report.x, 0.0, 1.0)

    value = report.objective if util.alpha > 1 else -report.objective
    gap = report.kkt_residual * max(1.0, abs(value))
    bound = value - gap if util.alpha > 1 else value + gap
    logger.debug("relaxed association alpha=%g: value %.10g, bound %.10g", util.alpha, value, bound)
    return RelaxedAssociation(x, value, bound, report)


def round_association(relaxed: RelaxedAssociation) -> Association:
    x = relaxed.x
    return Association.from_tps(np.argmax(x, axis=1).tolist(), x.shape[1])


def max_snr_association(gains: ChannelGains) -> Association:
    return Association.from_tps(np.argmax(gains.slow_gain, axis=1).tolist(), gains.num_tps)


def _rates(gains: ChannelGains, rho: np.ndarray, af_cfg: AfConfig) -> RateMatrix:
    return rate_matrix(gains, rho, af_cfg.mc_samples, af_cfg.fading_seed)


def _gain(new: float, old: float) -> float:
    if old == new:
        return 0.0
    if not math.isfinite(old):
        return math.inf
    return (new - old) / max(abs(old), 1e-300)


def _associate(set_fn: SetFunction, gls_cfg: GlsConfig, distributed: bool, dls_cfg: DistLsConfig) -> Association:
    if not distributed:
        return gls(set_fn, gls_cfg).association
    association, _ = distributed_greedy(set_fn)
    association, _ = distributed_ls(association, set_fn, dls_cfg)
    return association


def _still_feasible(association: Association, set_fn: SetFunction) -> bool:
    users = np.arange(association.num_users)
    return association.is_complete() and bool(np.all(set_fn.feasible[users, association.tp_of]))


def joint_gls_af(gains: ChannelGains, util: UtilityConfig, gls_cfg: GlsConfig | None = None,
                 af_cfg: AfConfig | None = None, joint_cfg: JointConfig | None = None,
                 distributed: bool = False, dls_cfg: DistLsConfig | None = None) -> JointResult:
    gls_cfg = gls_cfg or GlsConfig()
    af_cfg = af_cfg or AfConfig()
    joint_cfg = joint_cfg or JointConfig()
    dls_cfg = dls_cfg or DistLsConfig(delta=gls_cfg.delta, max_windows=10 * gains.num_users)

    rho = np.ones(gains.num_tps)
    result = JointResult(Association(gains.num_users, gains.num_tps), rho)
    association: Association | None = None
    previous_score = -math.inf

    for round_ in range(1, joint_cfg.max_rounds + 1):
        rates = _rates(gains, rho, af_cfg)
        set_fn = SetFunction(theta_matrix(rates, util), rates, util)
        candidate = _associate(set_fn, gls_cfg, distributed, dls_cfg)
        if association is not None and _still_feasible(association, set_fn) \
                and not set_fn.prefers(set_fn.value(candidate), set_fn.value(association)):
            candidate = association
        association = candidate
        score = association_score(association, rates, util)
        result.history.append(HistoryRecord(round_, "association", score, rho.copy()))
        if round_ == 1:
            previous_score = score

        try:
            if distributed:
                af = optimize_af_distributed(association, gains, util, af_cfg, initial_rho=rho)
            else:
                af = optimize_af(association, gains, util, af_cfg, initial_rho=rho)
        except SolverError as ex:
            raise SolverError(f"joint GLS-AF round {round_}: {ex}",
                              [record.score for record in result.history]) from ex
        rho = af.rho
        score = association_score(association, _rates(gains, rho, af_cfg), util)
        result.history.append(HistoryRecord(round_, "af", score, rho.copy()))

        gain = _gain(score, previous_score)
        logger.info("joint GLS-AF round %d: utility %.10g (relative gain %.3g)", round_, score, gain)
        previous_score = score
        if gain < joint_cfg.improvement_threshold:
            break

    result.association = association
    result.rho = rho
    return result


def joint_ra_af(gains: ChannelGains, util: UtilityConfig, af_cfg: AfConfig | None = None,
                joint_cfg: JointConfig | None = None, tol: Tolerances | None = None) -> JointResult:
    """Alternate the relaxed association with AF on the fractional association; round at the end."""
    af_cfg = af_cfg or AfConfig()
    joint_cfg = joint_cfg or JointConfig(which=JointMethod.RA_AF)

    rho = np.ones(gains.num_tps)
    result = JointResult(Association(gains.num_users, gains.num_tps), rho)
    relaxed: RelaxedAssociation | None = None
    previous_value = -math.inf
    sign = -1.0 if util.alpha > 1 else 1.0

    for round_ in range(1, joint_cfg.max_rounds + 1):
        rates = _rates(gains, rho, af_cfg)
        relaxed = relaxed_association(rates, util, tol)
        rounded = round_association(relaxed)
        result.relaxed_history.append(sign * relaxed.value)
        result.history.append(HistoryRecord(round_, "association", association_score(rounded, rates, util),
                                            rho.copy()))
        if round_ == 1:
            previous_value = sign * relaxed.value

        try:
            af = optimize_af(relaxed.x, gains, util, af_cfg, initial_rho=rho)
        except SolverError as ex:
            raise SolverError(f"joint RA-AF round {round_}: {ex}", result.relaxed_history) from ex
        rho = af.rho
        value = af.utility_history[-1]
        result.relaxed_history.append(value)
        rates = _rates(gains, rho, af_cfg)
        result.history.append(HistoryRecord(round_, "af", association_score(rounded, rates, util), rho.copy()))

        gain = _gain(value, previous_value)
        logger.info("joint RA-AF round %d: relaxed utility %.10g (relative gain %.3g)", round_, value, gain)
        previous_value = value
        if gain < joint_cfg.improvement_threshold:
            break

    result.association = round_association(relaxed)
    result.rho = rho
    return result
