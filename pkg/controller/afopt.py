"""Activation-fraction optimization for a fixed association.

The auxiliary-function method alternates two steps until the objective stops
improving: closed-form MMSE filters and scale factors at the current
activation vector, then a geometric program (or its successive condensation
when alpha < 1) over the activation vector with the filters held fixed. All
expectations are sample averages over one fading sample set drawn up front,
so every outer iteration sees the same objective and the history is monotone.

The same code serves relaxed associations: each served tuple carries a
factor that multiplies its weight (1 for an integral association).
"""
from dataclasses import dataclass, field, replace
from enum import IntEnum
import csv
import logging
import math
from pathlib import Path

import numpy as np

from common.calculations import relative_change, tilde_weight, xlogx
from common.constants import DEFAULT_AF_MC_SAMPLES, DEFAULT_FADING_SEED, RHO_MIN, T_FLOOR
from common.convex import (MAX_LOG_VALUE, ConvexTerm, GeometricProgram, Monomial, Posynomial, SolveReport,
                           Tolerances, gp_to_convex, solve, solve_gp_logform)
from common.errors import SolverError
from common.model import ChannelGains, UtilityConfig
from common.rate import interference, user_link_samples
from common.setfn import Association

logger = logging.getLogger(__name__)

# C is twice the interference-free value, so y >= C / 2 at every feasible point
# and y keeps at least half the weight when its constraint is condensed.
C_MARGIN = 1.0
MIN_FRACTION = 1e-6
START_SHRINK = 0.5


class PriceSchedule(IntEnum):
    DIMINISHING = 1
    CONSTANT = 2


class AfRegime(IntEnum):
    BELOW_ONE = 1
    ONE = 2
    ABOVE_ONE = 3

    @staticmethod
    def of(alpha: float) -> "AfRegime":
        if alpha < 1:
            return AfRegime.BELOW_ONE
        if alpha == 1:
            return AfRegime.ONE
        return AfRegime.ABOVE_ONE


@dataclass
class AfConfig:
    outer_tol: float = 1e-6
    max_outer: int = 50
    mc_samples: int = DEFAULT_AF_MC_SAMPLES
    fading_seed: int = DEFAULT_FADING_SEED
    inner_tol: float = 1e-6
    max_condensations: int = 50
    admm_penalty: float = 1.0
    price_schedule: PriceSchedule = PriceSchedule.DIMINISHING
    price_step: float = 1.0
    price_warmup: int = 50
    price_tol: float = 1e-6
    max_price_iter: int = 1000
    tolerances: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self):
        if not self.outer_tol > 0:
            raise ValueError(f"outer_tol must be > 0, got {self.outer_tol}")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if not self.inner_tol > 0:
            raise ValueError(f"inner_tol must be > 0, got {self.inner_tol}")
        if not self.admm_penalty > 0:
            raise ValueError(f"admm_penalty must be > 0, got {self.admm_penalty}")
        if not self.price_step > 0:
            raise ValueError(f"price_step must be > 0, got {self.price_step}")
        if self.price_warmup < 1:
            raise ValueError("price_warmup must be >= 1")
        self.price_schedule = PriceSchedule(self.price_schedule)


@dataclass(frozen=True)
class ServedTuple:
    user: int
    tp: int
    factor: float = 1.0


def served_tuples(association: Association) -> list[ServedTuple]:
    return [ServedTuple(k, b) for k, b in association.tuples()]


def fractional_served_tuples(x: np.ndarray, min_fraction: float = MIN_FRACTION) -> list[ServedTuple]:
    """Tuples of a relaxed association whose fraction is worth optimizing for."""
    return [ServedTuple(int(k), int(b), float(x[k, b])) for k, b in np.argwhere(x > min_fraction)]


class AfProblem:
    """Served tuples, weights and the fading sample set shared by every outer iteration."""

    def __init__(self, gains: ChannelGains, util: UtilityConfig, served: list[ServedTuple],
                 mc_samples: int = DEFAULT_AF_MC_SAMPLES, seed: int = DEFAULT_FADING_SEED):
        if not served:
            raise ValueError("no served tuples to optimize for")
        self.alpha = util.alpha
        self.regime = AfRegime.of(util.alpha)
        self.num_tps = gains.num_tps
        self.served = list(served)
        self.users = np.array([e.user for e in served])
        self.tps = np.array([e.tp for e in served])
        self.factors = np.array([e.factor for e in served])
        self.weights = util.weights[self.users] * self.factors
        self.tilde = tilde_weight(util.weights[self.users], util.alpha) * self.factors
        self.exponent = 1 / self.alpha - 1
        self.serving = np.unique(self.tps)
        samples = {k: user_link_samples(gains, k, mc_samples, seed) for k in np.unique(self.users)}
        self.link_samples = [samples[k] for k in self.users]
        for e, beta in zip(served, self.link_samples):
            if not np.all(beta[:, e.tp] > 0):
                raise ValueError(f"tuple ({e.user}, {e.tp}) has a zero link gain")

    def on_tp(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.tps == b)

    def clamp(self, rho) -> np.ndarray:
        """Serving TPs into [RHO_MIN, 1]; every other TP switched off."""
        out = np.zeros(self.num_tps)
        out[self.serving] = np.clip(np.asarray(rho, dtype=float)[self.serving], RHO_MIN, 1.0)
        return out

    def initial_rho(self) -> np.ndarray:
        return self.clamp(np.ones(self.num_tps))

    def rates(self, rho: np.ndarray) -> np.ndarray:
        rates = np.zeros(len(self.served))
        for i, (b, beta) in enumerate(zip(self.tps, self.link_samples)):
            sinr = beta[:, b] / (1 + interference(beta, rho)[:, b])
            rates[i] = rho[b] * np.mean(np.log1p(sinr))
        return rates

    def interference_free_rates(self) -> np.ndarray:
        return np.array([np.mean(np.log1p(beta[:, b])) for b, beta in zip(self.tps, self.link_samples)])

    def _per_tp(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.tps, weights=values, minlength=self.num_tps)

    def tp_sums(self, rates: np.ndarray) -> np.ndarray:
        """z_b = sum of w~ x R^(1/alpha - 1) over the tuples on b."""
        return self._per_tp(self.tilde * rates ** self.exponent)

    def objective(self, rho: np.ndarray) -> float:
        rates = self.rates(rho)
        if np.any(rates <= 0):
            return math.inf if self.regime == AfRegime.ABOVE_ONE else -math.inf
        if self.regime == AfRegime.ONE:
            return float(np.sum(self.weights * np.log(rates)))
        return float(np.sum(self.tp_sums(rates) ** self.alpha))

    def utility(self, rho: np.ndarray) -> float:
        """System utility at the optimal intra-TP split, i.e. +-g of the (weighted) association."""
        rates = self.rates(rho)
        if self.regime == AfRegime.ONE:
            if np.any(rates <= 0):
                return -math.inf
            psi = self._per_tp(self.weights)
            base = self.weights / self.factors
            return float(np.sum(self.weights * np.log(base * rates)) - np.sum(xlogx(psi)))
        value = self.objective(rho)
        return -value if self.regime == AfRegime.ABOVE_ONE else value

    def improves(self, new: float, old: float) -> bool:
        return new <= old if self.regime == AfRegime.ABOVE_ONE else new >= old


@dataclass
class AfState:
    rho: np.ndarray
    filters: np.ndarray | None = None       # MMSE filter per (served tuple, sample)
    scales: np.ndarray | None = None        # s = 1 / e at the MMSE filter
    denominators: np.ndarray | None = None  # 1 + E[ln s]
    own_terms: np.ndarray | None = None     # E[s (|g sqrt(beta) - 1|^2 + |g|^2)]
    cross_terms: np.ndarray | None = None   # E[s |g|^2 beta_b'] per interfering TP
    t: np.ndarray | None = None
    z: np.ndarray | None = None
    y: float = math.nan
    C: float = math.nan
    report: SolveReport | None = None
    tps: np.ndarray | None = None

    @property
    def a(self) -> np.ndarray:
        return 1 / self.denominators

    def rate_bound(self, rho: np.ndarray) -> np.ndarray:
        """rho_b E[1 - s e + ln s] with s and g held fixed; equals the rate at the expansion point."""
        return rho[self.tps] * (self.denominators - self.own_terms - self.cross_terms @ rho)


def mse(filters, own_gain, interference_power):
    return (filters * np.sqrt(own_gain) - 1) ** 2 + filters**2 + filters**2 * interference_power


def mmse_update(problem: AfProblem, rho: np.ndarray) -> AfState:
    n = len(problem.served)
    num_samples = problem.link_samples[0].shape[0]
    filters = np.zeros((n, num_samples))
    scales = np.zeros((n, num_samples))
    denominators = np.zeros(n)
    own_terms = np.zeros(n)
    cross_terms = np.zeros((n, problem.num_tps))
    for i, (b, beta) in enumerate(zip(problem.tps, problem.link_samples)):
        own = beta[:, b]
        noise = interference(beta, rho)[:, b]
        g = np.sqrt(own) / (1 + own + noise)
        s = 1 + own / (1 + noise)
        filters[i], scales[i] = g, s
        denominators[i] = 1 + np.mean(np.log(s))
        own_terms[i] = np.mean(s * ((g * np.sqrt(own) - 1) ** 2 + g**2))
        cross = np.mean((s * g**2)[:, None] * beta, axis=0)
        cross[b] = 0.0
        cross_terms[i] = cross * (rho > 0)
    return AfState(rho.copy(), filters, scales, denominators, own_terms, cross_terms, tps=problem.tps)


# geometric-program building blocks

def _rho(b) -> str:
    return f"rho[{b}]"


def _t(i) -> str:
    return f"t[{i}]"


def _z(b) -> str:
    return f"z[{b}]"


def _y(b=None) -> str:
    return "y" if b is None else f"y[{b}]"


def condense(posynomial: Posynomial, point: dict[str, float]) -> Monomial:
    """Monomial lower approximation of a posynomial, exact at `point` (weighted AM-GM)."""
    values = np.array([m.value(point) for m in posynomial])
    weights = values / values.sum()
    log_coefficient = 0.0
    exponents: dict[str, float] = {}
    for m, theta in zip(posynomial, weights):
        if theta <= 0:
            continue
        log_coefficient += theta * (math.log(m.coefficient) - math.log(theta))
        for name, a in m.exponents.items():
            exponents[name] = exponents.get(name, 0.0) + theta * a
    return Monomial(math.exp(log_coefficient), exponents)


def monomial_over(numerator: Monomial, denominator: Monomial) -> Monomial:
    exponents = dict(numerator.exponents)
    for name, a in denominator.exponents.items():
        exponents[name] = exponents.get(name, 0.0) - a
    return Monomial(numerator.coefficient / denominator.coefficient, exponents)


def _rate_constraint(state: AfState, problem: AfProblem, i: int) -> Posynomial:
    """(t rho_b^-1 + E[s e]) / (1 + E[ln s]) <= 1 with s and g fixed."""
    b = int(problem.tps[i])
    a = state.a[i]
    terms = [Monomial(a, {_t(i): 1.0, _rho(b): -1.0})]
    if state.own_terms[i] > 0:
        terms.append(Monomial(a * state.own_terms[i]))
    for j in np.flatnonzero(state.cross_terms[i] > 0):
        terms.append(Monomial(a * state.cross_terms[i, j], {_rho(j): 1.0}))
    return terms


@dataclass
class _Block:
    """The part of the program owned by one TP."""
    tp: int
    objective: Posynomial
    inequalities: list[Posynomial]
    start: dict[str, float]

    def variables(self) -> list[str]:
        names = {name for p in [self.objective, *self.inequalities] for m in p for name in m.exponents}
        return sorted(names)


def _interior(rho):
    return np.clip(rho, RHO_MIN * 1.01, 1 - 1e-7)


def _start_value(name: str, value: float) -> float:
    return float(_interior(value)) if name.startswith("rho[") else value


def _rate_start(state: AfState, problem: AfProblem) -> tuple[np.ndarray, np.ndarray]:
    rho = _interior(state.rho)
    t = START_SHRINK * state.rate_bound(rho)
    return rho, np.where(t > 0, t, T_FLOOR)


def _rate_part(state: AfState, problem: AfProblem, b: int, rho: np.ndarray, t: np.ndarray) -> _Block:
    inequalities = []
    start = {}
    for i in problem.on_tp(b):
        inequalities.append(_rate_constraint(state, problem, i))
        start[_t(i)] = t[i]
    block = _Block(b, [], inequalities, start)
    for name in block.variables():
        if name.startswith("rho["):
            block.start[name] = rho[int(name[4:-1])]
    return block


def _block_above_one(state: AfState, problem: AfProblem, b: int, rho: np.ndarray, t: np.ndarray) -> _Block:
    block = _rate_part(state, problem, b, rho, t)
    members = problem.on_tp(b)
    q = problem.exponent
    block.objective = [Monomial(1.0, {_z(b): problem.alpha})]
    block.inequalities.append([Monomial(problem.tilde[i], {_z(b): -1.0, _t(i): q}) for i in members])
    block.start[_z(b)] = 2 * float(np.sum(problem.tilde[members] * t[members] ** q))
    return block


def _block_one(state: AfState, problem: AfProblem, b: int, rho: np.ndarray, t: np.ndarray) -> _Block:
    block = _rate_part(state, problem, b, rho, t)
    block.objective = [Monomial(1.0, {_t(i): -problem.weights[i] for i in problem.on_tp(b)})]
    return block


def _condensed_h(problem: AfProblem, b: int, point: dict[str, float]) -> Monomial:
    """Monomial approximation of sum of w~ t^(1/alpha - 1) over the tuples on b."""
    return condense([Monomial(problem.tilde[i], {_t(i): problem.exponent}) for i in problem.on_tp(b)], point)


def _condensed_f(problem: AfProblem, tps, y_name: str, point: dict[str, float]) -> Monomial:
    """Monomial approximation of y + sum of z_b^alpha."""
    f = [Monomial(1.0, {y_name: 1.0})] + [Monomial(1.0, {_z(b): problem.alpha}) for b in tps]
    return condense(f, point)


def _y_start(C: float, f: Monomial, y_name: str, start: dict[str, float]) -> float:
    """y at which C / f(y, z) equals 1/2 for the start values of z."""
    rest = Monomial(f.coefficient, {name: a for name, a in f.exponents.items() if name != y_name})
    return (2 * C / rest.value(start)) ** (1 / f.exponents[y_name])


def _condensation_start(state: AfState, problem: AfProblem, point: dict[str, float]) -> tuple[np.ndarray, np.ndarray]:
    """Strictly feasible rho and t for a condensed program; the expansion point sits on its boundary."""
    rho = state.rho.copy()
    for b in problem.serving:
        rho[b] = point[_rho(b)]
    state = replace(state, rho=rho)
    return _rate_start(state, problem)


def _block_below_one(state: AfState, problem: AfProblem, b: int, point: dict[str, float],
                     rho: np.ndarray, t: np.ndarray, C_b: float | None) -> _Block:
    """Condensed block; with C_b the block also carries its own y[b] (distributed form)."""
    block = _rate_part(state, problem, b, rho, t)
    h = _condensed_h(problem, b, point)
    block.inequalities.append([monomial_over(Monomial(1.0, {_z(b): 1.0}), h)])
    block.start[_z(b)] = START_SHRINK * h.value(block.start)
    if C_b is not None:
        f = _condensed_f(problem, [b], _y(b), point)
        block.objective = [Monomial(1.0, {_y(b): 1.0})]
        block.inequalities.append([monomial_over(Monomial(C_b), f)])
        block.start[_y(b)] = _y_start(C_b, f, _y(b), block.start)
    return block


def _gp(blocks: list[_Block], objective: Posynomial, extra: list[Posynomial] = (),
        start: dict[str, float] | None = None) -> GeometricProgram:
    inequalities = [p for block in blocks for p in block.inequalities] + list(extra)
    x0 = {name: value for block in blocks for name, value in block.start.items()}
    if start:
        x0.update(start)
    names = sorted({name for p in [objective, *inequalities] for m in p for name in m.exponents})
    rho_names = [name for name in names if name.startswith("rho[")]
    return GeometricProgram(
        variables=names,
        objective=objective,
        inequalities=inequalities,
        lower={name: RHO_MIN for name in rho_names},
        upper={name: 1.0 for name in rho_names},
        x0={name: _start_value(name, x0[name]) for name in names},
    )


def _solve(gp: GeometricProgram, cfg: AfConfig, what: str) -> SolveReport:
    report = solve_gp_logform(gp, cfg.tolerances)
    if not np.all(np.isfinite(report.x)):
        raise SolverError(f"{what}: solver returned a non-finite point")
    if not report.converged:
        logger.warning("%s: solver stopped early (kkt residual %.3g)", what, report.kkt_residual)
    return report


def _rho_from(problem: AfProblem, values: dict[str, float], fallback: np.ndarray) -> np.ndarray:
    rho = fallback.copy()
    for b in problem.serving:
        rho[b] = values.get(_rho(b), rho[b])
    return problem.clamp(rho)


def _t_from(problem: AfProblem, values: dict[str, float]) -> np.ndarray:
    return np.array([values[_t(i)] for i in range(len(problem.served))])


def af_step_alpha_gt1(state: AfState, problem: AfProblem, cfg: AfConfig) -> AfState:
    rho, t = _rate_start(state, problem)
    blocks = [_block_above_one(state, problem, b, rho, t) for b in problem.serving]
    gp = _gp(blocks, [m for block in blocks for m in block.objective])
    report = _solve(gp, cfg, "AF step (alpha > 1)")
    z = np.zeros(problem.num_tps)
    z[problem.serving] = [report.values[_z(b)] for b in problem.serving]
    return replace(state, rho=_rho_from(problem, report.values, state.rho), t=_t_from(problem, report.values),
                   z=z, report=report)


def af_step_alpha_eq1(state: AfState, problem: AfProblem, cfg: AfConfig) -> AfState:
    rho, t = _rate_start(state, problem)
    blocks = [_block_one(state, problem, b, rho, t) for b in problem.serving]
    exponents = {name: a for block in blocks for name, a in block.objective[0].exponents.items()}
    gp = _gp(blocks, [Monomial(1.0, exponents)])
    report = _solve(gp, cfg, "AF step (alpha = 1)")
    return replace(state, rho=_rho_from(problem, report.values, state.rho), t=_t_from(problem, report.values),
                   report=report)


def interference_free_terms(problem: AfProblem) -> np.ndarray:
    """Per-TP share of C: (sum of w~ x E[ln(1 + beta)]^(1/alpha - 1))^alpha."""
    return problem.tp_sums(problem.interference_free_rates()) ** problem.alpha


def _expansion_point(state: AfState, problem: AfProblem, C_terms: np.ndarray, per_tp_y: bool) -> dict[str, float]:
    t = state.rate_bound(state.rho)
    if np.any(t < T_FLOOR):
        logger.warning("condensation point has %d rates below %g, projected to the floor",
                       int(np.sum(t < T_FLOOR)), T_FLOOR)
        t = np.maximum(t, T_FLOOR)
    z = problem.tp_sums(t)
    point = {_t(i): t[i] for i in range(len(t))}
    point.update({_rho(b): state.rho[b] for b in problem.serving})
    point.update({_z(b): z[b] for b in problem.serving})
    if per_tp_y:
        point.update({_y(b): C_terms[b] - z[b] ** problem.alpha for b in problem.serving})
    else:
        point[_y()] = float(np.sum(C_terms) - np.sum(z[problem.serving] ** problem.alpha))
    return point


def af_step_alpha_lt1(state: AfState, problem: AfProblem, cfg: AfConfig) -> AfState:
    C_terms = (1 + C_MARGIN) * interference_free_terms(problem)
    C = float(np.sum(C_terms))
    point = _expansion_point(state, problem, C_terms, per_tp_y=False)
    report = None
    for condensation in range(1, cfg.max_condensations + 1):
        rho, t = _condensation_start(state, problem, point)
        blocks = [_block_below_one(state, problem, b, point, rho, t, None) for b in problem.serving]
        f = _condensed_f(problem, problem.serving, _y(), point)
        start = {name: value for block in blocks for name, value in block.start.items()}
        gp = _gp(blocks, [Monomial(1.0, {_y(): 1.0})], [[monomial_over(Monomial(C), f)]],
                 {_y(): _y_start(C, f, _y(), start)})
        report = _solve(gp, cfg, "AF step (alpha < 1)")
        change = relative_change(report.values[_y()], point[_y()])
        point = dict(report.values)
        logger.debug("condensation %d: y=%.10g", condensation, point[_y()])
        if change < cfg.inner_tol:
            break
    z = np.zeros(problem.num_tps)
    z[problem.serving] = [point[_z(b)] for b in problem.serving]
    return replace(state, rho=_rho_from(problem, point, state.rho), t=_t_from(problem, point), z=z,
                   y=point[_y()], C=C, report=report)


_STEPS = {
    AfRegime.BELOW_ONE: af_step_alpha_lt1,
    AfRegime.ONE: af_step_alpha_eq1,
    AfRegime.ABOVE_ONE: af_step_alpha_gt1,
}


@dataclass
class AfResult:
    rho: np.ndarray
    history: list[float]
    utility_history: list[float]
    outer_iterations: int
    converged: bool


def _as_problem(served, gains: ChannelGains, util: UtilityConfig, cfg: AfConfig) -> AfProblem:
    if isinstance(served, Association):
        served = served_tuples(served)
    elif isinstance(served, np.ndarray):
        served = fractional_served_tuples(served)
    return AfProblem(gains, util, served, cfg.mc_samples, cfg.fading_seed)


def _alternate(problem: AfProblem, cfg: AfConfig, initial_rho, step) -> AfResult:
    rho = problem.initial_rho() if initial_rho is None else problem.clamp(initial_rho)
    objective = problem.objective(rho)
    history = [objective]
    utilities = [problem.utility(rho)]
    converged = False
    outer = 0
    while outer < cfg.max_outer:
        outer += 1
        try:
            state = step(mmse_update(problem, rho), problem, cfg)
        except SolverError as ex:
            raise SolverError(f"AF outer iteration {outer}: {ex}", history) from ex
        candidate = problem.objective(state.rho)
        if not problem.improves(candidate, objective):
            logger.debug("AF outer %d: step would move the objective %.12g -> %.12g, keeping rho",
                         outer, objective, candidate)
            converged = True
            break
        change = relative_change(candidate, objective)
        rho, objective = state.rho, candidate
        history.append(objective)
        utilities.append(problem.utility(rho))
        logger.debug("AF outer %d: objective %.12g (relative change %.3g)", outer, objective, change)
        if change < cfg.outer_tol:
            converged = True
            break
    if not converged:
        logger.warning("AF stopped at max_outer=%d with relative change above %g", cfg.max_outer, cfg.outer_tol)
    logger.info("AF alpha=%g: objective %.10g -> %.10g in %d outer iterations",
                problem.alpha, history[0], history[-1], outer)
    return AfResult(rho, history, utilities, outer, converged)


def optimize_af(served, gains: ChannelGains, util: UtilityConfig, cfg: AfConfig | None = None,
                initial_rho=None) -> AfResult:
    """`served` is an Association, a relaxed K x B fraction matrix, or a list of ServedTuple."""
    cfg = cfg or AfConfig()
    problem = _as_problem(served, gains, util, cfg)
    return _alternate(problem, cfg, initial_rho, _STEPS[problem.regime])


# distributed variant: consensus over per-TP copies of the activation fractions

class _AugmentedObjective(ConvexTerm):
    """Block objective plus prices and a quadratic penalty on the copies of the shared log-fractions."""

    def __init__(self, base: ConvexTerm, base_support: np.ndarray, num_vars: int, exp_form: bool,
                 copies: np.ndarray, targets: np.ndarray, prices: np.ndarray, penalty: float):
        self.base = base
        self.base_support = base_support
        self.num_vars = num_vars
        self.exp_form = exp_form
        self.copies = copies
        self.targets = targets
        self.prices = prices
        self.penalty = penalty
        self.support = None

    def _base(self, x):
        value, grad, hess = self.base.evaluate(x[self.base_support])
        if self.exp_form:
            if value > MAX_LOG_VALUE:
                raise SolverError(f"local block objective overflows (log value {value:.4g})")
            scale = math.exp(value)
            value, grad, hess = scale, scale * grad, scale * (hess + np.outer(grad, grad))
        return value, grad, hess

    def evaluate(self, x):
        value, base_grad, base_hess = self._base(x)
        grad = np.zeros(self.num_vars)
        hess = np.zeros((self.num_vars, self.num_vars))
        grad[self.base_support] = base_grad
        hess[np.ix_(self.base_support, self.base_support)] = base_hess
        gap = x[self.copies] - self.targets
        value += float(self.prices @ gap + self.penalty / 2 * gap @ gap)
        grad[self.copies] += self.prices + self.penalty * gap
        hess[self.copies, self.copies] += self.penalty
        return value, grad, hess

    def value(self, x):
        base = self.base.value(x[self.base_support])
        if self.exp_form:
            if base > MAX_LOG_VALUE:
                return math.inf
            base = math.exp(base)
        gap = x[self.copies] - self.targets
        return base + float(self.prices @ gap + self.penalty / 2 * gap @ gap)


@dataclass
class _LocalProblem:
    tp: int
    problem: object  # ConvexProblem in log variables
    base: ConvexTerm
    base_support: np.ndarray
    copies: np.ndarray  # variable indices of rho copies
    shared: np.ndarray  # TP index each copy refers to
    x: np.ndarray


def _local_problem(block: _Block) -> _LocalProblem:
    gp = GeometricProgram(
        variables=block.variables(),
        objective=block.objective,
        inequalities=block.inequalities,
        lower={name: RHO_MIN for name in block.variables() if name.startswith("rho[")},
        upper={name: 1.0 for name in block.variables() if name.startswith("rho[")},
        x0={name: _start_value(name, block.start[name]) for name in block.variables()},
    )
    problem = gp_to_convex(gp)
    base_support = np.arange(problem.num_vars) if problem.objective.support is None else problem.objective.support
    copies = np.array([i for i, name in enumerate(gp.variables) if name.startswith("rho[")], dtype=int)
    shared = np.array([int(gp.variables[i][4:-1]) for i in copies], dtype=int)
    return _LocalProblem(block.tp, problem, problem.objective, base_support, copies, shared, problem.x0.copy())


def price_step_size(cfg: AfConfig, iteration: int) -> float:
    """Price step in units of the penalty: constant over the warm-up, then c / sqrt(t)."""
    if cfg.price_schedule == PriceSchedule.CONSTANT:
        return cfg.price_step
    return cfg.price_step * min(1.0, math.sqrt(cfg.price_warmup / iteration))


@dataclass
class ConsensusRound:
    outer: int
    iteration: int
    consensus_gap: float
    max_price: float


def _consensus(blocks: list[_Block], problem: AfProblem, cfg: AfConfig, exp_form: bool, outer: int,
               price_history: list[ConsensusRound]) -> tuple[np.ndarray, float, int, bool]:
    """Consensus over the blocks with subgradient price steps; returns the agreed fractions of the serving TPs.

    Each block minimizes its objective plus prices and a quadratic penalty on its
    copies of the shared log-fractions; the consistency residual is the price
    subgradient.
    """
    locals_ = [_local_problem(block) for block in blocks]
    consensus = np.full(problem.num_tps, math.nan)
    for local in locals_:
        own = local.copies[local.shared == local.tp]
        consensus[local.tp] = local.x[own[0]]
    prices = [np.zeros(len(local.copies)) for local in locals_]

    start_values = [local.base.value(local.x[local.base_support]) for local in locals_]
    if exp_form:
        if max(start_values) > MAX_LOG_VALUE:
            raise SolverError(f"consensus start overflows (log objective {max(start_values):.4g})")
        scale = float(np.mean(np.exp(start_values)))
    else:
        scale = float(np.mean([problem.weights[problem.on_tp(local.tp)].sum() for local in locals_]))
    penalty = cfg.admm_penalty * max(scale, 1e-12)

    lower, upper = math.log(RHO_MIN), 0.0
    gap = math.inf
    converged = False
    iteration = 0
    for iteration in range(1, cfg.max_price_iter + 1):
        for local, price in zip(locals_, prices):
            objective = _AugmentedObjective(local.base, local.base_support, local.problem.num_vars, exp_form,
                                            local.copies, consensus[local.shared], price, penalty)
            local_problem = replace(local.problem, objective=objective, x0=local.x)
            report = solve(local_problem, cfg.tolerances)
            local.x = report.x

        previous = consensus.copy()
        totals = np.zeros(problem.num_tps)
        counts = np.zeros(problem.num_tps)
        for local, price in zip(locals_, prices):
            np.add.at(totals, local.shared, local.x[local.copies] + price / penalty)
            np.add.at(counts, local.shared, 1)
        held = counts > 0
        consensus[held] = np.clip(totals[held] / counts[held], lower, upper)

        gap = 0.0
        step = penalty * price_step_size(cfg, iteration)
        for local, price in zip(locals_, prices):
            difference = local.x[local.copies] - consensus[local.shared]
            price += step * difference
            gap = max(gap, float(np.max(np.abs(difference), initial=0.0)))
        drift = float(np.max(np.abs(consensus[held] - previous[held]), initial=0.0))
        max_price = max(float(np.max(np.abs(p), initial=0.0)) for p in prices)
        price_history.append(ConsensusRound(outer, iteration, gap, max_price))
        if gap < cfg.price_tol and drift < cfg.price_tol:
            converged = True
            break

    if not converged:
        logger.warning("consensus stopped at %d iterations with gap %.3g", iteration, gap)
    rho = np.zeros(problem.num_tps)
    rho[problem.serving] = np.exp(consensus[problem.serving])
    return problem.clamp(rho), gap, iteration, converged


@dataclass
class DistributedAfResult:
    rho: np.ndarray
    price_history: list[ConsensusRound]
    consensus_gap: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)
    utility_history: list[float] = field(default_factory=list)


def optimize_af_distributed(served, gains: ChannelGains, util: UtilityConfig, cfg: AfConfig | None = None,
                            initial_rho=None) -> DistributedAfResult:
    """Each TP solves its own block with copies of the interferers' fractions; prices enforce agreement."""
    cfg = cfg or AfConfig()
    problem = _as_problem(served, gains, util, cfg)
    price_history: list[ConsensusRound] = []
    tracker = {"gap": 0.0, "iterations": 0, "converged": True, "outer": 0}

    def consensus_step(state: AfState, problem: AfProblem, cfg: AfConfig) -> AfState:
        tracker["outer"] += 1
        outer = tracker["outer"]
        if problem.regime == AfRegime.BELOW_ONE:
            C_terms = (1 + C_MARGIN) * interference_free_terms(problem)
            point = _expansion_point(state, problem, C_terms, per_tp_y=True)
            rho = state.rho
            previous_y = sum(point[_y(b)] for b in problem.serving)
            for _ in range(cfg.max_condensations):
                start_rho, t = _condensation_start(state, problem, point)
                blocks = [_block_below_one(state, problem, b, point, start_rho, t, C_terms[b])
                          for b in problem.serving]
                rho, gap, iterations, converged = _consensus(blocks, problem, cfg, True, outer, price_history)
                point = _refresh_point(state, problem, rho, C_terms)
                current_y = sum(point[_y(b)] for b in problem.serving)
                if relative_change(current_y, previous_y) < cfg.inner_tol:
                    break
                previous_y = current_y
        else:
            start_rho, t = _rate_start(state, problem)
            build = _block_above_one if problem.regime == AfRegime.ABOVE_ONE else _block_one
            blocks = [build(state, problem, b, start_rho, t) for b in problem.serving]
            rho, gap, iterations, converged = _consensus(blocks, problem, cfg, problem.regime == AfRegime.ABOVE_ONE,
                                                         outer, price_history)
        tracker.update(gap=gap, iterations=tracker["iterations"] + iterations,
                       converged=tracker["converged"] and converged)
        return replace(state, rho=rho)

    result = _alternate(problem, cfg, initial_rho, consensus_step)
    return DistributedAfResult(result.rho, price_history, tracker["gap"], tracker["iterations"],
                               tracker["converged"], result.history, result.utility_history)


def _refresh_point(state: AfState, problem: AfProblem, rho: np.ndarray, C_terms: np.ndarray) -> dict[str, float]:
    """Next condensation point for the distributed form: the agreed fractions with tight t, z, y."""
    t = np.maximum(state.rate_bound(rho), T_FLOOR)
    z = problem.tp_sums(t)
    point = {_t(i): t[i] for i in range(len(t))}
    point.update({_rho(b): rho[b] for b in problem.serving})
    point.update({_z(b): z[b] for b in problem.serving})
    point.update({_y(b): C_terms[b] - z[b] ** problem.alpha for b in problem.serving})
    return point


def export_history_csv(path: str | Path, result: AfResult | DistributedAfResult):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "objective", "utility"])
        for i, (objective, utility) in enumerate(zip(result.history, result.utility_history)):
            writer.writerow([i, repr(float(objective)), repr(float(utility))])


def export_price_history_csv(path: str | Path, result: DistributedAfResult):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["outer", "iteration", "consensus_gap", "max_price"])
        for entry in result.price_history:
            writer.writerow([entry.outer, entry.iteration, repr(float(entry.consensus_gap)),
                             repr(float(entry.max_price))])
