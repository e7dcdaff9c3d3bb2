"""Dense log-barrier interior-point solver and the geometric-program front end built on it."""
from dataclasses import dataclass, field
import logging
import math
from typing import Callable

import numpy as np
from scipy.special import logsumexp, softmax

from common.errors import GpStructureError, InfeasibleProblemError, SolverError

logger = logging.getLogger(__name__)

BARRIER_GROWTH = 20.0
NEWTON_TOLERANCE = 1e-12
MAX_NEWTON_STEPS = 80
ARMIJO_SLOPE = 0.01
STEP_SHRINK = 0.5
MIN_STEP = 1e-14
PHASE_ONE_FLOOR = -1.0  # keeps the auxiliary problem bounded below
MAX_LOG_VALUE = 700.0  # exp overflows a float just above 709


@dataclass
class Tolerances:
    feas_tol: float = 1e-9
    opt_tol: float = 1e-8
    max_iter: int = 500


class ConvexTerm:
    """A smooth convex function of x[support]; support None means every variable."""
    support: np.ndarray | None = None

    def evaluate(self, x: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def value(self, x: np.ndarray) -> float:
        return self.evaluate(x)[0]


class LogSumExp(ConvexTerm):
    """log sum_i exp(a_i . x + c_i)."""

    def __init__(self, exponents, log_coeffs, support=None):
        self.exponents = np.atleast_2d(np.asarray(exponents, dtype=float))
        self.log_coeffs = np.asarray(log_coeffs, dtype=float).reshape(-1)
        self.support = None if support is None else np.asarray(support, dtype=int)

    def evaluate(self, x):
        z = self.exponents @ x + self.log_coeffs
        p = softmax(z)
        grad = self.exponents.T @ p
        hess = (self.exponents.T * p) @ self.exponents - np.outer(grad, grad)
        return float(logsumexp(z)), grad, hess

    def value(self, x):
        return float(logsumexp(self.exponents @ x + self.log_coeffs))


class Affine(ConvexTerm):

    def __init__(self, coeffs, constant: float = 0.0, support=None):
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.constant = float(constant)
        self.support = None if support is None else np.asarray(support, dtype=int)

    def evaluate(self, x):
        return float(self.coeffs @ x + self.constant), self.coeffs, np.zeros((len(x), len(x)))

    def value(self, x):
        return float(self.coeffs @ x + self.constant)


class SmoothFunction(ConvexTerm):

    def __init__(self, fun: Callable, grad: Callable, hess: Callable, support=None):
        self.fun = fun
        self.grad = grad
        self.hess = hess
        self.support = None if support is None else np.asarray(support, dtype=int)

    def evaluate(self, x):
        return float(self.fun(x)), np.asarray(self.grad(x), dtype=float), np.atleast_2d(self.hess(x))

    def value(self, x):
        return float(self.fun(x))


class _Shifted(ConvexTerm):
    """term(x) - s where s is an extra trailing variable; used by phase one."""

    def __init__(self, term: ConvexTerm, term_support: np.ndarray, s_index: int):
        self.term = term
        self.term_support = term_support
        self.support = np.append(term_support, s_index)

    def evaluate(self, x):
        value, grad, hess = self.term.evaluate(x[:-1])
        n = len(x)
        full_hess = np.zeros((n, n))
        full_hess[:-1, :-1] = hess
        return value - x[-1], np.append(grad, -1.0), full_hess

    def value(self, x):
        return self.term.value(x[:-1]) - x[-1]


@dataclass(eq=False)
class ConvexProblem:
    num_vars: int
    objective: ConvexTerm
    inequalities: list[ConvexTerm] = field(default_factory=list)
    eq_matrix: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    x0: np.ndarray | None = None
    names: list[str] | None = None

    def __post_init__(self):
        n = self.num_vars
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if np.any(self.lower >= self.upper):
            raise ValueError("every variable needs lower < upper")
        if self.eq_matrix is not None:
            self.eq_matrix = np.atleast_2d(np.asarray(self.eq_matrix, dtype=float))
            self.eq_rhs = np.asarray(self.eq_rhs, dtype=float).reshape(-1)

    def supports(self) -> list[np.ndarray]:
        everything = np.arange(self.num_vars)
        return [everything if term.support is None else term.support
                for term in [self.objective, *self.inequalities]]

    def max_violation(self, x: np.ndarray) -> float:
        supports = self.supports()
        violation = 0.0
        for term, support in zip(self.inequalities, supports[1:]):
            violation = max(violation, term.value(x[support]))
        violation = max(violation, float(np.max(self.lower - x, initial=0.0)), float(np.max(x - self.upper, initial=0.0)))
        if self.eq_matrix is not None:
            violation = max(violation, float(np.max(np.abs(self.eq_matrix @ x - self.eq_rhs))))
        return max(violation, 0.0)


@dataclass
class SolveReport:
    x: np.ndarray
    objective: float
    max_violation: float
    iterations: int
    converged: bool
    kkt_residual: float
    multipliers: np.ndarray | None = None
    eq_multipliers: np.ndarray | None = None
    values: dict[str, float] | None = None


class _Barrier:
    """Evaluates t f0(x) - sum log(-f_i(x)) - sum log(box slacks) and its derivatives."""

    def __init__(self, problem: ConvexProblem):
        self.problem = problem
        self.supports = problem.supports()
        self.has_lower = np.isfinite(problem.lower)
        self.has_upper = np.isfinite(problem.upper)
        self.num_constraints = len(problem.inequalities) + int(np.sum(self.has_lower) + np.sum(self.has_upper))

    def inside(self, x: np.ndarray) -> bool:
        if np.any(x[self.has_lower] <= self.problem.lower[self.has_lower]):
            return False
        if np.any(x[self.has_upper] >= self.problem.upper[self.has_upper]):
            return False
        for term, support in zip(self.problem.inequalities, self.supports[1:]):
            value = term.value(x[support])
            if not value < 0:
                return False
        return True

    def value(self, x: np.ndarray, t: float) -> float:
        if not self.inside(x):
            return math.inf
        total = t * self.problem.objective.value(x[self.supports[0]])
        for term, support in zip(self.problem.inequalities, self.supports[1:]):
            total -= math.log(-term.value(x[support]))
        total -= np.sum(np.log(x[self.has_lower] - self.problem.lower[self.has_lower]))
        total -= np.sum(np.log(self.problem.upper[self.has_upper] - x[self.has_upper]))
        return float(total)

    def derivatives(self, x: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = len(x)
        grad = np.zeros(n)
        hess = np.zeros((n, n))
        support = self.supports[0]
        _, g, h = self.problem.objective.evaluate(x[support])
        grad[support] += t * g
        hess[np.ix_(support, support)] += t * h

        slacks = np.zeros(len(self.problem.inequalities))
        for i, (term, support) in enumerate(zip(self.problem.inequalities, self.supports[1:])):
            f, g, h = term.evaluate(x[support])
            slacks[i] = -f
            grad[support] += g / -f
            hess[np.ix_(support, support)] += h / -f + np.outer(g, g) / f**2

        low = x - self.problem.lower
        high = self.problem.upper - x
        grad[self.has_lower] -= 1 / low[self.has_lower]
        grad[self.has_upper] += 1 / high[self.has_upper]
        diag = np.zeros(n)
        diag[self.has_lower] += 1 / low[self.has_lower] ** 2
        diag[self.has_upper] += 1 / high[self.has_upper] ** 2
        hess[np.diag_indices(n)] += diag
        return grad, hess, slacks


def _newton_direction(hess: np.ndarray, grad: np.ndarray, eq_matrix: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    n = len(grad)
    if eq_matrix is None:
        kkt, rhs = hess, -grad
    else:
        p = eq_matrix.shape[0]
        kkt = np.block([[hess, eq_matrix.T], [eq_matrix, np.zeros((p, p))]])
        rhs = np.concatenate([-grad, np.zeros(p)])
    try:
        solution = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        solution = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return solution[:n], solution[n:]


def _barrier_method(problem: ConvexProblem, x: np.ndarray, tol: Tolerances,
                    stop_below: float | None = None) -> SolveReport:
    barrier = _Barrier(problem)
    m = barrier.num_constraints
    t = 1.0
    iterations = 0
    nu = np.zeros(0 if problem.eq_matrix is None else problem.eq_matrix.shape[0])
    grad = np.zeros(problem.num_vars)
    slacks = np.zeros(len(problem.inequalities))

    while True:
        phi = barrier.value(x, t)
        for _ in range(MAX_NEWTON_STEPS):
            if iterations >= tol.max_iter:
                break
            grad, hess, slacks = barrier.derivatives(x, t)
            dx, w = _newton_direction(hess, grad, problem.eq_matrix)
            nu = w / t
            decrement = -float(grad @ dx)
            if decrement / 2 <= NEWTON_TOLERANCE:
                break
            step = 1.0
            while step > MIN_STEP:
                candidate = barrier.value(x + step * dx, t)
                if candidate <= phi - ARMIJO_SLOPE * step * decrement:
                    break
                step *= STEP_SHRINK
            if step <= MIN_STEP:
                break
            x = x + step * dx
            phi = barrier.value(x, t)
            iterations += 1
            if stop_below is not None and problem.objective.value(x[barrier.supports[0]]) < stop_below:
                return _report(problem, barrier, x, t, iterations, grad, nu, slacks, tol, m)

        if m == 0 or m / t <= tol.opt_tol or iterations >= tol.max_iter:
            break
        t *= BARRIER_GROWTH
        logger.debug("barrier t=%.3g iterations=%d objective=%.10g", t, iterations,
                     problem.objective.value(x[barrier.supports[0]]))

    grad, _, slacks = barrier.derivatives(x, t)
    return _report(problem, barrier, x, t, iterations, grad, nu, slacks, tol, m)


def _report(problem: ConvexProblem, barrier: _Barrier, x: np.ndarray, t: float, iterations: int,
            barrier_grad: np.ndarray, nu: np.ndarray, slacks: np.ndarray, tol: Tolerances, m: int) -> SolveReport:
    stationarity = barrier_grad / t
    if problem.eq_matrix is not None and len(nu) == problem.eq_matrix.shape[0]:
        stationarity = stationarity + problem.eq_matrix.T @ nu
    _, objective_grad, _ = problem.objective.evaluate(x[barrier.supports[0]])
    scale = max(1.0, float(np.max(np.abs(objective_grad), initial=0.0)))
    kkt_residual = max(m / t, float(np.max(np.abs(stationarity), initial=0.0)) / scale)
    violation = problem.max_violation(x)
    converged = kkt_residual <= tol.opt_tol and violation <= tol.feas_tol
    return SolveReport(
        x=x,
        objective=problem.objective.value(x[barrier.supports[0]]),
        max_violation=violation,
        iterations=iterations,
        converged=converged,
        kkt_residual=kkt_residual,
        multipliers=1 / (t * slacks) if len(slacks) else np.zeros(0),
        eq_multipliers=nu,
        values=None if problem.names is None else dict(zip(problem.names, x.tolist())),
    )


def _default_start(problem: ConvexProblem) -> np.ndarray:
    lower, upper = problem.lower, problem.upper
    x = np.zeros(problem.num_vars)
    both = np.isfinite(lower) & np.isfinite(upper)
    x[both] = (lower[both] + upper[both]) / 2
    only_lower = np.isfinite(lower) & ~np.isfinite(upper)
    x[only_lower] = lower[only_lower] + 1
    only_upper = ~np.isfinite(lower) & np.isfinite(upper)
    x[only_upper] = upper[only_upper] - 1
    return x


def _project_to_equalities(problem: ConvexProblem, x: np.ndarray) -> np.ndarray:
    if problem.eq_matrix is None:
        return x
    residual = problem.eq_matrix @ x - problem.eq_rhs
    correction = np.linalg.lstsq(problem.eq_matrix, residual, rcond=None)[0]
    return x - correction


def _phase_one(problem: ConvexProblem, x: np.ndarray, tol: Tolerances) -> np.ndarray:
    """Minimize s subject to f_i(x) <= s to reach a strictly feasible point."""
    supports = problem.supports()[1:]
    s0 = max(term.value(x[support]) for term, support in zip(problem.inequalities, supports)) + 1.0
    n = problem.num_vars
    shifted = [_Shifted(term, support, n) for term, support in zip(problem.inequalities, supports)]
    eq_matrix = None
    if problem.eq_matrix is not None:
        eq_matrix = np.hstack([problem.eq_matrix, np.zeros((problem.eq_matrix.shape[0], 1))])
    auxiliary = ConvexProblem(
        num_vars=n + 1,
        objective=Affine([1.0], support=[n]),
        inequalities=shifted,
        eq_matrix=eq_matrix,
        eq_rhs=problem.eq_rhs,
        lower=np.append(problem.lower, PHASE_ONE_FLOOR),
        upper=np.append(problem.upper, np.inf),
    )
    report = _barrier_method(auxiliary, np.append(x, s0), tol, stop_below=0.0)
    if not report.x[-1] < 0:
        raise InfeasibleProblemError(f"no strictly feasible point found (phase one reached s = {report.x[-1]:.3g})")
    return report.x[:-1]


def solve(problem: ConvexProblem, tol: Tolerances | None = None) -> SolveReport:
    tol = tol or Tolerances()
    x = _default_start(problem) if problem.x0 is None else np.array(problem.x0, dtype=float)
    x = _project_to_equalities(problem, x)

    barrier = _Barrier(problem)
    if np.any(x[barrier.has_lower] <= problem.lower[barrier.has_lower]) or \
            np.any(x[barrier.has_upper] >= problem.upper[barrier.has_upper]):
        raise InfeasibleProblemError("start point is not strictly inside the variable bounds")
    if not barrier.inside(x):
        logger.debug("start point infeasible, running phase one")
        x = _phase_one(problem, x, tol)

    report = _barrier_method(problem, x, tol)
    if not report.converged:
        logger.debug("barrier stopped after %d iterations, kkt residual %.3g", report.iterations, report.kkt_residual)
    return report


# Geometric programs

@dataclass(frozen=True)
class Monomial:
    coefficient: float
    exponents: dict[str, float] = field(default_factory=dict)

    def value(self, point: dict[str, float]) -> float:
        return self.coefficient * math.prod(point[name] ** a for name, a in self.exponents.items())


Posynomial = list[Monomial]


def posynomial_value(posynomial: Posynomial, point: dict[str, float]) -> float:
    return sum(m.value(point) for m in posynomial)


@dataclass
class GeometricProgram:
    """minimize objective s.t. each inequality posynomial <= 1 and each equality monomial == 1."""
    variables: list[str]
    objective: Posynomial
    inequalities: list[Posynomial] = field(default_factory=list)
    equalities: list[Monomial] = field(default_factory=list)
    lower: dict[str, float] = field(default_factory=dict)
    upper: dict[str, float] = field(default_factory=dict)
    x0: dict[str, float] | None = None


def _log_sum_exp_term(posynomial: Posynomial, index: dict[str, int], what: str) -> LogSumExp:
    if len(posynomial) == 0:
        raise GpStructureError(f"{what}: empty posynomial")
    names = sorted({name for m in posynomial for name in m.exponents})
    for name in names:
        if name not in index:
            raise GpStructureError(f"{what}: unknown variable '{name}'")
    local = {name: i for i, name in enumerate(names)}
    exponents = np.zeros((len(posynomial), len(names)))
    log_coeffs = np.zeros(len(posynomial))
    for row, m in enumerate(posynomial):
        if not (m.coefficient > 0 and math.isfinite(m.coefficient)):
            raise GpStructureError(f"{what}: coefficient {m.coefficient!r} is not positive")
        for name, a in m.exponents.items():
            if not math.isfinite(a):
                raise GpStructureError(f"{what}: exponent of '{name}' is not finite")
            exponents[row, local[name]] = a
        log_coeffs[row] = math.log(m.coefficient)
    return LogSumExp(exponents, log_coeffs, [index[name] for name in names])


def gp_to_convex(gp: GeometricProgram) -> ConvexProblem:
    index = {name: i for i, name in enumerate(gp.variables)}
    n = len(gp.variables)
    objective = _log_sum_exp_term(gp.objective, index, "objective")
    inequalities = [_log_sum_exp_term(p, index, f"inequality {i}") for i, p in enumerate(gp.inequalities)]

    eq_matrix = eq_rhs = None
    if gp.equalities:
        eq_matrix = np.zeros((len(gp.equalities), n))
        eq_rhs = np.zeros(len(gp.equalities))
        for row, m in enumerate(gp.equalities):
            if not m.coefficient > 0:
                raise GpStructureError(f"equality {row}: coefficient {m.coefficient!r} is not positive")
            for name, a in m.exponents.items():
                if name not in index:
                    raise GpStructureError(f"equality {row}: unknown variable '{name}'")
                eq_matrix[row, index[name]] = a
            eq_rhs[row] = -math.log(m.coefficient)

    def log_bound(bounds: dict[str, float], default: float) -> np.ndarray:
        values = np.full(n, default)
        for name, bound in bounds.items():
            if not bound > 0:
                raise GpStructureError(f"bound on '{name}' must be positive")
            values[index[name]] = math.log(bound)
        return values

    x0 = None
    if gp.x0 is not None:
        for name in gp.variables:
            if not gp.x0[name] > 0:
                raise GpStructureError(f"start value of '{name}' must be positive, got {gp.x0[name]!r}")
        x0 = np.array([math.log(gp.x0[name]) for name in gp.variables])
    return ConvexProblem(n, objective, inequalities, eq_matrix, eq_rhs,
                         log_bound(gp.lower, -np.inf), log_bound(gp.upper, np.inf), x0, list(gp.variables))


def solve_gp_logform(gp: GeometricProgram, tol: Tolerances | None = None) -> SolveReport:
    """Solve in y = log x; the report carries x = exp(y) and the posynomial objective value."""
    report = solve(gp_to_convex(gp), tol)
    if not (np.all(np.isfinite(report.x)) and math.isfinite(report.objective)):
        raise SolverError("geometric program: solver returned a non-finite point")
    largest = max(float(np.max(np.abs(report.x), initial=0.0)), abs(report.objective))
    if largest > MAX_LOG_VALUE:
        raise SolverError(f"geometric program diverged: a log-space value reached {largest:.4g}")
    x = np.exp(report.x)
    return SolveReport(
        x=x,
        objective=math.exp(report.objective),
        max_violation=report.max_violation,
        iterations=report.iterations,
        converged=report.converged,
        kkt_residual=report.kkt_residual,
        multipliers=report.multipliers,
        eq_multipliers=report.eq_multipliers,
        values=dict(zip(gp.variables, x.tolist())),
    )
