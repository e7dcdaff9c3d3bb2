from dataclasses import dataclass, field
from enum import IntEnum
import itertools
import logging
import math

import numpy as np

from common.calculations import sgn
from common.errors import BoundViolation
from common.setfn import Association, LoadVector, SetFunction

logger = logging.getLogger(__name__)

MONOTONE_TOLERANCE = 1e-9


class BoundKind(IntEnum):
    GREEDY_HALF = 1
    GREEDY_ADDITIVE_2LN2 = 2
    GREEDY_RATIO_3_MINUS_2ALPHA = 3
    LOCAL_SEARCH = 4


class BoundDirection(IntEnum):
    UPPER = 1  # g* <= bound_value
    LOWER = 2  # g* >= bound_value


@dataclass
class GlsConfig:
    delta: float = 0.0
    max_iter: int = 100

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass
class BoundCertificate:
    g_solution: float
    bound_kind: BoundKind
    bound_value: float
    direction: BoundDirection
    h_value: float = math.nan
    omega_tilde_size: int = 0
    fixed_point: bool = True

    def holds_for(self, g_opt: float, rel_tol: float = 1e-9) -> bool:
        slack = rel_tol * max(1.0, abs(g_opt), abs(self.bound_value))
        if self.direction == BoundDirection.UPPER:
            return g_opt <= self.bound_value + slack
        return g_opt >= self.bound_value - slack

    def check(self, g_opt: float):
        if not self.holds_for(g_opt):
            relation = "<=" if self.direction == BoundDirection.UPPER else ">="
            raise BoundViolation(
                f"{self.bound_kind.name}: expected g* {relation} {self.bound_value!r}, enumerated g* = {g_opt!r}")


@dataclass
class GreedyResult:
    association: Association
    deltas: list[float]
    evaluations: int


@dataclass
class LocalSearchResult:
    association: Association
    iterations: int
    fixed_point: bool
    history: list[float] = field(default_factory=list)


@dataclass
class GlsResult:
    association: Association
    certificates: list[BoundCertificate]
    greedy: GreedyResult
    local_search: LocalSearchResult


def greedy_stage(set_fn: SetFunction) -> GreedyResult:
    set_fn.check_users_feasible()
    association = Association(set_fn.num_users, set_fn.num_tps)
    loads = set_fn.empty_loads()
    deltas: list[float] = []
    evaluations = 0

    for _ in range(set_fn.num_users):
        users = association.unassigned_users()
        ks, bs = np.nonzero(set_fn.feasible[users])
        ks = users[ks]
        gains = set_fn.add_gain(ks, bs, loads.psi[bs])
        evaluations += len(gains)

        # nonzero() yields candidates in (k, b) order, so the first extremum is the lexicographic one
        i = int(np.argmax(gains)) if set_fn.maximizes else int(np.argmin(gains))
        k, b = int(ks[i]), int(bs[i])
        association.add(k, b)
        set_fn.add_to_loads(loads, k, b)
        deltas.append(float(gains[i]))
        logger.debug("greedy: user %d -> TP %d, delta %.6g", k, b, deltas[-1])

    if not marginals_monotone(deltas, set_fn.maximizes):
        logger.warning("greedy marginal sequence is not monotone: %s", deltas)
    return GreedyResult(association, deltas, evaluations)


def marginals_monotone(deltas: list[float], maximizes: bool) -> bool:
    for before, after in zip(deltas, deltas[1:]):
        slack = MONOTONE_TOLERANCE * max(1.0, abs(before))
        if maximizes and after > before + slack:
            return False
        if not maximizes and after < before - slack:
            return False
    return True


def best_swap(set_fn: SetFunction, association: Association, loads: LoadVector) -> tuple[int, int, float] | None:
    """Best single-user migration over all users, ties to the lowest (k, b)."""
    best: tuple[int, int, float] | None = None
    for k in range(set_fn.num_users):
        candidate = set_fn.best_swap(k, int(association.tp_of[k]), loads)
        if candidate is None:
            continue
        if best is None or set_fn.prefers(candidate[1], best[2]):
            best = (k, candidate[0], candidate[1])
    return best


def local_search_stage(association: Association, set_fn: SetFunction, cfg: GlsConfig) -> LocalSearchResult:
    if not association.is_complete():
        raise ValueError("local search needs a complete association")
    association = association.copy()
    loads = set_fn.loads(association.tuples())
    g = set_fn.value_from_loads(loads)
    history = [g]
    iterations = 0
    fixed_point = False

    while True:
        swap = best_swap(set_fn, association, loads)
        if swap is None or not set_fn.qualifies(swap[2], g, cfg.delta):
            fixed_point = True
            break
        if iterations >= cfg.max_iter:
            logger.warning("local search stopped at max_iter=%d before a fixed point", cfg.max_iter)
            break

        k, b_to, change = swap
        b_from = int(association.tp_of[k])
        association.move(k, b_to)
        set_fn.remove_from_loads(loads, k, b_from)
        set_fn.add_to_loads(loads, k, b_to)
        g = set_fn.value_from_loads(loads)
        history.append(g)
        iterations += 1
        logger.debug("local search %d: user %d TP %d -> %d, change %.6g, g %.8g",
                     iterations, k, b_from, b_to, change, g)

    return LocalSearchResult(association, iterations, fixed_point, history)


def greedy_bound(association: Association, set_fn: SetFunction, g_opt: float | None = None) -> BoundCertificate:
    g = set_fn.value(association)
    alpha = set_fn.alpha
    if alpha < 1:
        certificate = BoundCertificate(g, BoundKind.GREEDY_HALF, 2 * g, BoundDirection.UPPER)
    elif alpha == 1:
        certificate = BoundCertificate(g, BoundKind.GREEDY_ADDITIVE_2LN2, g + 2 * math.log(2), BoundDirection.UPPER)
    else:
        certificate = BoundCertificate(g, BoundKind.GREEDY_RATIO_3_MINUS_2ALPHA, (3 - 2**alpha) * g,
                                       BoundDirection.LOWER)
    if g_opt is not None:
        certificate.check(g_opt)
    return certificate


def omega_tilde(set_fn: SetFunction, g_solution: float) -> list[tuple[int, int]]:
    """Ground set used by the local-search bound, pruned of dominated singletons when alpha > 1."""
    omega = set_fn.ground_set()
    if set_fn.alpha <= 1:
        return omega
    return [e for e in omega if set_fn.singleton_value(*e) <= g_solution]


def h_value(association: Association, set_fn: SetFunction, pruned: list[tuple[int, int]]) -> float:
    loads = set_fn.loads(association.tuples())
    g = set_fn.value_from_loads(loads)
    pruned_loads = set_fn.loads(pruned)
    members = set(pruned)

    h = 0.0
    for k, b in association.tuples():
        h += g + set_fn.remove_gain(k, b, loads.psi[b])
        if (k, b) in members:
            h -= set_fn.remove_gain(k, b, pruned_loads.psi[b])
    return h


def local_search_bound(association: Association, set_fn: SetFunction, cfg: GlsConfig,
                       fixed_point: bool = True, g_opt: float | None = None) -> BoundCertificate:
    g = set_fn.value(association)
    size = len(association)
    pruned = omega_tilde(set_fn, g)
    h = h_value(association, set_fn, pruned)

    if set_fn.alpha > 1:
        bound = g + size * (1 - cfg.delta) * g - h
        direction = BoundDirection.LOWER
    elif set_fn.alpha < 1:
        bound = g + size * (1 + cfg.delta) * g - h
        direction = BoundDirection.UPPER
    else:
        bound = g + size * (1 + cfg.delta * sgn(g)) * g - h
        direction = BoundDirection.UPPER

    certificate = BoundCertificate(g, BoundKind.LOCAL_SEARCH, bound, direction, h, len(pruned), fixed_point)
    if g_opt is not None and fixed_point:
        certificate.check(g_opt)
    return certificate


def gls(set_fn: SetFunction, cfg: GlsConfig, g_opt: float | None = None) -> GlsResult:
    greedy = greedy_stage(set_fn)
    certificates = [greedy_bound(greedy.association, set_fn, g_opt)]
    local = local_search_stage(greedy.association, set_fn, cfg)
    certificates.append(local_search_bound(local.association, set_fn, cfg, local.fixed_point, g_opt))
    logger.info("GLS alpha=%g: greedy g=%.8g, final g=%.8g after %d swaps",
                set_fn.alpha, local.history[0], local.history[-1], local.iterations)
    return GlsResult(local.association, certificates, greedy, local)


def exhaustive_optimum(set_fn: SetFunction) -> tuple[Association, float]:
    """Enumerate every complete association; first best in lexicographic order wins."""
    set_fn.check_users_feasible()
    choices = [set_fn.feasible_tps(k) for k in range(set_fn.num_users)]
    best: tuple[Association, float] | None = None
    for tps in itertools.product(*choices):
        value = set_fn.value_of(enumerate(tps))
        if best is None or set_fn.prefers(value, best[1]):
            best = (Association.from_tps(tps, set_fn.num_tps), value)
    return best
