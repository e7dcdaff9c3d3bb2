from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from common.calculations import sgn, xlogx
from common.constants import IMPROVEMENT_TOLERANCE
from common.errors import InfeasibleUserError, MatroidError
from common.model import UtilityConfig
from common.rate import GainMatrix, RateMatrix

UNASSIGNED = -1


class AssociationTuple(NamedTuple):
    user: int
    tp: int


class Association:
    """A member of the partition matroid: at most one TP per user."""

    def __init__(self, num_users: int, num_tps: int):
        self.num_users = num_users
        self.num_tps = num_tps
        self.tp_of = np.full(num_users, UNASSIGNED, dtype=int)

    @staticmethod
    def from_tps(tps: Sequence[int], num_tps: int) -> "Association":
        association = Association(len(tps), num_tps)
        for k, b in enumerate(tps):
            if b != UNASSIGNED:
                association.add(k, int(b))
        return association

    def add(self, k: int, b: int):
        if not 0 <= b < self.num_tps:
            raise MatroidError(f"TP {b} out of range")
        if self.tp_of[k] != UNASSIGNED:
            raise MatroidError(f"user {k} is already associated to TP {self.tp_of[k]}")
        self.tp_of[k] = b

    def remove(self, k: int) -> int:
        b = int(self.tp_of[k])
        if b == UNASSIGNED:
            raise MatroidError(f"user {k} is not associated")
        self.tp_of[k] = UNASSIGNED
        return b

    def move(self, k: int, b: int):
        self.remove(k)
        self.add(k, b)

    def contains(self, e: tuple[int, int]) -> bool:
        return self.tp_of[e[0]] == e[1]

    def tuples(self) -> list[AssociationTuple]:
        return [AssociationTuple(int(k), int(self.tp_of[k])) for k in self.assigned_users()]

    def assigned_users(self) -> np.ndarray:
        return np.flatnonzero(self.tp_of != UNASSIGNED)

    def unassigned_users(self) -> np.ndarray:
        return np.flatnonzero(self.tp_of == UNASSIGNED)

    def users_on(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.tp_of == b)

    def serving_tps(self) -> np.ndarray:
        return np.unique(self.tp_of[self.tp_of != UNASSIGNED])

    def is_complete(self) -> bool:
        return bool(np.all(self.tp_of != UNASSIGNED))

    def copy(self) -> "Association":
        other = Association(self.num_users, self.num_tps)
        other.tp_of = self.tp_of.copy()
        return other

    def __len__(self) -> int:
        return int(np.count_nonzero(self.tp_of != UNASSIGNED))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Association):
            return NotImplemented
        return self.num_tps == other.num_tps and np.array_equal(self.tp_of, other.tp_of)

    def __repr__(self) -> str:
        return f"Association({self.tp_of.tolist()})"


@dataclass(eq=False)
class LoadVector:
    psi: np.ndarray
    logterm: np.ndarray

    @staticmethod
    def empty(num_tps: int) -> "LoadVector":
        return LoadVector(np.zeros(num_tps), np.zeros(num_tps))

    def copy(self) -> "LoadVector":
        return LoadVector(self.psi.copy(), self.logterm.copy())


class SetFunction:
    """g(., alpha) over tuple sets, with O(1) marginals driven by TP loads."""

    def __init__(self, theta: GainMatrix, rates: RateMatrix, util: UtilityConfig):
        if theta.alpha != util.alpha:
            raise ValueError(f"gain matrix was built for alpha={theta.alpha}, utility has alpha={util.alpha}")
        self.alpha = util.alpha
        self.theta = theta.theta
        self.feasible = theta.feasible
        self.rates = rates.R
        self.weights = util.weights
        self.logterm = np.full(self.theta.shape, np.nan)
        if self.alpha == 1:
            w = np.broadcast_to(self.weights[:, None], self.theta.shape)
            self.logterm[self.feasible] = w[self.feasible] * np.log(w[self.feasible] * self.rates[self.feasible])

    @property
    def num_users(self) -> int:
        return self.theta.shape[0]

    @property
    def num_tps(self) -> int:
        return self.theta.shape[1]

    @property
    def maximizes(self) -> bool:
        return self.alpha <= 1

    def feasible_tps(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.feasible[k])

    def ground_set(self) -> list[AssociationTuple]:
        return [AssociationTuple(int(k), int(b)) for k, b in np.argwhere(self.feasible)]

    def check_users_feasible(self):
        for k in range(self.num_users):
            if not np.any(self.feasible[k]):
                raise InfeasibleUserError(k)

    def prefers(self, a: float, b: float) -> bool:
        """True when value a is strictly better than b in the native direction."""
        return a > b if self.maximizes else a < b

    def _check_feasible(self, k: int, b: int):
        if not self.feasible[k, b]:
            raise MatroidError(f"tuple ({k}, {b}) is outside the ground set")

    # loads

    def empty_loads(self) -> LoadVector:
        return LoadVector.empty(self.num_tps)

    def loads(self, tuples: Iterable[tuple[int, int]]) -> LoadVector:
        loads = self.empty_loads()
        for k, b in tuples:
            self.add_to_loads(loads, k, b)
        return loads

    def add_to_loads(self, loads: LoadVector, k: int, b: int):
        self._check_feasible(k, b)
        loads.psi[b] += self.theta[k, b]
        if self.alpha == 1:
            loads.logterm[b] += self.logterm[k, b]

    def remove_from_loads(self, loads: LoadVector, k: int, b: int):
        loads.psi[b] = max(loads.psi[b] - self.theta[k, b], 0.0)
        if self.alpha == 1:
            loads.logterm[b] -= self.logterm[k, b]

    def value_from_loads(self, loads: LoadVector) -> float:
        if self.alpha == 1:
            return float(np.sum(loads.logterm) - np.sum(xlogx(loads.psi)))
        return float(np.sum(np.maximum(loads.psi, 0.0) ** self.alpha))

    # evaluation

    def value_of(self, tuples: Iterable[tuple[int, int]]) -> float:
        """g of an arbitrary subset of the ground set (users may repeat)."""
        return self.value_from_loads(self.loads(tuples))

    def value(self, association: Association) -> float:
        return self.value_of(association.tuples())

    def singleton_value(self, k: int, b: int) -> float:
        return self.value_of([(k, b)])

    def add_gain(self, k, b, psi):
        """g change of placing user k on TP b whose load is psi (vectorizes over arrays)."""
        theta = self.theta[k, b]
        if self.alpha == 1:
            return self.logterm[k, b] + xlogx(psi) - xlogx(psi + theta)
        return (psi + theta) ** self.alpha - psi ** self.alpha

    def remove_gain(self, k: int, b: int, psi: float) -> float:
        """g change of taking user k off TP b whose load (including k) is psi."""
        rest = max(psi - self.theta[k, b], 0.0)
        return -float(self.add_gain(k, b, rest))

    def marginal_add(self, association: Association, k: int, b: int, loads: LoadVector) -> float:
        if association.tp_of[k] != UNASSIGNED:
            raise MatroidError(f"user {k} is already associated to TP {association.tp_of[k]}")
        self._check_feasible(k, b)
        return float(self.add_gain(k, b, loads.psi[b]))

    def marginal_swap(self, association: Association, k: int, b_to: int, loads: LoadVector) -> float:
        b_from = int(association.tp_of[k])
        if b_from == UNASSIGNED:
            raise MatroidError(f"user {k} is not associated")
        if b_from == b_to:
            raise MatroidError(f"user {k} is already on TP {b_to}")
        self._check_feasible(k, b_to)
        return self.remove_gain(k, b_from, loads.psi[b_from]) + float(self.add_gain(k, b_to, loads.psi[b_to]))

    # selection rules, ties to the lowest index

    def _pick(self, values: np.ndarray) -> int:
        if self.maximizes:
            return int(np.argmax(np.where(np.isnan(values), -np.inf, values)))
        return int(np.argmin(np.where(np.isnan(values), np.inf, values)))

    def add_gains_for_user(self, k: int, loads: LoadVector) -> np.ndarray:
        gains = np.full(self.num_tps, np.nan)
        tps = self.feasible_tps(k)
        gains[tps] = self.add_gain(k, tps, loads.psi[tps])
        return gains

    def best_tp(self, k: int, loads: LoadVector) -> tuple[int, float]:
        gains = self.add_gains_for_user(k, loads)
        b = self._pick(gains)
        return b, float(gains[b])

    def swap_gains_for_user(self, k: int, b_from: int, loads: LoadVector) -> np.ndarray:
        gains = self.add_gains_for_user(k, loads)
        gains[b_from] = np.nan
        return gains + self.remove_gain(k, b_from, loads.psi[b_from])

    def best_swap(self, k: int, b_from: int, loads: LoadVector) -> tuple[int, float] | None:
        gains = self.swap_gains_for_user(k, b_from, loads)
        if np.all(np.isnan(gains)):
            return None
        b = self._pick(gains)
        return b, float(gains[b])

    def qualifies(self, change: float, g_current: float, delta: float) -> bool:
        """Relative-improvement test a swap must pass to be applied."""
        slack = IMPROVEMENT_TOLERANCE * max(1.0, abs(g_current))
        if self.maximizes:
            return change > delta * sgn(g_current) * g_current + slack
        return change < -delta * g_current - slack


def g_value(association: Association, theta: GainMatrix, rates: RateMatrix, util: UtilityConfig) -> float:
    return SetFunction(theta, rates, util).value(association)


def marginal_add(association: Association, e: tuple[int, int], theta: GainMatrix, rates: RateMatrix,
                 util: UtilityConfig, loads: LoadVector) -> float:
    return SetFunction(theta, rates, util).marginal_add(association, e[0], e[1], loads)


def marginal_swap(association: Association, from_tuple: tuple[int, int], to_tuple: tuple[int, int],
                  theta: GainMatrix, rates: RateMatrix, util: UtilityConfig, loads: LoadVector) -> float:
    if from_tuple[0] != to_tuple[0]:
        raise MatroidError(f"swap must keep the user: {from_tuple} -> {to_tuple}")
    if not association.contains(from_tuple):
        raise MatroidError(f"tuple {from_tuple} is not in the association")
    return SetFunction(theta, rates, util).marginal_swap(association, to_tuple[0], to_tuple[1], loads)
