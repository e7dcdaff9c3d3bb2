import itertools

import numpy as np

from common.model import ChannelGains, FadingModel, UtilityConfig
from common.rate import GainMatrix, RateMatrix, rate_matrix, theta_matrix
from common.setfn import Association, SetFunction


def random_gains(seed: int, num_users: int, num_tps: int, fading: FadingModel = FadingModel.NONE) -> ChannelGains:
    """Noise-normalized gains spread over three decades, every link usable."""
    rng = np.random.default_rng(seed)
    return ChannelGains(10 ** rng.uniform(-1.0, 2.0, size=(num_users, num_tps)), fading)


def random_utility(seed: int, alpha: float, num_users: int) -> UtilityConfig:
    rng = np.random.default_rng([seed, 1])
    return UtilityConfig.normalized(alpha, rng.uniform(0.5, 1.5, size=num_users))


def random_set_function(seed: int, num_users: int, num_tps: int, alpha: float) -> SetFunction:
    gains = random_gains(seed, num_users, num_tps)
    rates = rate_matrix(gains, np.ones(num_tps), mc_samples=0)
    util = random_utility(seed, alpha, num_users)
    return SetFunction(theta_matrix(rates, util), rates, util)


def theta_set_function(theta, alpha: float) -> SetFunction:
    """Set function over explicit Theta values (alpha != 1); rates are unused there."""
    theta = np.array(theta, dtype=float)
    feasible = theta > 0
    util = UtilityConfig.uniform(alpha, theta.shape[0])
    return SetFunction(GainMatrix(np.where(feasible, theta, np.nan), alpha, feasible),
                       RateMatrix(np.ones(theta.shape), 0), util)


def all_associations(set_fn: SetFunction):
    choices = [set_fn.feasible_tps(k) for k in range(set_fn.num_users)]
    for tps in itertools.product(*choices):
        yield Association.from_tps(tps, set_fn.num_tps)


def grid_search_rho(problem, steps: int = 20) -> tuple[np.ndarray, float]:
    """Best AF objective over rho in {1/steps, ..., 1}^2 for a two-TP problem."""
    levels = np.arange(1, steps + 1) / steps
    best_rho, best = None, None
    for r0, r1 in itertools.product(levels, levels):
        rho = problem.clamp(np.array([r0, r1]))
        value = problem.objective(rho)
        if best is None or problem.improves(value, best) and value != best:
            best_rho, best = rho, value
    return best_rho, best
