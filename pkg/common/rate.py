from dataclasses import dataclass
import math
from typing import TYPE_CHECKING

import numpy as np

from common.calculations import alpha_utility
from common.constants import DEFAULT_FADING_SEED, DEFAULT_MC_SAMPLES
from common.model import ChannelGains, FadingModel, UtilityConfig

if TYPE_CHECKING:
    from common.setfn import Association

ActivationVector = np.ndarray


@dataclass(eq=False)
class RateMatrix:
    R: np.ndarray
    mc_samples: int

    @property
    def num_users(self) -> int:
        return self.R.shape[0]

    @property
    def num_tps(self) -> int:
        return self.R.shape[1]


@dataclass(eq=False)
class GainMatrix:
    """Theta values per (user, TP); NaN where the tuple is outside the ground set."""
    theta: np.ndarray
    alpha: float
    feasible: np.ndarray


@dataclass(eq=False)
class RateAllocation:
    gamma: np.ndarray


def as_activation(rho, num_tps: int) -> ActivationVector:
    rho = np.array(rho, dtype=float)
    if rho.shape != (num_tps,):
        raise ValueError(f"activation vector must have {num_tps} entries, got shape {rho.shape}")
    if np.any(~np.isfinite(rho)) or np.any(rho < 0) or np.any(rho > 1):
        raise ValueError("activation fractions must lie in [0, 1]")
    return rho


def draw_user_fading(user: int, num_tps: int, mc_samples: int, seed: int = DEFAULT_FADING_SEED) -> np.ndarray:
    """Unit-mean Rayleigh power |CN(0,1)|^2 per (sample, TP), one stream per user."""
    rng = np.random.default_rng([seed, user])
    return rng.exponential(1.0, size=(mc_samples, num_tps))


def user_link_samples(gains: ChannelGains, user: int, mc_samples: int, seed: int = DEFAULT_FADING_SEED) -> np.ndarray:
    """Per-sample link gains beta[k, :] with the fading law of `gains` applied."""
    if mc_samples < 0:
        raise ValueError("mc_samples must be >= 0")
    slow = gains.slow_gain[user]
    if gains.fading_model == FadingModel.NONE:
        return slow[None, :]
    if mc_samples == 0:
        raise ValueError("mc_samples = 0 is only valid without fast fading")
    return slow[None, :] * draw_user_fading(user, gains.num_tps, mc_samples, seed)


def interference(beta: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Mean interference seen on every link: sum over b' != b of beta_b' rho_b'."""
    total = beta @ rho
    return np.maximum(total[:, None] - beta * rho[None, :], 0.0)


def _user_rates(beta: np.ndarray, rho: np.ndarray) -> np.ndarray:
    sinr = beta / (1.0 + interference(beta, rho))
    return rho * np.mean(np.log1p(sinr), axis=0)


def conservative_rate(gains: ChannelGains, rho, k: int, b: int, mc_samples: int = DEFAULT_MC_SAMPLES,
                      seed: int = DEFAULT_FADING_SEED) -> float:
    rho = as_activation(rho, gains.num_tps)
    if rho[b] == 0 or gains.slow_gain[k, b] == 0:
        return 0.0
    beta = user_link_samples(gains, k, mc_samples, seed)
    return float(_user_rates(beta, rho)[b])


def rate_matrix(gains: ChannelGains, rho, mc_samples: int = DEFAULT_MC_SAMPLES,
                seed: int = DEFAULT_FADING_SEED) -> RateMatrix:
    rho = as_activation(rho, gains.num_tps)
    R = np.zeros((gains.num_users, gains.num_tps))
    for k in range(gains.num_users):
        R[k] = _user_rates(user_link_samples(gains, k, mc_samples, seed), rho)
    R[:, rho == 0] = 0.0
    R[gains.slow_gain == 0] = 0.0
    used = 0 if gains.fading_model == FadingModel.NONE else mc_samples
    return RateMatrix(R, used)


def theta_matrix(rates: RateMatrix, util: UtilityConfig) -> GainMatrix:
    R = rates.R
    alpha = util.alpha
    feasible = R > 0
    theta = np.full(R.shape, np.nan)
    weights = np.broadcast_to(util.weights[:, None], R.shape)
    if alpha == 1:
        theta[feasible] = weights[feasible]
    else:
        theta[feasible] = (weights[feasible] * R[feasible] ** (1 - alpha) / abs(alpha - 1)) ** (1 / alpha)
    return GainMatrix(theta, alpha, feasible)


def kkt_gamma(association: "Association", rates: RateMatrix, util: UtilityConfig) -> RateAllocation:
    users = association.assigned_users()
    tps = association.tp_of[users]
    served_rates = rates.R[users, tps]
    if np.any(served_rates <= 0):
        k = users[np.argmax(served_rates <= 0)]
        raise ValueError(f"user {k} is associated over a zero-rate link")

    alpha = util.alpha
    share = (util.weights[users] * served_rates ** (1 - alpha)) ** (1 / alpha)
    totals = np.bincount(tps, weights=share, minlength=rates.num_tps)

    gamma = np.zeros(rates.R.shape)
    gamma[users, tps] = share / totals[tps]
    return RateAllocation(gamma)


def system_utility(association: "Association", gamma: RateAllocation, rates: RateMatrix,
                   util: UtilityConfig) -> float:
    """Weighted alpha-fair utility of the served users; -inf when a served rate is zero and alpha >= 1."""
    total = 0.0
    for k in association.assigned_users():
        b = association.tp_of[k]
        value = alpha_utility(gamma.gamma[k, b] * rates.R[k, b], util.alpha)
        if value == -math.inf:
            return -math.inf
        total += util.weights[k] * value
    return total
