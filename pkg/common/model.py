from dataclasses import asdict, dataclass, field, fields
from enum import IntEnum
import csv
import json
import logging
import math
from pathlib import Path
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from common.constants import WEIGHT_SUM_TOLERANCE
from common.errors import InfeasibleUserError, InstanceError
from common.tp_profile import MacroProfile, PicoProfile, TpKind, TpProfile

logger = logging.getLogger(__name__)


class FadingModel(IntEnum):
    NONE = 0
    RAYLEIGH_UNIT = 1

    @staticmethod
    def parse(name: str) -> "FadingModel":
        normalized = name.strip().lower().replace("-", "_")
        if normalized in ("none", "no_fading"):
            return FadingModel.NONE
        if normalized in ("rayleigh", "rayleigh_unit"):
            return FadingModel.RAYLEIGH_UNIT
        raise InstanceError(f"fading_model: unknown value '{name}'")


@dataclass
class Topology:
    num_users: int
    num_tps: int
    tp_kind: tuple[TpKind, ...]
    tp_positions: np.ndarray | None = field(default=None, compare=False, repr=False)
    user_positions: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.num_users < 1:
            raise InstanceError("K: at least one user is required")
        if self.num_tps < 1:
            raise InstanceError("B: at least one transmission point is required")
        self.tp_kind = tuple(TpKind(kind) for kind in self.tp_kind)
        if len(self.tp_kind) != self.num_tps:
            raise InstanceError(f"tp_kind: expected {self.num_tps} entries, got {len(self.tp_kind)}")


@dataclass(eq=False)
class ChannelGains:
    """Noise-normalized mean link gains beta[k, b] and the per-slot fading law."""
    slow_gain: np.ndarray
    fading_model: FadingModel = FadingModel.NONE

    def __post_init__(self):
        self.slow_gain = np.array(self.slow_gain, dtype=float)
        self.fading_model = FadingModel(self.fading_model)
        if self.slow_gain.ndim != 2:
            raise InstanceError("slow_gain: expected a K x B matrix")
        bad = np.argwhere(~np.isfinite(self.slow_gain) | (self.slow_gain < 0))
        if len(bad) > 0:
            k, b = bad[0]
            raise InstanceError(f"slow_gain[{k}][{b}]: gain must be finite and >= 0, got {self.slow_gain[k, b]!r}")
        for k in range(self.num_users):
            if not np.any(self.slow_gain[k] > 0):
                raise InfeasibleUserError(k)
        self.slow_gain.setflags(write=False)

    @property
    def num_users(self) -> int:
        return self.slow_gain.shape[0]

    @property
    def num_tps(self) -> int:
        return self.slow_gain.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChannelGains):
            return NotImplemented
        return self.fading_model == other.fading_model and np.array_equal(self.slow_gain, other.slow_gain)


@dataclass(eq=False)
class UtilityConfig:
    alpha: float
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=float)
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise InstanceError(f"alpha: must be a positive real, got {self.alpha!r}")
        if self.weights.ndim != 1 or len(self.weights) == 0:
            raise InstanceError("weights: expected a non-empty vector")
        bad = np.flatnonzero(~(self.weights > 0) | ~np.isfinite(self.weights))
        if len(bad) > 0:
            raise InstanceError(f"weights[{bad[0]}]: weight must be positive, got {self.weights[bad[0]]!r}")
        total = float(np.sum(self.weights))
        if abs(total - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise InstanceError(f"weights: must sum to 1 (got {total!r}); use UtilityConfig.normalized")
        self.weights.setflags(write=False)

    @staticmethod
    def normalized(alpha: float, weights) -> "UtilityConfig":
        raw = np.abs(np.array(weights, dtype=float))
        raw[~np.isfinite(raw)] = 1.0
        scaled = raw / np.sum(raw)
        # absorb the rounding residue so the simplex check holds exactly
        scaled[np.argmax(scaled)] += 1.0 - np.sum(scaled)
        return UtilityConfig(alpha, scaled)

    @staticmethod
    def uniform(alpha: float, num_users: int) -> "UtilityConfig":
        return UtilityConfig.normalized(alpha, np.ones(num_users))

    def with_alpha(self, alpha: float) -> "UtilityConfig":
        return UtilityConfig(alpha, self.weights.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, UtilityConfig):
            return NotImplemented
        return self.alpha == other.alpha and np.array_equal(self.weights, other.weights)


@dataclass
class ScenarioConfig:
    rng_seed: int = 1
    num_sectors: int = 3
    picos_per_sector: int = 10
    users_per_sector: int = 33
    sector_radius_m: float = 289.0
    min_distance_m: float = 10.0
    pico_min_distance_m: float = 75.0
    shadowing_std_db: float = 8.0
    noise_power_dbm: float = -95.0
    macro: TpProfile = MacroProfile
    pico: TpProfile = PicoProfile
    fading_model: FadingModel = FadingModel.NONE

    def __post_init__(self):
        if isinstance(self.macro, dict):
            self.macro = TpProfile(**self.macro)
        if isinstance(self.pico, dict):
            self.pico = TpProfile(**self.pico)
        if isinstance(self.fading_model, str):
            self.fading_model = FadingModel.parse(self.fading_model)
        if self.num_sectors < 1:
            raise InstanceError("num_sectors: at least one sector is required")
        if self.users_per_sector < 1:
            raise InstanceError("users_per_sector: at least one user is required")
        if self.picos_per_sector < 0:
            raise InstanceError("picos_per_sector: must be >= 0")
        if not 0 <= self.rng_seed < 2**64:
            raise InstanceError("rng_seed: must be a 64-bit unsigned integer")
        if self.sector_radius_m <= self.min_distance_m or self.min_distance_m <= 0:
            raise InstanceError("sector_radius_m: must exceed min_distance_m > 0")
        if self.shadowing_std_db < 0:
            raise InstanceError("shadowing_std_db: must be >= 0")
        if not math.isfinite(self.noise_power_dbm):
            raise InstanceError("noise_power_dbm: must be finite")
        for name, profile in (("macro", self.macro), ("pico", self.pico)):
            if not math.isfinite(profile.tx_power_dbm):
                raise InstanceError(f"{name}.tx_power_dbm: must be finite")
            if profile.pathloss_exponent <= 0:
                raise InstanceError(f"{name}.pathloss_exponent: must be positive")

    @property
    def num_tps(self) -> int:
        return self.num_sectors * (1 + self.picos_per_sector)

    @property
    def num_users(self) -> int:
        return self.num_sectors * self.users_per_sector

    def profile(self, kind: TpKind) -> TpProfile:
        return self.macro if kind == TpKind.MACRO else self.pico

    @staticmethod
    def from_dict(values: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(ScenarioConfig)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise InstanceError(f"scenario: unknown keys {unknown}")
        try:
            return ScenarioConfig(**values)
        except TypeError as ex:
            raise InstanceError(f"scenario: {ex}") from ex

    @staticmethod
    def from_file(path: str | Path) -> "ScenarioConfig":
        path = Path(path)
        try:
            if path.suffix.lower() == ".toml":
                with open(path, "rb") as f:
                    values = tomllib.load(f)
            else:
                with open(path, "r") as f:
                    values = json.loads(f.read())
        except (OSError, json.JSONDecodeError, tomllib.TOMLDecodeError) as ex:
            raise InstanceError(f"{path}: {ex}") from ex
        return ScenarioConfig.from_dict(values)

    def to_dict(self) -> dict:
        values = asdict(self)
        values["fading_model"] = self.fading_model.name.lower()
        return values


def _sector_center(cfg: ScenarioConfig, sector: int) -> np.ndarray:
    if cfg.num_sectors == 1:
        return np.zeros(2)
    angle = 2 * math.pi * sector / cfg.num_sectors
    return cfg.sector_radius_m * np.array([math.cos(angle), math.sin(angle)])


def _drop_in_annulus(rng: np.random.Generator, count: int, inner: float, outer: float) -> np.ndarray:
    radius = np.sqrt(rng.uniform(inner**2, outer**2, size=count))
    angle = rng.uniform(0, 2 * math.pi, size=count)
    return np.column_stack((radius * np.cos(angle), radius * np.sin(angle)))


def generate_topology(cfg: ScenarioConfig) -> tuple[Topology, ChannelGains]:
    """Drop TPs and users per sector and synthesize noise-normalized slow gains.

    Each sector is a disc with a macro at its center, picos uniform in an
    annulus around it and users uniform in the disc. All draws come from one
    generator seeded with cfg.rng_seed, in a fixed order.
    """
    rng = np.random.default_rng(cfg.rng_seed)

    tp_kind: list[TpKind] = []
    tp_positions: list[np.ndarray] = []
    user_positions: list[np.ndarray] = []
    for sector in range(cfg.num_sectors):
        center = _sector_center(cfg, sector)
        tp_kind.append(TpKind.MACRO)
        tp_positions.append(center[None, :])

        inner = min(cfg.pico_min_distance_m, 0.5 * cfg.sector_radius_m)
        picos = _drop_in_annulus(rng, cfg.picos_per_sector, inner, cfg.sector_radius_m)
        tp_kind.extend([TpKind.PICO] * cfg.picos_per_sector)
        tp_positions.append(picos + center)

        users = _drop_in_annulus(rng, cfg.users_per_sector, cfg.min_distance_m, cfg.sector_radius_m)
        user_positions.append(users + center)

    tps = np.vstack(tp_positions)
    users = np.vstack(user_positions)
    distance = np.linalg.norm(users[:, None, :] - tps[None, :, :], axis=2)
    distance = np.maximum(distance, cfg.min_distance_m)

    power = np.array([cfg.profile(kind).tx_power_dbm for kind in tp_kind])
    intercept = np.array([cfg.profile(kind).pathloss_intercept_db for kind in tp_kind])
    exponent = np.array([cfg.profile(kind).pathloss_exponent for kind in tp_kind])
    pathloss_db = intercept[None, :] + 10 * exponent[None, :] * np.log10(distance)
    shadowing_db = rng.normal(0.0, cfg.shadowing_std_db, size=distance.shape)

    gain_db = power[None, :] - pathloss_db + shadowing_db - cfg.noise_power_dbm
    slow_gain = np.power(10.0, gain_db / 10.0)

    topology = Topology(len(users), len(tps), tuple(tp_kind), tps, users)
    logger.debug("generated topology K=%d B=%d seed=%d", topology.num_users, topology.num_tps, cfg.rng_seed)
    return topology, ChannelGains(slow_gain, cfg.fading_model)


def save_instance(path: str | Path, topology: Topology, gains: ChannelGains, util: UtilityConfig):
    instance = {
        "K": topology.num_users,
        "B": topology.num_tps,
        "tp_kind": [kind.name.lower() for kind in topology.tp_kind],
        "slow_gain": gains.slow_gain.tolist(),
        "weights": util.weights.tolist(),
        "alpha": util.alpha,
        "fading_model": gains.fading_model.name.lower(),
    }
    with open(path, "w") as f:
        f.write(json.dumps(instance))


def _require(instance: dict, key: str, kind: type | tuple[type, ...]):
    if key not in instance:
        raise InstanceError(f"{key}: missing field")
    value = instance[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise InstanceError(f"{key}: expected {kind}, got {type(value).__name__}")
    return value


def _numeric_row(row, name: str, length: int) -> list[float]:
    if not isinstance(row, list) or len(row) != length:
        raise InstanceError(f"{name}: expected a list of {length} numbers")
    for i, value in enumerate(row):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InstanceError(f"{name}[{i}]: expected a number, got {value!r}")
    return [float(v) for v in row]


def load_instance(path: str | Path) -> tuple[Topology, ChannelGains, UtilityConfig]:
    try:
        with open(path, "r") as f:
            instance = json.loads(f.read())
    except (OSError, json.JSONDecodeError) as ex:
        raise InstanceError(f"{path}: {ex}") from ex
    if not isinstance(instance, dict):
        raise InstanceError(f"{path}: expected a JSON object")

    num_users = _require(instance, "K", int)
    num_tps = _require(instance, "B", int)
    kinds = _require(instance, "tp_kind", list)
    try:
        tp_kind = tuple(TpKind.parse(str(kind)) for kind in kinds)
    except ValueError as ex:
        raise InstanceError(f"tp_kind: {ex}") from ex

    rows = _require(instance, "slow_gain", list)
    if len(rows) != num_users:
        raise InstanceError(f"slow_gain: expected {num_users} rows, got {len(rows)}")
    slow_gain = [_numeric_row(row, f"slow_gain[{k}]", num_tps) for k, row in enumerate(rows)]
    alpha = float(_require(instance, "alpha", (int, float)))
    fading = FadingModel.parse(instance.get("fading_model", "none"))
    if "weights" in instance:
        util = UtilityConfig(alpha, _numeric_row(_require(instance, "weights", list), "weights", num_users))
    else:
        util = UtilityConfig.uniform(alpha, num_users)

    topology = Topology(num_users, num_tps, tp_kind)
    return topology, ChannelGains(np.array(slow_gain), fading), util


def export_gains_csv(path: str | Path, gains: ChannelGains):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["user"] + [f"tp{b}" for b in range(gains.num_tps)])
        for k in range(gains.num_users):
            writer.writerow([k] + [repr(float(v)) for v in gains.slow_gain[k]])
