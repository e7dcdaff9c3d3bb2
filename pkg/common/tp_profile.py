from dataclasses import dataclass
from enum import IntEnum


class TpKind(IntEnum):
    MACRO = 1
    PICO = 2

    @staticmethod
    def parse(name: str) -> "TpKind":
        try:
            return TpKind[name.upper()]
        except KeyError:
            raise ValueError(f"unknown transmission point kind '{name}'") from None


@dataclass(frozen=True)
class TpProfile:
    tx_power_dbm: float
    pathloss_intercept_db: float
    pathloss_exponent: float


# Log-distance fits with d in meters
MacroProfile = TpProfile(
    tx_power_dbm=46.0,
    pathloss_intercept_db=15.3,
    pathloss_exponent=3.76,
)

PicoProfile = TpProfile(
    tx_power_dbm=30.0,
    pathloss_intercept_db=30.6,
    pathloss_exponent=3.67,
)


def get_tp_profile(kind: TpKind) -> TpProfile:
    if kind == TpKind.MACRO:
        return MacroProfile
    elif kind == TpKind.PICO:
        return PicoProfile
    raise ValueError(f"unknown transmission point kind {kind!r}")
