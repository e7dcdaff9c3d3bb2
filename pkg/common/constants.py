WEIGHT_SUM_TOLERANCE = 1e-12

DEFAULT_MC_SAMPLES = 10_000
DEFAULT_AF_MC_SAMPLES = 1_000
DEFAULT_FADING_SEED = 20_141

# Relative slack added to every local-search acceptance test so that swaps
# whose computed change is pure rounding noise are never applied.
IMPROVEMENT_TOLERANCE = 1e-12

RHO_MIN = 1e-4
T_FLOOR = 1e-9

SLOTS_PER_FRAME = 5000
