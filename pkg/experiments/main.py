import argparse
import json
import logging
from pathlib import Path
import sys

from common.errors import ConfigError, InstanceError, SolverError
from common.model import ScenarioConfig
from experiments.runner import ExperimentSpec, run

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS = Path(__file__).parent / "settings.json"


def _floats(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as ex:
        raise argparse.ArgumentTypeError(str(ex)) from ex


def _ints(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as ex:
        raise argparse.ArgumentTypeError(str(ex)) from ex


def _names(text: str) -> list[str]:
    return [part.strip().lower() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="experiments", description="Association and activation-fraction experiments")
    parser.add_argument("--settings", type=Path, default=DEFAULT_SETTINGS, help="JSON file with the default experiment")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--scenario", type=Path, help="scenario file (JSON or TOML)")
    source.add_argument("--instance", type=Path, help="instance file with explicit gains and weights")
    parser.add_argument("--alpha", type=_floats, help="comma separated alpha values")
    parser.add_argument("--algos", type=_names, help="comma separated algorithm names")
    parser.add_argument("--seeds", type=_ints, help="comma separated scenario seeds")
    parser.add_argument("--delta", type=float, help="local search relative threshold")
    parser.add_argument("--mc-samples", type=int, help="Monte Carlo samples per rate")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--plot", action="store_true", help="also draw the joint histories")
    parser.add_argument("--verify", action="store_true", help="slot-level check of joint GLS-AF against MSA")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def load_settings(path: Path) -> dict:
    try:
        with open(path, "r") as f:
            return json.loads(f.read())
    except (OSError, json.JSONDecodeError) as ex:
        raise ConfigError(f"{path}: {ex}") from ex


def make_spec(args: argparse.Namespace) -> ExperimentSpec:
    settings = load_settings(args.settings)
    scenario = settings.get("scenario", {})
    if args.scenario is not None:
        scenario = ScenarioConfig.from_file(args.scenario).to_dict()
        scenario.pop("rng_seed")
    overrides = {
        "alphas": args.alpha,
        "algorithms": args.algos,
        "seeds": args.seeds,
        "delta": args.delta,
        "mc_samples": args.mc_samples,
        "out_dir": args.out,
    }
    values = {**settings, **{k: v for k, v in overrides.items() if v is not None}}
    values["scenario"] = scenario
    values["instance"] = str(args.instance) if args.instance is not None else None
    values["plot"] = args.plot
    values["verify"] = args.verify
    try:
        return ExperimentSpec(**values)
    except TypeError as ex:
        raise ConfigError(f"settings: {ex}") from ex


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        written = run(make_spec(args))
    except (InstanceError, ConfigError, ValueError) as ex:
        logger.error("%s", ex)
        return 2
    except SolverError as ex:
        logger.exception(ex)
        return 3
    print(f"wrote {len(written)} files to {written[-1].parent}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
