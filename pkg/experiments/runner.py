"""Runs the association / joint-optimization comparison grid and writes CSV tables plus a JSON manifest."""
from dataclasses import asdict, dataclass, field
import csv
import hashlib
import json
import logging
from pathlib import Path
import platform
import subprocess
import time

import numpy as np
import scipy

from common.constants import DEFAULT_AF_MC_SAMPLES
from common.errors import ConfigError
from common.model import ChannelGains, ScenarioConfig, UtilityConfig, generate_topology, load_instance
from common.rate import rate_matrix, theta_matrix
from common.setfn import SetFunction
from controller.afopt import AfConfig
from controller.gls import GlsConfig, GlsResult, gls
from controller.joint import (JointConfig, JointMethod, JointResult, RelaxedAssociation, association_score,
                              joint_gls_af, joint_ra_af, max_snr_association, relaxed_association,
                              round_association)
from simulator.distsim import DistLsConfig, distributed_greedy, distributed_ls
from simulator.slotsim import export_rates_csv, verify_solution

logger = logging.getLogger(__name__)

ALGORITHMS = ("greedy", "gls", "dg", "dls", "ru", "rra", "msa", "joint-gls-af", "joint-ra-af")
TABLE_COLUMNS = (("Greedy", "greedy"), ("GLS", "gls"), ("RU", "ru"), ("RRA", "rra"), ("MSA", "msa"), ("DG", "dg"))


@dataclass
class ExperimentSpec:
    alphas: list[float]
    algorithms: list[str]
    seeds: list[int] = field(default_factory=lambda: [1])
    out_dir: str = "results"
    scenario: dict = field(default_factory=dict)
    instance: str | None = None
    delta: float = 0.0
    mc_samples: int = DEFAULT_AF_MC_SAMPLES
    verify: bool = False
    plot: bool = False

    def __post_init__(self):
        if not self.alphas:
            raise ConfigError("alphas: at least one alpha is required")
        if not self.algorithms:
            raise ConfigError("algorithms: at least one algorithm is required")
        unknown = [name for name in self.algorithms if name not in ALGORITHMS]
        if unknown:
            raise ConfigError(f"algorithms: unknown {unknown}, expected a subset of {list(ALGORITHMS)}")
        self.alphas = [float(alpha) for alpha in self.alphas]
        for alpha in self.alphas:
            if not alpha > 0:
                raise ConfigError(f"alphas: {alpha} is not positive")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if not self.delta >= 0:
            raise ConfigError(f"delta: must be >= 0, got {self.delta}")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples: must be >= 1")


@dataclass
class RunRecord:
    alpha: float
    seed: int
    algorithm: str
    utility: float
    g: float = float("nan")
    ls_iterations: int = 0
    bound_kind: str = ""
    bound_value: float = float("nan")


def _instance(spec: ExperimentSpec, seed: int) -> tuple[ChannelGains, np.ndarray | None]:
    if spec.instance is not None:
        _, gains, util = load_instance(spec.instance)
        return gains, util.weights
    cfg = ScenarioConfig.from_dict({**spec.scenario, "rng_seed": seed})
    _, gains = generate_topology(cfg)
    return gains, None


def _utility(alpha: float, weights: np.ndarray | None, num_users: int) -> UtilityConfig:
    if weights is None:
        return UtilityConfig.uniform(alpha, num_users)
    return UtilityConfig.normalized(alpha, weights)


def _git_describe() -> str:
    try:
        result = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                                timeout=5, cwd=Path(__file__).parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return result.stdout.strip() or "unknown"


def _file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Cell:
    """All algorithms for one (alpha, seed) grid cell, sharing the rates at rho = 1."""

    def __init__(self, spec: ExperimentSpec, gains: ChannelGains, util: UtilityConfig, seed: int):
        self.spec = spec
        self.gains = gains
        self.util = util
        self.seed = seed
        self.af_cfg = AfConfig(mc_samples=spec.mc_samples)
        self.gls_cfg = GlsConfig(delta=spec.delta)
        self.rates = rate_matrix(gains, np.ones(gains.num_tps), spec.mc_samples, self.af_cfg.fading_seed)
        self.set_fn = SetFunction(theta_matrix(self.rates, util), self.rates, util)
        self._gls: GlsResult | None = None
        self._relaxed: RelaxedAssociation | None = None
        self.joint: dict[str, JointResult] = {}

    def score(self, association) -> float:
        return association_score(association, self.rates, self.util)

    def gls_result(self) -> GlsResult:
        if self._gls is None:
            self._gls = gls(self.set_fn, self.gls_cfg)
        return self._gls

    def relaxed(self) -> RelaxedAssociation:
        if self._relaxed is None:
            self._relaxed = relaxed_association(self.rates, self.util)
        return self._relaxed

    def _score_into(self, record: RunRecord, association) -> RunRecord:
        record.utility = self.score(association)
        record.g = self.set_fn.value(association)
        return record

    def run(self, algorithm: str) -> RunRecord:
        """One algorithm on this cell; bound values are on g, utilities are in nats."""
        record = RunRecord(self.util.alpha, self.seed, algorithm, float("nan"))
        if algorithm in ("greedy", "gls"):
            result = self.gls_result()
            stage = 0 if algorithm == "greedy" else 1
            self._score_into(record, result.greedy.association if stage == 0 else result.association)
            if stage == 1:
                record.ls_iterations = result.local_search.iterations
            record.bound_kind = result.certificates[stage].bound_kind.name
            record.bound_value = result.certificates[stage].bound_value
        elif algorithm == "dg":
            association, _ = distributed_greedy(self.set_fn)
            self._score_into(record, association)
        elif algorithm == "dls":
            association, _ = distributed_greedy(self.set_fn)
            dls_cfg = DistLsConfig(delta=self.spec.delta, max_windows=10 * self.gains.num_users, rng_seed=self.seed)
            association, trace = distributed_ls(association, self.set_fn, dls_cfg)
            self._score_into(record, association)
            record.ls_iterations = trace.last_request_window
        elif algorithm == "ru":
            relaxed = self.relaxed()
            record.utility = -relaxed.value if self.util.alpha > 1 else relaxed.value
            record.g = relaxed.value
            record.bound_kind = "RELAXED"
            record.bound_value = relaxed.bound
        elif algorithm == "rra":
            self._score_into(record, round_association(self.relaxed()))
        elif algorithm == "msa":
            self._score_into(record, max_snr_association(self.gains))
        else:
            if algorithm == "joint-gls-af":
                result = joint_gls_af(self.gains, self.util, self.gls_cfg, self.af_cfg, JointConfig())
            else:
                result = joint_ra_af(self.gains, self.util, self.af_cfg, JointConfig(which=JointMethod.RA_AF))
            self.joint[algorithm] = result
            record.utility = result.score
            record.ls_iterations = result.history[-1].round
        return record


def _write_records(path: Path, records: list[RunRecord]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["alpha", "seed", "algorithm", "utility", "g", "ls_iterations", "bound_kind", "bound_value"])
        for r in records:
            writer.writerow([_cell(r.alpha), r.seed, r.algorithm, _cell(r.utility), _cell(r.g), r.ls_iterations,
                             r.bound_kind, _cell(r.bound_value)])


def _mean(records: list[RunRecord], alpha: float, algorithm: str, column: str = "utility") -> float | None:
    values = [getattr(r, column) for r in records if r.alpha == alpha and r.algorithm == algorithm]
    return float(np.mean(values)) if values else None


def _relative_gain_pct(new: float | None, old: float | None) -> float | None:
    if new is None or old is None or old == 0:
        return None
    return 100 * (new - old) / abs(old)


def _cell(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def _write_utility_table(path: Path, spec: ExperimentSpec, records: list[RunRecord]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["alpha", *[name for name, _ in TABLE_COLUMNS], "LSI", "GLS_vs_RRA_pct", "GLS_vs_MSA_pct"])
        for alpha in spec.alphas:
            best = _mean(records, alpha, "gls")
            row = [_cell(alpha)] + [_cell(_mean(records, alpha, key)) for _, key in TABLE_COLUMNS]
            row.append(_cell(_relative_gain_pct(best, _mean(records, alpha, "greedy"))))
            for reference in ("rra", "msa"):
                row.append(_cell(_relative_gain_pct(best, _mean(records, alpha, reference)) if alpha > 1 else None))
            writer.writerow(row)


def _write_ls_study(path: Path, spec: ExperimentSpec, records: list[RunRecord]):
    """Local-search improvement for alpha > 1: greedy and GLS objectives, their relative change and swap count."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["alpha", "greedy", "gls", "improvement_pct", "ls_iterations"])
        for alpha in spec.alphas:
            if alpha <= 1:
                continue
            greedy, best = _mean(records, alpha, "greedy", "g"), _mean(records, alpha, "gls", "g")
            iterations = [r.ls_iterations for r in records if r.alpha == alpha and r.algorithm == "gls"]
            improvement = _relative_gain_pct(best, greedy)
            writer.writerow([_cell(alpha), _cell(greedy), _cell(best), _cell(None if improvement is None else -improvement),
                             _cell(float(np.mean(iterations)) if iterations else None)])


def write_history(path: Path, result: JointResult, reference: float):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "stage", "score", "msa_reference", "rho"])
        for record in result.history:
            writer.writerow([record.round, record.stage, _cell(record.score), _cell(reference),
                             " ".join(repr(float(v)) for v in record.rho)])


def _verify(out: Path, cell: _Cell, rows: list[list]):
    joint = cell.joint.get("joint-gls-af")
    if joint is None:
        return
    baseline = verify_solution(max_snr_association(cell.gains), np.ones(cell.gains.num_tps), cell.gains, cell.util,
                               cell.seed, mc_samples=cell.spec.mc_samples)
    report = verify_solution(joint.association, joint.rho, cell.gains, cell.util, cell.seed,
                             mc_samples=cell.spec.mc_samples)
    export_rates_csv(out / f"rates_joint-gls-af_alpha{cell.util.alpha}_seed{cell.seed}.csv", report)
    for name, r in (("msa", baseline), ("joint-gls-af", report)):
        rows.append([_cell(cell.util.alpha), cell.seed, name, _cell(r.utility_conservative), _cell(r.utility_actual_rr),
                     _cell(r.utility_actual_gradient), _cell(r.gain_over(baseline) * 100)])


def run(spec: ExperimentSpec) -> list[Path]:
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records: list[RunRecord] = []
    timings: list[dict] = []
    history_files: list[Path] = []
    verification_rows: list[list] = []
    if spec.verify and "joint-gls-af" not in spec.algorithms:
        logger.warning("--verify compares joint-gls-af against MSA, but joint-gls-af is not selected")

    for seed in spec.seeds:
        gains, weights = _instance(spec, seed)
        for alpha in spec.alphas:
            cell = _Cell(spec, gains, _utility(alpha, weights, gains.num_users), seed)
            for algorithm in spec.algorithms:
                started = time.perf_counter()
                records.append(cell.run(algorithm))
                elapsed = time.perf_counter() - started
                timings.append({"alpha": alpha, "seed": seed, "algorithm": algorithm, "seconds": elapsed})
                print(f"alpha={alpha} seed={seed} {algorithm}: utility {records[-1].utility:.6g} "
                      f"({elapsed:.2f}s)", flush=True)
            msa = cell.score(max_snr_association(gains))
            for name, result in cell.joint.items():
                path = out / f"history_{name}_alpha{alpha}_seed{seed}.csv"
                write_history(path, result, msa)
                history_files.append(path)
            if spec.verify:
                _verify(out, cell, verification_rows)

    written = [out / "results.csv", out / "utility_table.csv", out / "ls_study.csv"]
    _write_records(written[0], records)
    _write_utility_table(written[1], spec, records)
    _write_ls_study(written[2], spec, records)
    if verification_rows:
        path = out / "verification.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["alpha", "seed", "solution", "utility_conservative", "utility_actual_rr",
                             "utility_actual_gradient", "gain_over_msa_pct"])
            writer.writerows(verification_rows)
        written.append(path)
    written.extend(history_files)

    if spec.plot and history_files:
        from experiments.plotting import plot_history
        written.extend(plot_history(history_files, out))

    manifest = {
        "spec": asdict(spec),
        "scenario": None if spec.instance else ScenarioConfig.from_dict(spec.scenario).to_dict(),
        "instance_sha256": _file_sha256(spec.instance) if spec.instance else None,
        "seeds": spec.seeds,
        "git": _git_describe(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "timings": timings,
        "files": [p.name for p in written],
    }
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w") as f:
        f.write(json.dumps(manifest, indent=2, default=str))
    written.append(manifest_path)
    logger.info("wrote %d files to %s", len(written), out)
    return written
