"""Utility-versus-iteration series of the joint loops."""
import csv
import logging
from pathlib import Path

logger = logging.getLogger(__name__)


def read_history(path: str | Path) -> tuple[list[float], float]:
    """Scores in iteration order and the MSA reference level of one history file."""
    scores: list[float] = []
    reference = float("nan")
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            scores.append(float(row["score"]))
            reference = float(row["msa_reference"])
    return scores, reference


def plot_history(paths: list[str | Path], out_dir: str | Path, image: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series = {Path(p).stem: read_history(p) for p in paths}

    written = [out_dir / "history_series.csv"]
    with open(written[0], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run", "iteration", "score", "msa_reference"])
        for name, (scores, reference) in series.items():
            for i, score in enumerate(scores):
                writer.writerow([name, i, repr(float(score)), repr(float(reference))])

    if not image or not series:
        return written
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed, skipping the history plot")
        return written

    figure, axes = plt.subplots(figsize=(6.0, 4.0))
    for name, (scores, reference) in series.items():
        line, = axes.plot(range(len(scores)), scores, marker="o", label=name)
        axes.axhline(reference, linestyle="--", color=line.get_color(), linewidth=0.8)
    axes.set_xlabel("iteration")
    axes.set_ylabel("utility")
    axes.legend(fontsize="small")
    figure.tight_layout()
    written.append(out_dir / "history.png")
    figure.savefig(written[-1], dpi=150)
    plt.close(figure)
    return written
