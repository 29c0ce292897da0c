"""Run evaluation: per-class accuracies, assigned rates, loss series, and
CSV/markdown report emission."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .nn import Network
from .trainer import TrainRun, predict_scores


def per_class_accuracy(net: Network, samples) -> dict[int, float]:
    """Fraction of samples of each labeled score that classify to it.
    Classes with no samples are absent from the result, not zero."""
    samples = list(samples)
    if not samples:
        raise ValueError("per_class_accuracy needs a nonempty sample list")
    predicted = predict_scores(net, samples)
    labels = np.array([s.score for s in samples])
    out: dict[int, float] = {}
    for score in sorted(set(labels.tolist())):
        sel = labels == score
        out[int(score)] = float((predicted[sel] == score).mean())
    return out


def assigned_rates(net: Network, samples) -> dict[int, float]:
    """Share of samples assigned to each score class; labels are ignored,
    so unlabeled evaluation sets work.  Rates sum to 1."""
    samples = list(samples)
    if not samples:
        raise ValueError("assigned_rates needs a nonempty sample list")
    predicted = predict_scores(net, samples)
    n = len(samples)
    return {
        int(score): float((predicted == score).sum() / n) for score in net.class_scores
    }


def loss_table(run: TrainRun) -> list[tuple[int, float]]:
    """The run's recorded quadratic losses, labeled by iteration."""
    return [(i + 1, run.losses[i]) for i in range(run.iterations)]


def middle_score(class_scores) -> int:
    """Median class score (lower middle for even class counts)."""
    scores = sorted(class_scores)
    return int(scores[(len(scores) - 1) // 2])


def share_above(rates: dict[int, float], threshold_score: int) -> float:
    """Total assigned rate of the classes scoring above threshold_score."""
    return float(sum(rate for score, rate in rates.items() if score > threshold_score))


def _iteration_headers(run: TrainRun) -> list[str]:
    return [f"net_{i + 1}" for i in range(run.iterations)]


def _write_per_class_table(path: Path, run: TrainRun, rows: list[dict[int, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["score"] + _iteration_headers(run))
        for score in run.class_scores:
            cells = [f"{r[score]:.6f}" if score in r else "" for r in rows]
            writer.writerow([score] + cells)


def emit_report(run: TrainRun, base, holdout, out_dir) -> dict[str, Path]:
    """Write the evaluation tables for a run:

    - table1.csv: per-class accuracy on the training base, per iteration
      (plus table1_holdout.csv for the held-out set, which unlike the
      training base was never fitted);
    - table2.csv: quadratic loss per iteration;
    - table3.csv: assigned rates on the held-out set per iteration;
    - summary.md: the aggregate share of held-out images assigned above
      the middle score, first vs final network.

    Re-running on the same inputs produces byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = list(base)
    holdout = list(holdout)

    acc_rows = [per_class_accuracy(net, base) for net in run.networks]
    holdout_acc_rows = [per_class_accuracy(net, holdout) for net in run.networks]
    rate_rows = [assigned_rates(net, holdout) for net in run.networks]

    paths = {
        "table1": out_dir / "table1.csv",
        "table1_holdout": out_dir / "table1_holdout.csv",
        "table2": out_dir / "table2.csv",
        "table3": out_dir / "table3.csv",
        "summary": out_dir / "summary.md",
    }

    _write_per_class_table(paths["table1"], run, acc_rows)
    _write_per_class_table(paths["table1_holdout"], run, holdout_acc_rows)

    with open(paths["table2"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for iteration, loss in loss_table(run):
            writer.writerow([iteration, f"{loss:.6f}"])

    with open(paths["table3"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["score"] + _iteration_headers(run))
        for score in run.class_scores:
            writer.writerow([score] + [f"{r[score]:.6f}" for r in rate_rows])

    mid = middle_score(run.class_scores)
    first_share = share_above(rate_rows[0], mid)
    final_share = share_above(rate_rows[-1], mid)
    if first_share > 0:
        change = f"{(final_share - first_share) / first_share * 100.0:+.1f}%"
    else:
        change = "n/a (zero baseline)"
    lines = [
        "# Run report",
        "",
        f"Iterations: {run.iterations} (stop reason: {run.stop_reason})",
        f"Quadratic loss: {run.losses[0]:.4f} (net_1) -> {run.losses[-1]:.4f} (net_{run.iterations})",
        "",
        f"Share of held-out images assigned a score above {mid}:",
        f"- net_1: {first_share:.4f}",
        f"- net_{run.iterations}: {final_share:.4f}",
        f"- relative change: {change}",
        "",
        "Accuracies in table1.csv are measured on the training base itself;",
        "table1_holdout.csv holds the same statistic on the held-out set.",
        "",
    ]
    paths["summary"].write_text("\n".join(lines), encoding="utf-8")
    return paths
