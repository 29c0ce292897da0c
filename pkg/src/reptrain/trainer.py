"""Repetitive drop-out training.

The loop: train an initial network on the full dataset, then repeatedly
(a) score every original sample's per-class membership under the latest
network, (b) tune the two drop thresholds so that about a target fraction
of the dataset survives, (c) drop low-membership samples of the three
majority score classes, and (d) warm-start retrain on the surviving view.
Dropping always starts from the full original dataset, so samples the
newer network likes again are automatically re-admitted.  The stopping
statistic is the mean squared difference between labeled and predicted
scores over the original dataset.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetView, Sample, ScoreDistribution, apply_mask, class_counts, full_view
from .parallel import map_ordered


class EmptyViewError(RuntimeError):
    """Drop-out selection left no training samples."""

    def __init__(self, iteration: int):
        super().__init__(f"iteration {iteration}: drop-out selection left an empty training set")
        self.iteration = iteration


@dataclass(frozen=True)
class DropoutThresholds:
    k1: float
    k2: float


@dataclass
class TrainConfig:
    """Knobs for one repetitive-training run.  threshold_* bound the grid
    searched for (K1, K2); target_remaining_fraction is the share of the
    original dataset the tuner tries to keep after drop-out.  In literal
    condition mode every drop test reads the membership of the top
    majority class; own-class mode tests each sample's own class instead.
    freeze_conv freezes convolution layers during warm-start retraining
    (iterations 2+)."""

    class_scores: tuple[int, ...] = (2, 3, 4, 5, 6, 7, 8, 9)
    epochs_per_iteration: int = 12
    lr: float = 0.005
    momentum: float = 0.9
    batch_size: int = 32
    weight_decay: float = 1e-3
    loss_threshold: float = 1.8
    max_iterations: int = 10
    target_remaining_fraction: float = 2.0 / 3.0
    threshold_low: float = 0.85
    threshold_high: float = 0.95
    threshold_step: float = 0.01
    seed: int = 0
    literal_condition_mode: bool = True
    likelihood_softmax: bool = False
    freeze_conv: bool = False

    def validate(self) -> None:
        if len(self.class_scores) < 2 or any(
            b <= a for a, b in zip(self.class_scores, self.class_scores[1:])
        ):
            raise ValueError("class_scores must be strictly increasing with >= 2 entries")
        if self.epochs_per_iteration < 0:
            raise ValueError("epochs_per_iteration must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 < self.target_remaining_fraction <= 1.0:
            raise ValueError("target_remaining_fraction must be in (0, 1]")
        if not 0.0 < self.threshold_low <= self.threshold_high < 1.0:
            raise ValueError("threshold bounds must satisfy 0 < low <= high < 1")
        if self.threshold_step <= 0:
            raise ValueError("threshold_step must be positive")

    def threshold_grid(self) -> list[float]:
        m = int(np.floor((self.threshold_high - self.threshold_low) / self.threshold_step + 1e-9))
        return [round(self.threshold_low + i * self.threshold_step, 9) for i in range(m + 1)]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "class_scores":
                value = ",".join(str(s) for s in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            kwargs[key] = _parse_config_value(key, value)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def _parse_config_value(key: str, value: str):
    if key == "class_scores":
        return tuple(int(part) for part in value.split(",") if part.strip())
    if key in ("literal_condition_mode", "likelihood_softmax", "freeze_conv"):
        if value.lower() not in ("true", "false"):
            raise ValueError(f"{key} must be true or false, got {value!r}")
        return value.lower() == "true"
    if key in ("epochs_per_iteration", "batch_size", "max_iterations", "seed"):
        return int(value)
    return float(value)


@dataclass
class LikelihoodTable:
    """Per-sample membership values under one network: one row per sample
    of the original dataset, one column per score class, plus the
    argmax-predicted class index."""

    ids: np.ndarray  # (n,) sample ids
    values: np.ndarray  # (n, N) in (0, 1)
    predicted_idx: np.ndarray  # (n,) class indices
    class_scores: tuple[int, ...]

    def column(self, score: int) -> np.ndarray:
        return self.values[:, self.class_scores.index(score)]

    def row_by_id(self, sample_id: int) -> np.ndarray:
        pos = int(np.nonzero(self.ids == sample_id)[0][0])
        return self.values[pos]


def _image_batch(samples: list[Sample]) -> np.ndarray:
    return np.stack([np.ascontiguousarray(s.image.transpose(2, 0, 1)) for s in samples])


def _chunks(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def _batch_logits(net: nn.Network, samples: list[Sample], chunk: int = 256) -> np.ndarray:
    parts = map_ordered(
        lambda part: nn.head_logits(net, _image_batch(part)), _chunks(list(samples), chunk)
    )
    return np.concatenate(parts, axis=0)


def compute_likelihoods(net: nn.Network, base, use_softmax: bool = False) -> LikelihoodTable:
    """Membership table over the whole original dataset, active or not."""
    base = list(base)
    if not base:
        return LikelihoodTable(
            np.zeros(0, dtype=int),
            np.zeros((0, net.num_classes)),
            np.zeros(0, dtype=int),
            net.class_scores,
        )
    logits = _batch_logits(net, base)
    values = nn.softmax(logits).astype(np.float64) if use_softmax else nn.sigmoid(logits)
    predicted = logits.argmax(axis=1)
    ids = np.array([s.id for s in base])
    return LikelihoodTable(ids, values, predicted, net.class_scores)


# ---------------------------------------------------------------------------
# Drop-out selection and threshold tuning


def _drop_groups(table: LikelihoodTable, labels, dist: ScoreDistribution, literal: bool):
    """For each row: which threshold applies (1 for the top majority class,
    2 for the second/third, 0 for never dropped) and the membership value
    the condition tests."""
    labels = np.asarray(labels)
    if labels.shape[0] != table.values.shape[0]:
        raise ValueError("labels length must match table rows")
    groups = np.zeros(labels.shape[0], dtype=np.int8)
    tested = np.zeros(labels.shape[0], dtype=np.float64)
    ranked = dist.ranked_majority
    if not ranked:
        return groups, tested
    top = ranked[0]
    top_col = table.column(top)
    for rank, score in enumerate(ranked):
        sel = labels == score
        groups[sel] = 1 if rank == 0 else 2
        if literal:
            tested[sel] = top_col[sel]
        else:
            tested[sel] = table.column(score)[sel]
    return groups, tested


def select_dropouts(
    table: LikelihoodTable,
    labels,
    dist: ScoreDistribution,
    thresholds: DropoutThresholds,
    literal: bool = True,
) -> set[int]:
    """Ids of samples to drop: majority-top samples whose tested membership
    falls below K1, second/third-majority samples below K2.  Samples of any
    other class are never dropped."""
    groups, tested = _drop_groups(table, labels, dist, literal)
    drop = ((groups == 1) & (tested < thresholds.k1)) | (
        (groups == 2) & (tested < thresholds.k2)
    )
    return set(int(i) for i in table.ids[drop])


def tune_thresholds(
    table: LikelihoodTable, labels, dist: ScoreDistribution, cfg: TrainConfig
) -> DropoutThresholds:
    """Exhaustive grid search for the (K1, K2) whose drop-out leaves a
    remaining count closest to target_remaining_fraction of the dataset.
    Ties go to the smaller K1, then the smaller K2."""
    groups, tested = _drop_groups(table, labels, dist, cfg.literal_condition_mode)
    n = len(groups)
    target = cfg.target_remaining_fraction * n
    sorted1 = np.sort(tested[groups == 1])
    sorted2 = np.sort(tested[groups == 2])
    grid = cfg.threshold_grid()
    best: tuple[float, float, float] | None = None
    for k1 in grid:
        dropped1 = int(np.searchsorted(sorted1, k1, side="left"))
        for k2 in grid:
            dropped2 = int(np.searchsorted(sorted2, k2, side="left"))
            err = abs((n - dropped1 - dropped2) - target)
            if best is None or err < best[0]:
                best = (err, k1, k2)
    assert best is not None
    return DropoutThresholds(best[1], best[2])


# ---------------------------------------------------------------------------
# Prediction and loss


def _predict_indices(net: nn.Network, samples) -> np.ndarray:
    return _batch_logits(net, list(samples)).argmax(axis=1)


def predict_scores(net: nn.Network, samples) -> np.ndarray:
    """Argmax score value per sample; ties resolve to the lower class."""
    scores = np.asarray(net.class_scores)
    return scores[_predict_indices(net, samples)]


def classify(net: nn.Network, image: np.ndarray) -> int:
    """Score value of the most probable class for one image."""
    logits = nn.head_logits(net, nn._as_batch(net, image))
    return int(net.class_scores[int(logits[0].argmax())])


def quadratic_loss(net: nn.Network, base, class_scores=None) -> float:
    """Mean (label - predicted score)^2 over the original dataset."""
    base = list(base)
    if not base:
        raise ValueError("quadratic_loss needs a nonempty dataset")
    predicted = predict_scores(net, base).astype(np.float64)
    labels = np.array([s.score for s in base], dtype=np.float64)
    return float(np.mean((labels - predicted) ** 2))


# ---------------------------------------------------------------------------
# Training


def _score_indices(samples: list[Sample], class_scores: tuple[int, ...]) -> np.ndarray:
    index = {score: i for i, score in enumerate(class_scores)}
    try:
        return np.array([index[s.score] for s in samples], dtype=np.intp)
    except KeyError as exc:
        raise ValueError(f"sample score {exc.args[0]} outside class_scores {class_scores}")


def _train_epochs(net: nn.Network, view: DatasetView, cfg: TrainConfig, rng) -> None:
    """Seeded mini-batch SGD over the active samples, in place.  L2 decay
    on weights (not biases) is folded into the gradients; it pins the
    absolute logit scale, which the membership sigmoids read."""
    samples = view.active_samples()
    x = _image_batch(samples)
    y = _score_indices(samples, net.class_scores)
    n = len(samples)
    velocity: dict | None = None
    for _ in range(cfg.epochs_per_iteration):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            acts = nn.forward(net, x[sel])
            grads = nn.backward(net, acts, y[sel])
            if cfg.weight_decay:
                for idx, g in enumerate(grads.by_layer):
                    if g is not None:
                        g["w"] += np.asarray(
                            cfg.weight_decay * net.params[idx]["w"], dtype=g["w"].dtype
                        )
            velocity = nn.sgd_step(net, grads, cfg.lr, cfg.momentum, velocity)


def train_initial(net: nn.Network, data: DatasetView, cfg: TrainConfig) -> nn.Network:
    """Train the freshly built network on the full dataset; the result is
    the first checkpoint of a run.  The input network is not modified."""
    cfg.validate()
    if data.size == 0:
        raise ValueError("cannot train on an empty dataset view")
    trained = net.copy()
    _train_epochs(trained, data, cfg, np.random.default_rng((cfg.seed, 1)))
    return trained


def _freeze_convs(net: nn.Network) -> nn.Network:
    layers = tuple(
        replace(spec, trainable=False) if isinstance(spec, nn.Conv) else spec
        for spec in net.layers
    )
    return nn.Network(layers, net.params, net.class_scores, net.input_shape)


@dataclass
class TrainRun:
    """Everything a run produced, index 0 holding iteration 1.  Lists are
    equal length; dropped_sets[i] / thresholds_used[i] describe the view
    checkpoint i was trained on (empty / None for the initial training)."""

    networks: list[nn.Network]
    losses: list[float]
    dropped_sets: list[frozenset[int]]
    thresholds_used: list[DropoutThresholds | None]
    remaining_counts: list[int]
    stop_reason: str
    class_scores: tuple[int, ...]
    config: TrainConfig

    @property
    def iterations(self) -> int:
        return len(self.networks)


STOP_LOSS = "loss_below_threshold"
STOP_BUDGET = "max_iterations"


def repetitive_train(base, cfg: TrainConfig, run_dir=None, layers=None) -> TrainRun:
    """Full repetitive drop-out training over the original sample list.

    Builds and trains the initial network, then alternates membership
    scoring (under the previous network, over all original samples),
    threshold tuning, drop-out, and warm-start retraining until the
    quadratic loss falls below cfg.loss_threshold or the iteration budget
    is spent.  When run_dir is given, checkpoints and bookkeeping files
    are persisted there as the run progresses.
    """
    cfg.validate()
    base = list(base)
    if not base:
        raise ValueError("cannot train on an empty dataset")
    ids = [s.id for s in base]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")
    _score_indices(base, cfg.class_scores)  # label range check up front

    h, w, c = base[0].image.shape
    input_shape = (c, h, w)
    for s in base:
        if s.image.shape != (h, w, c):
            raise ValueError(f"sample {s.id}: image shape {s.image.shape} != {(h, w, c)}")
    if layers is None:
        if h != w:
            raise ValueError("default architecture needs square images; pass layers=")
        layers = nn.default_architecture(len(cfg.class_scores), image_size=h)

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")

    labels = np.array([s.score for s in base])
    dist = class_counts(full_view(base))

    net = train_initial(
        nn.build_network(layers, cfg.class_scores, cfg.seed, input_shape), full_view(base), cfg
    )
    run = TrainRun(
        networks=[net],
        losses=[quadratic_loss(net, base)],
        dropped_sets=[frozenset()],
        thresholds_used=[None],
        remaining_counts=[len(base)],
        stop_reason=STOP_BUDGET,
        class_scores=cfg.class_scores,
        config=cfg,
    )
    _persist_iteration(run, 1, run_dir)

    if run.losses[-1] < cfg.loss_threshold:
        run.stop_reason = STOP_LOSS
    else:
        for iteration in range(2, cfg.max_iterations + 1):
            table = compute_likelihoods(net, base, use_softmax=cfg.likelihood_softmax)
            thresholds = tune_thresholds(table, labels, dist, cfg)
            dropped = frozenset(
                select_dropouts(table, labels, dist, thresholds, cfg.literal_condition_mode)
            )
            view = apply_mask(base, dropped)
            if view.size == 0:
                raise EmptyViewError(iteration)

            net = net.copy()
            if cfg.freeze_conv:
                net = _freeze_convs(net)
            _train_epochs(net, view, cfg, np.random.default_rng((cfg.seed, iteration)))

            run.networks.append(net)
            run.losses.append(quadratic_loss(net, base))
            run.dropped_sets.append(dropped)
            run.thresholds_used.append(thresholds)
            run.remaining_counts.append(view.size)
            _persist_iteration(run, iteration, run_dir)
            if run.losses[-1] < cfg.loss_threshold:
                run.stop_reason = STOP_LOSS
                break

    if run_dir is not None:
        _write_history(run, run_dir)
    return run


# ---------------------------------------------------------------------------
# Run directory layout


def _persist_iteration(run: TrainRun, iteration: int, run_dir: Path | None) -> None:
    if run_dir is None:
        return
    save_checkpoint(run.networks[iteration - 1], iteration, run_dir / f"net_{iteration}.ckpt")
    with open(run_dir / f"dropped_{iteration}.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"])
        for sid in sorted(run.dropped_sets[iteration - 1]):
            writer.writerow([sid])


def _format_threshold(value: float) -> str:
    return f"{value:.6g}"


def _write_history(run: TrainRun, run_dir: Path) -> None:
    with open(run_dir / "history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "k1", "k2", "remaining_count"])
        for i in range(run.iterations):
            th = run.thresholds_used[i]
            writer.writerow(
                [
                    i + 1,
                    f"{run.losses[i]:.6f}",
                    _format_threshold(th.k1) if th else "",
                    _format_threshold(th.k2) if th else "",
                    run.remaining_counts[i],
                ]
            )


def load_run(run_dir) -> TrainRun:
    """Rebuild a TrainRun from a persisted run directory."""
    run_dir = Path(run_dir)
    cfg = TrainConfig.from_text((run_dir / "config.txt").read_text(encoding="utf-8"))
    history_path = run_dir / "history.csv"
    if not history_path.exists():
        raise FileNotFoundError(f"{history_path}: run has no history (incomplete run?)")
    losses: list[float] = []
    thresholds: list[DropoutThresholds | None] = []
    remaining: list[int] = []
    with open(history_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            losses.append(float(row["loss"]))
            if row["k1"]:
                thresholds.append(DropoutThresholds(float(row["k1"]), float(row["k2"])))
            else:
                thresholds.append(None)
            remaining.append(int(row["remaining_count"]))

    networks: list[nn.Network] = []
    dropped_sets: list[frozenset[int]] = []
    for i in range(1, len(losses) + 1):
        net, iteration = load_checkpoint(run_dir / f"net_{i}.ckpt")
        if iteration != i:
            raise ValueError(f"net_{i}.ckpt carries iteration {iteration}")
        networks.append(net)
        with open(run_dir / f"dropped_{i}.csv", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            dropped_sets.append(frozenset(int(row["sample_id"]) for row in reader))

    stop = STOP_LOSS if losses and losses[-1] < cfg.loss_threshold else STOP_BUDGET
    return TrainRun(
        networks=networks,
        losses=losses,
        dropped_sets=dropped_sets,
        thresholds_used=thresholds,
        remaining_counts=remaining,
        stop_reason=stop,
        class_scores=networks[0].class_scores if networks else cfg.class_scores,
        config=cfg,
    )
