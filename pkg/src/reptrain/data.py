"""Datasets: manifest ingestion, synthetic generation, and masked views.

A dataset is an immutable list of Samples.  Drop-out never removes
anything; it builds a DatasetView whose boolean mask is always relative to
the original list, so samples dropped in one iteration can reappear in the
next.

The synthetic generator makes score-labeled RGB images whose appearance
carries the label: low scores get cluttered noisy blobs, mid scores get
weak-to-absent blobs over textures that are easy to confuse, high scores
get one sharp high-contrast blob.  Ground-truth blob masks ship with each
image so highlight extraction can be scored with IoU.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ManifestError(ValueError):
    """Malformed manifest row or unreadable referenced image."""


@dataclass
class Sample:
    id: int
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    score: int
    truth_mask: np.ndarray | None = None  # (H, W) bool; synthetic samples only


@dataclass(frozen=True)
class DatasetView:
    """A mask over an immutable base list; the base is shared, never copied."""

    base: tuple[Sample, ...]
    active: np.ndarray  # bool, len == len(base)

    def __post_init__(self):
        if len(self.active) != len(self.base):
            raise ValueError("active mask length must equal base length")

    @property
    def size(self) -> int:
        return int(self.active.sum())

    def active_samples(self) -> list[Sample]:
        return [s for s, keep in zip(self.base, self.active) if keep]

    def active_ids(self) -> list[int]:
        return [s.id for s, keep in zip(self.base, self.active) if keep]


@dataclass(frozen=True)
class ScoreDistribution:
    counts: dict[int, int]
    ranked_majority: tuple[int, ...]  # up to three scores, most samples first


def full_view(base) -> DatasetView:
    base = tuple(base)
    return DatasetView(base, np.ones(len(base), dtype=bool))


def apply_mask(base, dropped_ids) -> DatasetView:
    """View of base with the given sample ids inactive.  Always computed
    against the full base, so re-admission is just a smaller dropped set."""
    base = tuple(base)
    dropped = set(dropped_ids)
    known = {s.id for s in base}
    unknown = dropped - known
    if unknown:
        raise KeyError(f"unknown sample ids in drop set: {sorted(unknown)[:5]}")
    active = np.array([s.id not in dropped for s in base], dtype=bool)
    return DatasetView(base, active)


def class_counts(view: DatasetView) -> ScoreDistribution:
    """Counts over active samples and the top-3 majority scores, ties going
    to the lower score."""
    counts: dict[int, int] = {}
    for s in view.active_samples():
        counts[s.score] = counts.get(s.score, 0) + 1
    ranked = sorted(counts, key=lambda sc: (-counts[sc], sc))
    return ScoreDistribution(counts=counts, ranked_majority=tuple(ranked[:3]))


# ---------------------------------------------------------------------------
# Manifest ingestion


def load_manifest(manifest_path, image_root, class_scores, image_size: int = 32) -> list[Sample]:
    """Read a `path,score` CSV (header required) and decode each image,
    resized bilinearly to image_size.  Ids follow manifest order."""
    manifest_path = Path(manifest_path)
    image_root = Path(image_root)
    allowed = set(int(s) for s in class_scores)
    samples: list[Sample] = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip().lower() for h in header[:2]] != ["path", "score"]:
            raise ManifestError(f"{manifest_path}: first row must be the header 'path,score'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise ManifestError(f"{manifest_path}:{lineno}: expected 'path,score'")
            rel, raw_score = row[0].strip(), row[1].strip()
            try:
                score = int(raw_score)
            except ValueError:
                raise ManifestError(
                    f"{manifest_path}:{lineno}: score {raw_score!r} is not an integer"
                ) from None
            if score not in allowed:
                raise ManifestError(
                    f"{manifest_path}:{lineno}: score {score} outside configured classes "
                    f"{sorted(allowed)}"
                )
            img_path = image_root / rel
            try:
                with Image.open(img_path) as im:
                    im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except OSError as exc:
                raise ManifestError(f"{manifest_path}:{lineno}: cannot read {img_path}: {exc}")
            samples.append(Sample(id=len(samples), image=arr, score=score))
    return samples


# ---------------------------------------------------------------------------
# Synthetic generation

DEFAULT_PROPORTIONS: dict[int, float] = {
    2: 0.05,
    3: 0.27,
    4: 0.33,
    5: 0.21,
    6: 0.07,
    7: 0.04,
    8: 0.02,
    9: 0.01,
}


def largest_remainder_counts(n: int, proportions: dict[int, float]) -> dict[int, int]:
    """Integer per-score counts summing exactly to n; leftover units go to
    the largest fractional remainders, lower score first on ties."""
    if n < 0:
        raise ValueError("n must be >= 0")
    total = sum(proportions.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"proportions sum to {total!r}, expected 1.0")
    if any(f < 0 for f in proportions.values()):
        raise ValueError("proportions must be nonnegative")
    scores = sorted(proportions)
    quotas = {s: n * proportions[s] for s in scores}
    counts = {s: int(np.floor(quotas[s])) for s in scores}
    leftover = n - sum(counts.values())
    by_remainder = sorted(scores, key=lambda s: (-(quotas[s] - counts[s]), s))
    for s in by_remainder[:leftover]:
        counts[s] += 1
    return counts


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Upsample a (g, g, C) grid to (size, size, C)."""
    g = grid.shape[0]
    coords = (np.arange(size) + 0.5) * g / size - 0.5
    coords = np.clip(coords, 0, g - 1)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, g - 1)
    frac = coords - i0
    rows = grid[i0][:, i0] * (1 - frac[None, :, None]) + grid[i0][:, i1] * frac[None, :, None]
    rows1 = grid[i1][:, i0] * (1 - frac[None, :, None]) + grid[i1][:, i1] * frac[None, :, None]
    return rows * (1 - frac[:, None, None]) + rows1 * frac[:, None, None]


def _texture(rng: np.random.Generator, size: int, grain: int, amplitude: float) -> np.ndarray:
    grid = rng.normal(0.0, 1.0, (grain, grain, 3))
    return _bilinear_upsample(grid, size) * amplitude


def _blob_weight(size: int, cx: float, cy: float, radius: float, edge: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.hypot(xx - cx, yy - cy)
    return 1.0 / (1.0 + np.exp((dist - radius) / edge))

def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _render_sample(score: int, size: int, rng: np.random.Generator):
    # The background texture is drawn from one distribution for every
    # class, so it carries no label information: a plain mid-score image is
    # genuinely ambiguous among the three majority classes, and only the
    # blob/clutter foreground separates scores.
    base = rng.uniform(0.30, 0.55, 3)
    grain = max(2, int(round(_log_uniform(rng, 3.0, 16.0))))
    img = base[None, None, :] + _texture(rng, size, grain, rng.uniform(0.05, 0.10))
    noise_amp = rng.uniform(0.05, 0.10) if score <= 2 else rng.uniform(0.005, 0.02)
    img += rng.normal(0.0, noise_amp, (size, size, 3))

    mask = np.zeros((size, size), dtype=bool)
    if score <= 2:
        # clutter: several small noisy blotches
        for _ in range(int(rng.integers(4, 8))):
            r = rng.uniform(1.5, 3.5)
            cx, cy = rng.uniform(r, size - r, 2)
            w = _blob_weight(size, cx, cy, r, edge=rng.uniform(0.8, 1.5))
            tint = rng.uniform(-0.45, 0.45, 3)
            img += w[:, :, None] * (tint + rng.normal(0.0, 0.15, (size, size, 3)))
            mask |= w > 0.5
    elif score in (3, 4):
        # a slice of each plain mid class carries a weak foreign signal
        # (clutter for 3, a faint blob for 4): ambiguously labeled samples
        # whose membership in the majority classes stays low no matter how
        # long the model trains, because the foreign features keep
        # strengthening with the classes they really belong to
        if rng.uniform() < 0.35:
            if score == 3:
                strength = _log_uniform(rng, 0.25, 1.0)
                for _ in range(int(rng.integers(2, 4))):
                    r = rng.uniform(1.5, 3.0)
                    cx, cy = rng.uniform(r, size - r, 2)
                    w = _blob_weight(size, cx, cy, r, edge=rng.uniform(1.0, 1.8))
                    tint = rng.uniform(-0.3, 0.3, 3) * strength
                    img += w[:, :, None] * (
                        tint + rng.normal(0.0, 0.08 * strength, (size, size, 3))
                    )
                    mask |= w > 0.5
            else:
                radius = rng.uniform(2.5, 4.5)
                contrast = _log_uniform(rng, 0.03, 0.10)
                cx, cy = rng.uniform(radius + 2, size - radius - 2, 2)
                w = _blob_weight(size, cx, cy, radius, rng.uniform(1.5, 2.5))
                img += w[:, :, None] * contrast * np.array([1.0, 0.95, 0.85])
                mask = w > 0.5
    elif score >= 5:
        if score == 5:
            # weak blob; faintness spans barely-there to nearly class-6
            radius = rng.uniform(3.0, 5.0)
            contrast = _log_uniform(rng, 0.04, 0.22)
            edge = rng.uniform(1.5, 2.5)
        else:
            # sharp blob; contrast/size/sharpness climb in small steps, so
            # separating the four excellent grades takes fine-grained
            # contrast sensitivity that is only learned late
            radius = 3.5 + 0.8 * (score - 6) + rng.uniform(-0.5, 0.5)
            contrast = 0.28 + 0.10 * (score - 6) + rng.uniform(-0.04, 0.04)
            edge = max(0.35, 1.0 - 0.18 * (score - 6) + rng.uniform(-0.05, 0.05))
        margin = radius + 2
        cx, cy = rng.uniform(margin, size - margin, 2)
        w = _blob_weight(size, cx, cy, radius, edge)
        tint = np.array([1.0, 0.95, 0.85]) + rng.uniform(-0.1, 0.1, 3)
        blob_color = np.clip(base + contrast * tint, 0.0, 1.0)
        img = img * (1 - w[:, :, None]) + w[:, :, None] * (
            blob_color[None, None, :] + rng.normal(0.0, 0.01, (size, size, 3))
        )
        mask = w > 0.5

    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def synth_generate(
    n: int,
    proportions: dict[int, float] | None = None,
    image_size: int = 32,
    seed: int = 0,
) -> list[Sample]:
    """Generate n labeled samples with per-score counts fixed by
    largest-remainder rounding of the proportions.  Fully deterministic:
    identical arguments give byte-identical images and masks."""
    props = dict(DEFAULT_PROPORTIONS if proportions is None else proportions)
    counts = largest_remainder_counts(n, props)
    labels = [s for s in sorted(counts) for _ in range(counts[s])]
    rng = np.random.default_rng(seed)
    rng.shuffle(labels)
    samples = []
    for i, score in enumerate(labels):
        img, mask = _render_sample(score, image_size, rng)
        samples.append(Sample(id=i, image=img, score=int(score), truth_mask=mask))
    return samples


def shuffle_split(samples, holdout_fraction: float, seed: int):
    """Seeded shuffle split into (train, holdout); original ids are kept."""
    if not 0.0 <= holdout_fraction <= 1.0:
        raise ValueError("holdout_fraction must be in [0, 1]")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_holdout = int(round(len(samples) * holdout_fraction))
    holdout_idx = set(order[:n_holdout].tolist())
    train = [s for i, s in enumerate(samples) if i not in holdout_idx]
    holdout = [s for i, s in enumerate(samples) if i in holdout_idx]
    return train, holdout


# ---------------------------------------------------------------------------
# Export


def _to_png(arr: np.ndarray) -> Image.Image:
    return Image.fromarray((np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))


def export_dataset(samples, out_dir) -> Path:
    """Write images/NNNN.png, masks/NNNN.png (where a truth mask exists),
    and manifest.csv under out_dir.  Returns the manifest path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    mask_dir = out_dir / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        name = f"{s.id:05d}.png"
        _to_png(s.image).save(img_dir / name)
        if s.truth_mask is not None:
            mask_dir.mkdir(parents=True, exist_ok=True)
            Image.fromarray(s.truth_mask.astype(np.uint8) * 255).save(mask_dir / name)
        rows.append((f"images/{name}", s.score))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "score"])
        writer.writerows(rows)
    return manifest
