"""Highlight-region extraction from retrained network pairs.

For one image, take the first-conv feature maps under two checkpoints of a
run, find the channel whose maps correlate least between the two, subtract
them, and binarize the magnitude of that difference with 1-D 2-means.  The
high-magnitude cluster is the highlight region: the part of the image whose
early-layer response moved most during retraining.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .nn import Network, conv1_feature_maps
from .trainer import TrainRun


@dataclass(frozen=True)
class HighlightConfig:
    """gap selects the comparison pair: the last checkpoint against the one
    gap iterations earlier.  signed clusters raw difference values instead
    of magnitudes.  post_activation rectifies the conv maps before
    comparison (off by default; rectified maps of shut-off channels are
    constant zero and would hijack minimum-correlation selection).
    zero_variance_corr is the correlation assigned to a channel pair where
    either map is constant."""

    gap: int = 1
    signed: bool = False
    post_activation: bool = False
    zero_variance_corr: float = 0.0

    def __post_init__(self):
        if self.gap < 1:
            raise ValueError("gap must be >= 1")


@dataclass
class DifferenceMap:
    values: np.ndarray  # (H, W)
    channel: int
    iteration_pair: tuple[int, int] | None = None  # (later, earlier), 1-based


@dataclass
class HighlightMask:
    mask: np.ndarray  # (H, W) bool, True on the highlight cluster
    centroid_low: float
    centroid_high: float


def pearson(a: np.ndarray, b: np.ndarray, zero_variance: float = 0.0) -> float:
    """Pearson correlation of two equally-shaped maps, flattened; pairs
    with a constant map score zero_variance."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("maps must have equal shapes")
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va == 0.0 or vb == 0.0:
        return zero_variance
    return float((da @ db) / np.sqrt(va * vb))


def channel_correlations(maps_a, maps_b, zero_variance: float = 0.0) -> np.ndarray:
    if len(maps_a) != len(maps_b):
        raise ValueError(f"channel count mismatch: {len(maps_a)} vs {len(maps_b)}")
    for j, (ma, mb) in enumerate(zip(maps_a, maps_b)):
        if np.shape(ma) != np.shape(mb):
            raise ValueError(f"channel {j}: shape {np.shape(ma)} vs {np.shape(mb)}")
    return np.array([pearson(ma, mb, zero_variance) for ma, mb in zip(maps_a, maps_b)])


def min_corr_index(maps_a, maps_b, zero_variance: float = 0.0) -> int:
    """Channel index minimizing the correlation between the two map stacks;
    ties go to the lowest index."""
    return int(channel_correlations(maps_a, maps_b, zero_variance).argmin())


def difference_map(maps_a, maps_b, channel: int) -> DifferenceMap:
    """Elementwise maps_a[channel] - maps_b[channel]."""
    values = np.asarray(maps_a[channel], dtype=np.float64) - np.asarray(
        maps_b[channel], dtype=np.float64
    )
    return DifferenceMap(values=values, channel=channel)


def two_means(diff: DifferenceMap, signed: bool = False) -> HighlightMask:
    """1-D Lloyd 2-means over the difference magnitudes (raw values when
    signed), centroids seeded at the data min and max, iterated to an
    assignment fixpoint.  The larger-centroid cluster is the highlight.  A
    constant map yields an all-background mask."""
    data = diff.values if signed else np.abs(diff.values)
    if data.size == 0:
        raise ValueError("empty difference map")
    flat = data.ravel().astype(np.float64)
    lo, hi = float(flat.min()), float(flat.max())
    if hi - lo < 1e-9:
        return HighlightMask(np.zeros(data.shape, dtype=bool), lo, hi)
    c_low, c_high = lo, hi
    assign = None
    for _ in range(1000):
        new_assign = np.abs(flat - c_high) < np.abs(flat - c_low)  # ties -> low cluster
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        if assign.any():
            c_high = float(flat[assign].mean())
        if (~assign).any():
            c_low = float(flat[~assign].mean())
    return HighlightMask(assign.reshape(data.shape), c_low, c_high)


def extract_highlight_pair(
    net_later: Network,
    net_earlier: Network,
    image: np.ndarray,
    cfg: HighlightConfig = HighlightConfig(),
) -> tuple[DifferenceMap, HighlightMask]:
    """Minimum-correlation channel difference between two networks on one
    image, plus its 2-means highlight mask."""
    maps_later = conv1_feature_maps(net_later, image, post_activation=cfg.post_activation)
    maps_earlier = conv1_feature_maps(net_earlier, image, post_activation=cfg.post_activation)
    channel = min_corr_index(maps_later, maps_earlier, cfg.zero_variance_corr)
    diff = difference_map(maps_later, maps_earlier, channel)
    return diff, two_means(diff, signed=cfg.signed)


def extract_highlight(
    run: TrainRun, image: np.ndarray, cfg: HighlightConfig = HighlightConfig()
) -> tuple[DifferenceMap, HighlightMask]:
    """Highlight of one image from a run's last checkpoint against the one
    cfg.gap iterations earlier."""
    if run.iterations < cfg.gap + 1:
        raise ValueError(
            f"run has {run.iterations} checkpoints; need at least {cfg.gap + 1} for gap {cfg.gap}"
        )
    later = run.iterations
    earlier = later - cfg.gap
    diff, mask = extract_highlight_pair(
        run.networks[later - 1], run.networks[earlier - 1], image, cfg
    )
    diff.iteration_pair = (later, earlier)
    return diff, mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("masks must have equal shapes")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


# ---------------------------------------------------------------------------
# Rendering

_GUTTER = 4


def _nearest_resize(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    ih, iw = arr.shape[:2]
    yi = np.minimum((np.arange(h) * ih) // h, ih - 1)
    xi = np.minimum((np.arange(w) * iw) // w, iw - 1)
    return arr[yi][:, xi]


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render_overlay(image: np.ndarray, diff: DifferenceMap, mask: HighlightMask, out_path) -> Path:
    """Write a three-panel PNG: the image, the min-max normalized
    difference map in grayscale (uniform gray when constant), and the image
    with the highlight region tinted red.  Panel width is the image width;
    panels are separated by fixed white gutters."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an HxWx3 image")
    h, w = img.shape[:2]

    values = diff.values
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        gray = np.full((h, w), 0.5)
    else:
        gray = _nearest_resize((values - lo) / (hi - lo), h, w)
    panel_diff = np.repeat(gray[:, :, None], 3, axis=2)

    tint = np.array([1.0, 0.15, 0.15])
    m = _nearest_resize(mask.mask.astype(np.float64), h, w)[:, :, None]
    panel_mask = img * (1 - 0.5 * m) + 0.5 * m * tint

    canvas = np.ones((h, 3 * w + 2 * _GUTTER, 3))
    canvas[:, :w] = img
    canvas[:, w + _GUTTER : 2 * w + _GUTTER] = panel_diff
    canvas[:, 2 * w + 2 * _GUTTER :] = panel_mask

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(canvas)).save(out_path)
    return out_path


def write_correlations_csv(maps_a, maps_b, out_path, zero_variance: float = 0.0) -> Path:
    """Per-channel correlation dump for inspection."""
    corrs = channel_correlations(maps_a, maps_b, zero_variance)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "correlation"])
        for j, c in enumerate(corrs):
            writer.writerow([j, f"{c:.6f}"])
    return out_path
