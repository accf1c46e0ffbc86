"""Sampled regression data for single-layer channel pruning.

For a prunable conv, the inputs are im2col patches of the layer input taken
from the *current* (partially pruned) model at a handful of output positions
per image; the targets are the *original* model's pre-bias conv responses at
the same positions. For the last conv of a residual branch the target is
compensated for drift along the shortcut.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

import numpy as np

from pcp.graph import forward, is_residual_last, residual_block_of
from pcp.kernels import im2col

log = logging.getLogger(__name__)


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    positions_per_image: int = 10
    mode: str = "random"            # "random" or "variance"
    variance_threshold: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.positions_per_image < 1:
            raise ValueError("positions_per_image must be positive")
        if self.mode not in ("random", "variance"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.variance_threshold < 0:
            raise ValueError("variance_threshold must be non-negative")


@dataclass(frozen=True, eq=False)
class CalibrationBatch:
    x_slices: np.ndarray      # [c, S, h*w], one row block per input channel
    target: np.ndarray        # [S, n], pre-bias output to reconstruct
    layer: int
    positions: np.ndarray     # [S, 3] of (image, y, x)
    seed: int

    @property
    def n_rows(self):
        return self.target.shape[0]

    @property
    def n_channels(self):
        return self.x_slices.shape[0]

    def design_inputs(self, channels=None):
        """Stack per-channel slices side by side: [S, len(channels)*h*w]."""
        xs = self.x_slices if channels is None else self.x_slices[np.asarray(channels)]
        return xs.transpose(1, 0, 2).reshape(self.n_rows, -1)


def position_variance(feature):
    """Population variance across channels at every spatial location; [N,C,H,W] -> [N,H,W]."""
    return np.asarray(feature, dtype=np.float64).var(axis=1)


def variance_filter(candidates, feature, tau):
    """Keep the flat spatial positions of a single [C,H,W] feature whose cross-channel variance exceeds ``tau``."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    var = position_variance(np.asarray(feature)[None])[0].reshape(-1)
    candidates = np.asarray(candidates, dtype=np.int64)
    return candidates[var[candidates] > tau]


def residual_target(y1, y2, y1_pruned):
    """Compensated regression target ``y1 + y2 - y1_pruned``."""
    y1, y2, y1p = (np.asarray(a, dtype=np.float64) for a in (y1, y2, y1_pruned))
    if not (y1.shape == y2.shape == y1p.shape):
        raise ValueError(f"shape mismatch: {y1.shape}, {y2.shape}, {y1p.shape}")
    return y1 + y2 - y1p


def draw_positions(n_images, out_hw, cfg, variances=None, rng=None):
    """Per-image flat output positions, sorted ascending within each image.

    ``variances`` ([N, H*W]) is required in variance mode.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    total = out_hw[0] * out_hw[1]
    k = cfg.positions_per_image
    if k > total:
        raise SamplingError(f"positions_per_image={k} exceeds the {total} available output positions")
    picks = []
    for img in range(n_images):
        if cfg.mode == "variance":
            passing = np.flatnonzero(variances[img] > cfg.variance_threshold)
            if len(passing) >= k:
                chosen = rng.choice(passing, size=k, replace=False)
            elif len(passing) > 0:
                log.warning("image %d: only %d positions exceed variance threshold %g; using all of them",
                            img, len(passing), cfg.variance_threshold)
                chosen = passing
            else:
                log.warning("image %d: no position exceeds variance threshold %g; sampling at random",
                            img, cfg.variance_threshold)
                chosen = rng.choice(total, size=k, replace=False)
        else:
            chosen = rng.choice(total, size=k, replace=False)
        picks.append(np.sort(np.asarray(chosen, dtype=np.int64)))
    return picks


class OriginalFeatureCache:
    """Memoises original-model features per layer for one fixed image batch."""

    def __init__(self, original, images):
        self.original = original
        self.images = images
        self._store = {}
        self._lock = threading.Lock()

    def get(self, layer):
        with self._lock:
            hit = self._store.get(layer)
        if hit is None:
            hit = _original_features(self.original, layer, self.images)
            with self._lock:
                self._store.setdefault(layer, hit)
        return hit


def _original_features(original, layer, images):
    entry = None
    record = [layer]
    if is_residual_last(original, layer):
        entry = residual_block_of(original, layer)[0]
        record.append(entry)
    _, rec = forward(original, images, record)
    y0 = rec[layer][1].astype(np.float64) - original.layers[layer].bias.astype(np.float64)[None, :, None, None]
    y1 = None if entry is None else rec[entry][0].astype(np.float64)
    return y0, y1


def collect_features(pruned_model, original_model, layer, images, cfg=SamplerConfig(), cache=None):
    """Build the :class:`CalibrationBatch` for ``layer``.

    The same positions are used for the pruned-model inputs and the
    original-model targets. In variance mode the cross-channel variance is
    measured on the original model's response at that layer.
    """
    if layer not in pruned_model.selections or layer not in original_model.selections:
        raise SamplingError(f"layer {layer} is not prunable")
    images = np.asarray(images, dtype=np.float32)
    conv = pruned_model.layers[layer]
    kh, kw = conv.weight.shape[2:]

    if cache is not None:
        y0, y1 = cache.get(layer)
    else:
        y0, y1 = _original_features(original_model, layer, images)

    record = [layer]
    residual = y1 is not None
    if residual:
        entry = residual_block_of(pruned_model, layer)[0]
        record.append(entry)
    _, rec = forward(pruned_model, images, record)
    x_in = rec[layer][0].astype(np.float64)

    N, n, oh, ow = y0.shape
    variances = position_variance(y0).reshape(N, -1) if cfg.mode == "variance" else None
    picks = draw_positions(N, (oh, ow), cfg, variances)

    cols = im2col(np.ascontiguousarray(x_in), kh, kw, conv.stride, conv.pad)  # [N*oh*ow, c*kh*kw]
    rows = np.concatenate([img * oh * ow + p for img, p in enumerate(picks)])
    img_ix = np.concatenate([np.full(len(p), img) for img, p in enumerate(picks)])
    flat = np.concatenate(picks)
    yy, xx = flat // ow, flat % ow

    c = conv.in_channels
    x_slices = cols[rows].reshape(len(rows), c, kh * kw).transpose(1, 0, 2)
    target = y0[img_ix, :, yy, xx]
    if residual:
        y1_pruned = rec[entry][0].astype(np.float64)
        target = residual_target(y1[img_ix, :, yy, xx], target, y1_pruned[img_ix, :, yy, xx])
    positions = np.stack([img_ix, yy, xx], axis=1).astype(np.int64)
    return CalibrationBatch(np.ascontiguousarray(x_slices), np.ascontiguousarray(target),
                            layer, positions, cfg.seed)
