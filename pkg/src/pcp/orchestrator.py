"""The iterative attempt / select / prune loop."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from pcp.graph import accuracy, apply_selection, compression_ratio, flops, layer_flops
from pcp.io import save_model
from pcp.prune import LambdaRamp, attempt_prune, prune_committed
from pcp.sampler import OriginalFeatureCache, SamplerConfig

log = logging.getLogger(__name__)


class NoProgressError(RuntimeError):
    """Every prunable layer is down to one channel before the target ratio was reached."""

    def __init__(self, message, series):
        super().__init__(message)
        self.series = series


@dataclass(frozen=True)
class FSchedule:
    early_fraction: float = 0.30
    late_fraction: float = 0.10
    cap: int = 40
    early_breakpoint: float = 2.0
    late_breakpoint: float = 5.0

    def __post_init__(self):
        for frac in (self.early_fraction, self.late_fraction):
            if not 0.0 < frac <= 1.0:
                raise ValueError("schedule fractions must lie in (0, 1]")
        if self.cap < 1:
            raise ValueError("cap must be positive")
        if not self.early_breakpoint <= self.late_breakpoint:
            raise ValueError("breakpoints must be ordered")


@dataclass(frozen=True)
class PruneConfig:
    target_ratio: float = 2.0
    top_n: int = 4
    schedule: FSchedule = field(default_factory=FSchedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    ramp: LambdaRamp = field(default_factory=LambdaRamp)
    seed: int = 0
    jobs: int = 1
    max_iterations: int = 200
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.top_n < 1:
            raise ValueError(f"top_n must be positive, got {self.top_n}")
        if self.target_ratio <= 0:
            raise ValueError("target_ratio must be positive")
        if self.jobs < 1:
            raise ValueError("jobs must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        nested = {"schedule": FSchedule, "sampler": SamplerConfig, "ramp": LambdaRamp}
        for key, typ in nested.items():
            if isinstance(d.get(key), dict):
                d[key] = typ(**d[key])
        return cls(**d)


@dataclass
class IterationRecord:
    t: int
    acc: dict
    selected: list
    ratio: float
    flops: int
    removed: dict
    baseline_accuracy: float
    checkpoint: str | None = None
    wall_time: float = 0.0

    def to_json(self):
        return {
            "t": self.t,
            "acc": {str(k): v for k, v in self.acc.items()},
            "selected": list(self.selected),
            "ratio": self.ratio,
            "flops": self.flops,
            "removed": {str(k): v for k, v in self.removed.items()},
            "baseline_accuracy": self.baseline_accuracy,
            "checkpoint": self.checkpoint,
            "wall_time": self.wall_time,
        }


def schedule_f(nnz, ratio, schedule=FSchedule()):
    """Channels to remove from a layer holding ``nnz`` live channels at compression ``ratio``.

    Below the early breakpoint: ``max(ceil(early * nnz), cap)``; at or past the
    late breakpoint: ``min(ceil(late * nnz), cap)``; the fraction is
    interpolated linearly in between (using the ``min`` form). Always clamped
    to ``[1, nnz - 1]``.
    """
    if nnz < 2:
        raise ValueError("a layer needs at least 2 live channels to be pruned")
    s = schedule
    if ratio < s.early_breakpoint:
        f = max(math.ceil(s.early_fraction * nnz), s.cap)
    else:
        if ratio >= s.late_breakpoint or s.late_breakpoint == s.early_breakpoint:
            frac = s.late_fraction
        else:
            u = (ratio - s.early_breakpoint) / (s.late_breakpoint - s.early_breakpoint)
            frac = s.early_fraction + u * (s.late_fraction - s.early_fraction)
        # guard against 0.1 * 70 = 7.000000000000001 style round-up
        f = min(math.ceil(round(frac * nnz, 9)), s.cap)
    return int(min(max(f, 1), nnz - 1))


def select_top_n(acc, top_n):
    """The ``top_n`` layers with the highest trial accuracy, returned in ascending index order."""
    if not acc:
        raise ValueError("no candidate layers")
    ranked = sorted(acc, key=lambda layer: (-acc[layer], layer))
    return sorted(ranked[:top_n])


def _seed(cfg, t, layer, phase):
    return int(np.random.SeedSequence([cfg.seed, cfg.sampler.seed, t, layer, phase]).generate_state(1)[0])


def run_pcp(model, cfg, calib_images, valset, on_iteration=None):
    """Progressively prune ``model`` until ``flops(model)/flops(M_t) >= cfg.target_ratio``.

    Returns a list of ``(model_t, IterationRecord)``. Checkpoints and
    ``run_log.json`` are written when ``cfg.checkpoint_dir`` is set.
    """
    if valset.labels is None:
        raise ValueError("validation set must be labelled")
    original = model
    prunable = original.prunable_layers
    if cfg.top_n > len(prunable):
        raise ValueError(f"top_n={cfg.top_n} exceeds the {len(prunable)} prunable layers")
    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    series = []
    state = original
    cache = OriginalFeatureCache(original, np.asarray(calib_images, dtype=np.float32))

    ratio = compression_ratio(original, state)
    if ratio >= cfg.target_ratio:
        log.info("initial ratio %.3f already meets target %.3f", ratio, cfg.target_ratio)
        _write_log(out_dir, cfg, series, original)
        return series

    pool = ThreadPoolExecutor(cfg.jobs) if cfg.jobs > 1 else None
    try:
        for t in range(1, cfg.max_iterations + 1):
            start = time.perf_counter()
            eligible = [l for l in prunable if state.nnz(l) >= 2]
            if not eligible:
                _write_log(out_dir, cfg, series, original)
                raise NoProgressError(
                    f"every prunable layer is at one channel; reached ratio {ratio:.3f} < {cfg.target_ratio}", series
                )
            base_acc = accuracy(state, valset.images, valset.labels)
            f = {l: schedule_f(state.nnz(l), ratio, cfg.schedule) for l in eligible}

            def attempt(layer):
                sc = replace(cfg.sampler, seed=_seed(cfg, t, layer, 0))
                return attempt_prune(state, original, layer, f[layer], calib_images, valset, sc, cfg.ramp, cache)

            results = list(pool.map(attempt, eligible)) if pool else [attempt(l) for l in eligible]
            acc = {l: r[1] for l, r in zip(eligible, results)}
            selected = select_top_n(acc, cfg.top_n)

            state, _ = prune_committed(
                state, original, selected, f, calib_images, cfg.sampler, cfg.ramp,
                seed_for=lambda layer: _seed(cfg, t, layer, 1), cache=cache,
            )
            state = state.replace(iteration=t, name=f"{original.name}-t{t}")
            ratio = compression_ratio(original, state)
            rec = IterationRecord(
                t=t, acc=acc, selected=selected, ratio=ratio, flops=flops(state),
                removed={l: f[l] for l in selected}, baseline_accuracy=base_acc,
            )
            if out_dir is not None:
                rec.checkpoint = str(save_model(state, out_dir / f"iteration_{t}").name)
            rec.wall_time = time.perf_counter() - start
            log.info("iteration %d: selected %s, ratio %.3f (%.2fs)", t, selected, ratio, rec.wall_time)
            series.append((state, rec))
            if on_iteration is not None:
                on_iteration(state, rec)
            _write_log(out_dir, cfg, series, original)
            if ratio >= cfg.target_ratio:
                break
        else:
            raise NoProgressError(f"target ratio not reached within {cfg.max_iterations} iterations", series)
    finally:
        if pool is not None:
            pool.shutdown()
    return series


def _write_log(out_dir, cfg, series, original):
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": cfg.to_dict(),
        "original_flops": flops(original),
        "iterations": [rec.to_json() for _, rec in series],
    }
    (out_dir / "run_log.json").write_text(json.dumps(payload, indent=1))


def uniform_counts(model, target_ratio):
    """Smallest uniform removal fraction (as per-layer channel counts) reaching ``target_ratio``.

    Every prunable layer keeps ``ceil((1 - p) * c)`` channels; ``p`` is the
    smallest value on the grid of achievable per-layer counts for which the
    FLOPs ratio reaches the target. Counts only, no data involved.
    """
    prunable = model.prunable_layers
    base = flops(model)
    grid = sorted({k / model.layers[l].in_channels for l in prunable
                   for k in range(model.layers[l].in_channels)})
    for p in grid:
        counts = {l: model.layers[l].in_channels - max(1, math.ceil(round((1 - p) * model.layers[l].in_channels, 9)))
                  for l in prunable}
        probe = model
        for l, k in counts.items():
            if k:
                beta = np.ones(model.layers[l].in_channels, np.uint8)
                beta[:k] = 0
                probe = apply_selection(probe, l, beta, probe.layers[l].weight)
        if base / flops(probe) >= target_ratio:
            return {l: k for l, k in counts.items() if k}
    raise ValueError(f"ratio {target_ratio} unreachable by uniform pruning")


def one_shot_uniform(model, target_ratio, calib_images, sampler=SamplerConfig(), ramp=LambdaRamp(), seed=0):
    """Single-shot baseline: remove the same fraction from every prunable layer, shallow to deep."""
    counts = uniform_counts(model, target_ratio)
    cfg = PruneConfig(seed=seed, sampler=sampler, ramp=ramp)
    pruned, _ = prune_committed(
        model, model, sorted(counts), counts, calib_images, sampler, ramp,
        seed_for=lambda layer: _seed(cfg, 1, layer, 1),
    )
    return pruned


def remained_percentages(original, model):
    """Per prunable layer, percentage of input channels still selected."""
    return {l: 100.0 * model.nnz(l) / original.layers[l].in_channels for l in original.prunable_layers}


__all__ = [
    "FSchedule", "IterationRecord", "NoProgressError", "PruneConfig", "layer_flops",
    "one_shot_uniform", "remained_percentages", "run_pcp", "schedule_f", "select_top_n",
    "uniform_counts",
]
