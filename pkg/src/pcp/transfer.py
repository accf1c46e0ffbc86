"""Pseudo-labelling of an unlabelled target domain and mixed source/target sets."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pcp.graph import forward


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    domain: str = "source"
    name: str = "data"
    provenance: np.ndarray | None = None  # per-sample domain tag, set on mixed sets

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        object.__setattr__(self, "images", images)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (images.shape[0],):
                raise ValueError(f"{images.shape[0]} images but {labels.shape} labels")
            if labels.size and labels.min() < 0:
                raise ValueError("labels must be non-negative")
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx, name=None):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.images[idx],
            None if self.labels is None else self.labels[idx],
            domain=self.domain,
            name=name or self.name,
            provenance=None if self.provenance is None else self.provenance[idx],
        )


@dataclass(frozen=True, eq=False)
class PseudoLabeledSet:
    indices: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray
    threshold: float = 0.0

    def __len__(self):
        return len(self.indices)

    def filter(self, threshold):
        keep = self.confidences >= threshold
        return PseudoLabeledSet(self.indices[keep], self.labels[keep], self.confidences[keep], threshold)

    def to_json(self):
        return {
            "threshold": self.threshold,
            "indices": [int(v) for v in self.indices],
            "labels": [int(v) for v in self.labels],
            "confidences": [float(v) for v in self.confidences],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(np.asarray(d["indices"], np.int64), np.asarray(d["labels"], np.int64),
                   np.asarray(d["confidences"], np.float64), float(d.get("threshold", 0.0)))


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def pseudo_label(model, target, conf_threshold=0.0, batch_size=256):
    """Label each target sample with the model's argmax class.

    Samples whose top softmax probability is below ``conf_threshold`` are
    dropped.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"confidence threshold must lie in [0, 1], got {conf_threshold}")
    probs = [softmax(forward(model, target.images[s:s + batch_size])[0])
             for s in range(0, len(target), batch_size)]
    probs = np.concatenate(probs) if probs else np.zeros((0, model.num_classes))
    conf = probs.max(axis=1)
    labels = probs.argmax(axis=1)
    keep = np.flatnonzero(conf >= conf_threshold)
    return PseudoLabeledSet(keep, labels[keep].astype(np.int64), conf[keep], float(conf_threshold))


@dataclass(frozen=True)
class MixConfig:
    target_share: float = 0.5   # fraction of the mixed sets drawn from pseudo-labelled target samples
    val_fraction: float = 0.5   # fraction of each domain's samples routed to validation
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.target_share <= 1.0:
            raise ValueError("target_share must lie in [0, 1]")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


def _split(n, val_fraction, rng):
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return perm[n_val:], perm[:n_val]


def _assemble(parts, rng, name):
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    prov = np.concatenate([np.full(len(p[1]), p[2]) for p in parts])
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], domain="mixed" if len(parts) > 1 else parts[0][2],
                   name=name, provenance=prov[order])


def supervised_sets(source, cfg=MixConfig()):
    """Source-only calibration/validation split."""
    if source.labels is None:
        raise ValueError("source dataset must be labelled")
    if len(source) == 0:
        raise ValueError("source dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    cal, val = _split(len(source), cfg.val_fraction, rng)
    return (
        _assemble([(source.images[cal], source.labels[cal], "source")], rng, "calibration"),
        _assemble([(source.images[val], source.labels[val], "source")], rng, "validation"),
    )


def build_mixed_sets(source, pseudo, target, cfg=MixConfig()):
    """Calibration and validation sets mixing true-labelled source and pseudo-labelled target samples.

    With an empty pseudo set this is exactly :func:`supervised_sets`.
    """
    n_src = 0 if source is None else len(source)
    n_tgt = len(pseudo)
    if n_tgt and (pseudo.indices.max() >= len(target) or pseudo.indices.min() < 0):
        raise IndexError("pseudo-label indices fall outside the target dataset")
    if n_tgt == 0:
        if n_src == 0:
            raise ValueError("no source samples and no pseudo-labelled target samples")
        return supervised_sets(source, cfg)
    if n_src and source.labels is None:
        raise ValueError("source dataset must be labelled")

    share = cfg.target_share if n_src else 1.0
    if share <= 0.0:
        return supervised_sets(source, cfg)
    total = n_tgt / share if share >= 1.0 else min(n_src / (1.0 - share), n_tgt / share)
    use_tgt = min(n_tgt, int(round(total * share)))
    use_src = min(n_src, int(np.floor(total + 1e-9)) - use_tgt)

    rng = np.random.default_rng(cfg.seed)
    src_idx = rng.permutation(n_src)[:use_src]
    tgt_pos = rng.permutation(n_tgt)[:use_tgt]
    s_cal, s_val = _split(use_src, cfg.val_fraction, rng)
    t_cal, t_val = _split(use_tgt, cfg.val_fraction, rng)

    def parts(s_sel, t_sel):
        out = []
        if len(s_sel):
            i = src_idx[s_sel]
            out.append((source.images[i], source.labels[i], "source"))
        if len(t_sel):
            p = tgt_pos[t_sel]
            out.append((target.images[pseudo.indices[p]], pseudo.labels[p], "target"))
        return out

    return _assemble(parts(s_cal, t_cal), rng, "calibration"), _assemble(parts(s_val, t_val), rng, "validation")
