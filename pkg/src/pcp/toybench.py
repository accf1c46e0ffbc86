"""Synthetic 4-class image benchmark and the two reference architectures.

Each class is drawn from one of two shape templates (horizontal bar or
anti-diagonal, vertical bar or plus, diagonal or corner, ring or dot grid)
with position jitter, random colour and pixel noise. A domain is described by
additive brightness, contrast and a structured background pattern, which is
how the target domain is shifted away from the source.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from pcp.graph import Layer, ModelGraph, conv, fc
from pcp.transfer import Dataset

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class GeneratorSpec:
    num_classes: int = 4
    image_size: int = 8
    channels: int = 3
    n_train: int = 512
    n_val: int = 128
    n_test: int = 128
    jitter: int = 1
    variants: int = 2
    color_jitter: float = 0.3
    noise: float = 0.4
    brightness: float = 0.0
    contrast: float = 1.0
    background: float = 0.0
    domain: str = "source"
    seed: int = 0

    def shifted(self, **changes):
        return replace(self, **changes)


def target_spec(source, brightness=0.25, contrast=0.7, background=0.5, seed_offset=1000):
    """Default shifted target domain for a given source spec."""
    return source.shifted(brightness=brightness, contrast=contrast, background=background,
                          domain="target", seed=source.seed + seed_offset)


def _masks(size):
    # templates on a grid 2 px smaller than the image so jitter stays inside
    s = size - 2
    m = np.zeros((8, s, s), dtype=np.float64)
    mid = s // 2
    idx = np.arange(s)
    m[0, mid - 1:mid + 1, :] = 1.0                    # horizontal bar
    m[1, :, mid - 1:mid + 1] = 1.0                    # vertical bar
    m[2, idx, idx] = 1.0                              # diagonal
    m[2, idx[:-1], idx[1:]] = 1.0
    m[3, 1:-1, 1:-1] = 1.0                            # ring
    m[3, 2:-2, 2:-2] = 0.0
    m[4, idx, s - 1 - idx] = 1.0                      # anti-diagonal
    m[4, idx[:-1], s - 2 - idx[:-1]] = 1.0
    m[5, mid - 1:mid + 1, 1:-1] = 1.0                 # plus
    m[5, 1:-1, mid - 1:mid + 1] = 1.0
    m[6, :2, :] = 1.0                                 # corner L
    m[6, :, :2] = 1.0
    m[7, ::2, ::2] = 1.0                              # dot grid
    return m


def _background(size, channels):
    yy, xx = np.mgrid[0:size, 0:size]
    checker = ((yy + xx) % 2).astype(np.float64)
    stripes = 0.5 * (1.0 + np.sin(xx * np.pi / 2.0))
    bg = np.stack([checker, stripes, 1.0 - checker][:channels])
    return bg - bg.mean()


def _render(spec, n, rng):
    if spec.num_classes > 4 or not 1 <= spec.variants <= 2:
        raise ValueError("the toy generator draws at most 4 classes with 1 or 2 variants each")
    size, ch = spec.image_size, spec.channels
    masks = _masks(size)
    labels = rng.integers(0, spec.num_classes, size=n)
    # each class is drawn from one of `variants` templates: k, k+4, ...
    variant = rng.integers(0, spec.variants, size=n) if spec.variants > 1 else np.zeros(n, int)
    offsets = rng.integers(-spec.jitter, spec.jitter + 1, size=(n, 2)) if spec.jitter else np.zeros((n, 2), int)
    colors = 0.8 + spec.color_jitter * rng.uniform(-1.0, 1.0, size=(n, ch))
    noise = rng.standard_normal((n, ch, size, size)) if spec.noise else None
    images = np.zeros((n, ch, size, size), dtype=np.float64)
    s = size - 2
    for k in range(n):
        y0, x0 = 1 + offsets[k, 0], 1 + offsets[k, 1]
        images[k, :, y0:y0 + s, x0:x0 + s] = colors[k][:, None, None] * masks[labels[k] + 4 * variant[k]]
    images = 0.5 + spec.contrast * (images - 0.5)
    if spec.background:
        images += spec.background * _background(size, ch)
    if noise is not None:
        images += spec.noise * noise
    images += spec.brightness
    return images.astype(np.float32), labels.astype(np.int64)


def generate_splits(spec):
    """Render train/val/test splits; each split uses its own RNG stream."""
    children = np.random.SeedSequence([spec.seed, 7919]).spawn(len(SPLITS))
    counts = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    out = {}
    for split, child in zip(SPLITS, children):
        images, labels = _render(spec, counts[split], np.random.default_rng(child))
        out[split] = Dataset(images, labels, domain=spec.domain, name=f"{spec.domain}-{split}")
    return out


def generate(spec, split="train"):
    return generate_splits(spec)[split]


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _conv(rng, cin, cout, k, prunable, name):
    pad = k // 2
    return conv(_he(rng, (cout, cin, k, k), cin * k * k), np.zeros(cout, np.float32),
                stride=1, pad=pad, prunable=prunable, name=name)


def build_reference_model(arch="tinyvgg", seed=0, num_classes=4, image_size=8, channels=3):
    """Seeded He-initialised reference network.

    ``tinyvgg``: conv 3-16, conv 16-16, pool, conv 16-32, conv 32-32, pool, fc.
    ``tinyres``: convs 3 and 4 replaced by one bottleneck block (1x1, 3x3, 1x1)
    on 16 channels with an identity shortcut.
    """
    rng = np.random.default_rng(seed)
    relu, pool = Layer("relu"), Layer("maxpool", size=2)
    final = image_size // 4
    if arch == "tinyvgg":
        layers = [
            _conv(rng, channels, 16, 3, False, "conv1"), relu,
            _conv(rng, 16, 16, 3, True, "conv2"), relu, pool,
            _conv(rng, 16, 32, 3, True, "conv3"), relu,
            _conv(rng, 32, 32, 3, True, "conv4"), relu, pool,
            Layer("flatten"),
        ]
        feat = 32 * final * final
    elif arch == "tinyres":
        layers = [
            _conv(rng, channels, 16, 3, False, "conv1"), relu,
            _conv(rng, 16, 16, 3, True, "conv2"), relu, pool,
            Layer("res_entry", name="block1"),
            _conv(rng, 16, 16, 1, True, "block1_conv1"), relu,
            _conv(rng, 16, 16, 3, True, "block1_conv2"), relu,
            _conv(rng, 16, 16, 1, True, "block1_conv3"),
            Layer("res_exit", name="block1"), relu, pool,
            Layer("flatten"),
        ]
        feat = 16 * final * final
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    layers.append(fc(_he(rng, (num_classes, feat), feat), np.zeros(num_classes, np.float32), name="fc"))
    return ModelGraph(layers, (channels, image_size, image_size), name=arch)
