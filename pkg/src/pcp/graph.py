"""Chain-structured CNN with per-layer channel-selection masks.

A model is an ordered tuple of :class:`Layer` objects. Residual blocks are
delimited by ``res_entry``/``res_exit`` markers: the entry stashes its input
as the shortcut and the exit adds it back. Channel selections are kept as 0/1
masks over each prunable conv's *input* channels; masked channels are zeroed
before the conv. Physical channel removal only happens in :func:`export_compact`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from pcp.numerics import conv2d_forward, conv_output_size

LAYER_KINDS = ("conv", "fc", "relu", "maxpool", "flatten", "res_entry", "res_exit", "gather")


class ShapeError(ValueError):
    pass


class SelectionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Layer:
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    pad: int = 0
    size: int = 2
    prunable: bool = False
    name: str = ""
    index: np.ndarray | None = None  # channel indices kept by a ``gather`` layer

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.weight is None or self.weight.ndim != 4):
            raise ShapeError(f"conv layer {self.name!r} needs a 4-d weight")
        if self.kind == "fc" and (self.weight is None or self.weight.ndim != 2):
            raise ShapeError(f"fc layer {self.name!r} needs a 2-d weight")
        if self.prunable and self.kind != "conv":
            raise ValueError("only conv layers can be prunable")

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def equals(self, other):
        if (self.kind, self.stride, self.pad, self.size, self.prunable, self.name) != (
            other.kind, other.stride, other.pad, other.size, other.prunable, other.name
        ):
            return False
        for a, b in ((self.weight, other.weight), (self.bias, other.bias), (self.index, other.index)):
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or a.dtype != b.dtype or not np.array_equal(a, b)):
                return False
        return True


def conv(weight, bias, stride=1, pad=0, prunable=False, name=""):
    return Layer("conv", np.asarray(weight, np.float32), np.asarray(bias, np.float32),
                 stride=stride, pad=pad, prunable=prunable, name=name)


def fc(weight, bias, name=""):
    return Layer("fc", np.asarray(weight, np.float32), np.asarray(bias, np.float32), name=name)


@dataclass(frozen=True, eq=False)
class ModelGraph:
    layers: tuple
    input_shape: tuple  # (channels, height, width)
    selections: dict = field(default_factory=dict)
    name: str = "model"
    iteration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        sel = {}
        for i, layer in enumerate(self.layers):
            if layer.prunable:
                beta = self.selections.get(i)
                if beta is None:
                    beta = np.ones(layer.in_channels, dtype=np.uint8)
                beta = np.asarray(beta, dtype=np.uint8)
                if beta.shape != (layer.in_channels,):
                    raise SelectionError(
                        f"selection for layer {i} has length {beta.shape}, expected {layer.in_channels}"
                    )
                if beta.sum() < 1:
                    raise SelectionError(f"selection for layer {i} keeps no channels")
                sel[i] = beta
        extra = set(self.selections) - set(sel)
        if extra:
            raise SelectionError(f"selections given for non-prunable layers {sorted(extra)}")
        object.__setattr__(self, "selections", sel)
        _infer_shapes(self)

    # -- structure -------------------------------------------------------
    @property
    def prunable_layers(self):
        return sorted(self.selections)

    @property
    def num_classes(self):
        return self.shapes[-1][0]

    @property
    def shapes(self):
        """Output shape (without batch) of every layer."""
        return self._shapes

    def input_shape_of(self, index):
        return self.input_shape if index == 0 else self._shapes[index - 1]

    @property
    def samplers(self):
        """Sampler masks keyed by residual-entry index (mirrors the block's first-conv selection)."""
        out = {}
        for i, layer in enumerate(self.layers):
            if layer.kind == "res_entry":
                first = _next_conv_in_block(self.layers, i)
                if first is not None and first in self.selections:
                    out[i] = self.selections[first]
        return out

    def nnz(self, index):
        return int(self.selections[index].sum())

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, ModelGraph):
            return NotImplemented
        if (self.input_shape, self.name, self.iteration, len(self.layers)) != (
            other.input_shape, other.name, other.iteration, len(other.layers)
        ):
            return False
        if any(not a.equals(b) for a, b in zip(self.layers, other.layers)):
            return False
        if self.selections.keys() != other.selections.keys():
            return False
        return all(np.array_equal(self.selections[k], other.selections[k]) for k in self.selections)

    __hash__ = None


def _next_conv_in_block(layers, entry):
    for j in range(entry + 1, len(layers)):
        if layers[j].kind == "conv":
            return j
        if layers[j].kind == "res_exit":
            return None
    return None


def _infer_shapes(model):
    shapes = []
    shape = model.input_shape
    stack = []
    for i, layer in enumerate(model.layers):
        k = layer.kind
        if k == "conv":
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ShapeError(
                    f"layer {i} ({layer.name or 'conv'}): expects {layer.in_channels} input channels, got shape {shape}"
                )
            kh, kw = layer.weight.shape[2:]
            try:
                shape = (layer.out_channels, conv_output_size(shape[1], kh, layer.stride, layer.pad),
                         conv_output_size(shape[2], kw, layer.stride, layer.pad))
            except ValueError as exc:
                raise ShapeError(f"layer {i} ({layer.name or 'conv'}): {exc}") from None
            if layer.bias is not None and layer.bias.shape != (layer.out_channels,):
                raise ShapeError(f"layer {i}: bias shape {layer.bias.shape} mismatches {layer.out_channels} filters")
        elif k == "maxpool":
            if shape[1] % layer.size or shape[2] % layer.size:
                raise ShapeError(f"layer {i}: maxpool size {layer.size} does not divide {shape[1:]}")
            shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k == "fc":
            if len(shape) != 1 or shape[0] != layer.weight.shape[1]:
                raise ShapeError(f"layer {i} ({layer.name or 'fc'}): expects {layer.weight.shape[1]} inputs, got shape {shape}")
            shape = (layer.weight.shape[0],)
        elif k == "res_entry":
            stack.append((i, shape))
        elif k == "res_exit":
            if not stack:
                raise ShapeError(f"layer {i}: res_exit without matching res_entry")
            j, short = stack.pop()
            if short != shape:
                raise ShapeError(f"layer {i}: residual branch shape {shape} differs from shortcut {short} (entry {j})")
        elif k == "gather":
            shape = (len(layer.index),) + tuple(shape[1:])
        shapes.append(tuple(shape))
    if stack:
        raise ShapeError(f"unterminated residual block starting at layer {stack[-1][0]}")
    object.__setattr__(model, "_shapes", tuple(shapes))


# -- producer/consumer bookkeeping ------------------------------------------

def producer_of(model, index):
    """Conv whose output filters feed ``index``'s input channels one-to-one.

    Returns ``None`` when no filter can be removed on the producer side: the
    first conv of the network, a residual block's first conv (its input is
    shared with the shortcut), or a conv reading a residual sum.
    """
    for j in range(index - 1, -1, -1):
        k = model.layers[j].kind
        if k in ("relu", "maxpool"):
            continue
        if k == "conv":
            return j
        return None
    return None


def is_residual_first(model, index):
    return index > 0 and model.layers[index - 1].kind == "res_entry"


def residual_block_of(model, index):
    """(entry, exit) indices of the residual block containing ``index``, if any."""
    depth = 0
    for j in range(index - 1, -1, -1):
        k = model.layers[j].kind
        if k == "res_exit":
            depth += 1
        elif k == "res_entry":
            if depth == 0:
                for e in range(index + 1, len(model.layers)):
                    if model.layers[e].kind == "res_exit":
                        return j, e
                return None
            depth -= 1
    return None


def is_residual_last(model, index):
    """True when ``index`` is the last conv of a residual branch (output meets the shortcut)."""
    block = residual_block_of(model, index)
    if block is None:
        return False
    _, exit_ = block
    return all(model.layers[j].kind != "conv" for j in range(index + 1, exit_))


def removed_filters(model, index):
    """Boolean mask of output filters of conv ``index`` dropped by its consumer's selection."""
    n = model.layers[index].out_channels
    for j, layer in enumerate(model.layers[index + 1:], start=index + 1):
        if layer.kind in ("relu", "maxpool"):
            continue
        if layer.kind == "conv" and j in model.selections and producer_of(model, j) == index:
            return model.selections[j] == 0
        break
    return np.zeros(n, dtype=bool)


# -- forward -----------------------------------------------------------------

def _maxpool(x, size):
    N, C, H, W = x.shape
    return x.reshape(N, C, H // size, size, W // size, size).max(axis=(3, 5))


def forward(model, batch, record_at=()):
    """Run inference; returns ``(logits, recorded)``.

    ``recorded[i]`` is ``(layer_input, layer_output)`` for every requested
    layer index ``i``. For a conv, the input is recorded before masking and the
    output is the pre-activation response including bias.
    """
    x = np.asarray(batch, dtype=np.float32)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} does not match model input {model.input_shape}")
    record_at = set(record_at)
    recorded = {}
    stack = []
    for i, layer in enumerate(model.layers):
        k = layer.kind
        inp = x
        if k == "conv":
            xin = x
            beta = model.selections.get(i)
            if beta is not None and not beta.all():
                xin = x * beta.astype(np.float32)[None, :, None, None]
            x = conv2d_forward(xin, layer.weight, layer.bias, layer.stride, layer.pad)
        elif k == "relu":
            x = np.maximum(x, 0)
        elif k == "maxpool":
            x = _maxpool(x, layer.size)
        elif k == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif k == "fc":
            x = (x.astype(np.float64) @ layer.weight.T.astype(np.float64) + layer.bias).astype(np.float32)
        elif k == "res_entry":
            stack.append(x)
        elif k == "res_exit":
            x = (x.astype(np.float64) + stack.pop()).astype(np.float32)
        elif k == "gather":
            x = x[:, layer.index]
        if i in record_at:
            recorded[i] = (inp, x)
    return x, recorded


def predict(model, images, batch_size=256):
    out = []
    for s in range(0, len(images), batch_size):
        out.append(np.argmax(forward(model, images[s:s + batch_size])[0], axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model, images, labels, batch_size=256):
    if labels is None:
        raise ValueError("accuracy needs labels")
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(model, images, batch_size) == np.asarray(labels)))


# -- FLOPs -------------------------------------------------------------------

def layer_flops(model):
    """Multiply-accumulate count per conv/fc layer index."""
    out = {}
    for i, layer in enumerate(model.layers):
        if layer.kind == "conv":
            nnz_in = model.nnz(i) if i in model.selections else layer.in_channels
            n_eff = layer.out_channels - int(removed_filters(model, i).sum())
            kh, kw = layer.weight.shape[2:]
            _, oh, ow = model.shapes[i]
            out[i] = nnz_in * kh * kw * n_eff * oh * ow
        elif layer.kind == "fc":
            out[i] = int(layer.weight.shape[0] * layer.weight.shape[1])
    return out


def flops(model):
    return int(sum(layer_flops(model).values()))


def compression_ratio(original, current):
    f = flops(current)
    if f <= 0:
        raise ValueError("current model has zero FLOPs")
    return flops(original) / f


# -- selection updates ---------------------------------------------------------

def apply_selection(model, layer, beta, new_weights):
    """Return a copy of ``model`` with layer ``layer``'s selection and weights replaced."""
    if layer not in model.selections:
        raise SelectionError(f"layer {layer} is not prunable")
    beta = np.asarray(beta, dtype=np.uint8)
    old = model.selections[layer]
    if beta.shape != old.shape:
        raise SelectionError(f"selection length {beta.shape} differs from {old.shape}")
    if np.any((beta == 1) & (old == 0)):
        raise SelectionError(f"layer {layer}: selection would re-enable a pruned channel")
    if beta.sum() < 1:
        raise SelectionError(f"layer {layer}: at least one channel must remain")
    target = model.layers[layer]
    new_weights = np.asarray(new_weights, dtype=np.float32)
    if new_weights.shape != target.weight.shape:
        raise ShapeError(f"new weights {new_weights.shape} do not match layer shape {target.weight.shape}")
    new_weights = new_weights * beta.astype(np.float32)[None, :, None, None]
    layers = list(model.layers)
    layers[layer] = target.replace(weight=new_weights)
    selections = dict(model.selections)
    selections[layer] = beta.copy()
    return model.replace(layers=tuple(layers), selections=selections)


def export_compact(model):
    """Physically drop masked channels; the result has all-ones selections.

    Chain convs lose input channels and the producer loses the matching
    filters. A residual block's first conv keeps the shortcut intact by
    reading through a ``gather`` layer.
    """
    layers = list(model.layers)
    inserts = []
    for i in sorted(model.selections):
        keep = np.flatnonzero(model.selections[i])
        if len(keep) == len(model.selections[i]):
            continue
        layer = layers[i]
        layers[i] = layer.replace(weight=np.ascontiguousarray(layer.weight[:, keep]))
        p = producer_of(model, i)
        if p is not None:
            prod = layers[p]
            layers[p] = prod.replace(weight=np.ascontiguousarray(prod.weight[keep]),
                                     bias=np.ascontiguousarray(prod.bias[keep]))
        else:
            inserts.append((i, keep))
    for i, keep in sorted(inserts, reverse=True):
        layers.insert(i, Layer("gather", index=keep.astype(np.int64), name=f"sampler_{i}"))
    # prunable flags are dropped so the compact graph carries no selections
    layers = [l.replace(prunable=False) if l.prunable else l for l in layers]
    return ModelGraph(layers, model.input_shape, name=f"{model.name}-compact", iteration=model.iteration)
