"""Backward passes and plain mini-batch SGD for the supported layer set.

Gradients are computed in float64; parameters are stored back as float32.
Channels masked out by a selection receive zero weight gradient, so pruned
weights stay exactly zero.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pcp.graph import accuracy
from pcp.kernels import col2im, im2col

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid training config {self}")


class DivergenceError(FloatingPointError):
    pass


# -- per-layer forward/backward ---------------------------------------------

def conv_forward(x, w, b, stride=1, pad=0, mask=None):
    x = np.asarray(x, dtype=np.float64)
    if mask is not None:
        x = x * np.asarray(mask, dtype=np.float64)[None, :, None, None]
    n, _, kh, kw = w.shape
    cols = im2col(np.ascontiguousarray(x), kh, kw, stride, pad)
    oh = (x.shape[2] + 2 * pad - kh) // stride + 1
    ow = (x.shape[3] + 2 * pad - kw) // stride + 1
    out = cols @ np.asarray(w, np.float64).reshape(n, -1).T + np.asarray(b, np.float64)
    out = out.reshape(x.shape[0], oh, ow, n).transpose(0, 3, 1, 2)
    return out, (cols, x.shape, w, stride, pad, mask)


def conv_backward(dout, cache):
    cols, xshape, w, stride, pad, mask = cache
    n, _, kh, kw = w.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, n)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    dcols = np.ascontiguousarray(dmat @ np.asarray(w, np.float64).reshape(n, -1))
    dx = col2im(dcols, xshape, kh, kw, stride, pad)
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        dx = dx * m[None, :, None, None]
        dw = dw * m[None, :, None, None]
    return dx, dw, db


def fc_forward(x, w, b):
    x = np.asarray(x, dtype=np.float64)
    return x @ np.asarray(w, np.float64).T + np.asarray(b, np.float64), (x, w)


def fc_backward(dout, cache):
    x, w = cache
    return dout @ np.asarray(w, np.float64), dout.T @ x, dout.sum(axis=0)


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, cache):
    return dout * cache


def maxpool_forward(x, size=2):
    x = np.asarray(x, dtype=np.float64)
    N, C, H, W = x.shape
    win = x.reshape(N, C, H // size, size, W // size, size).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(N, C, H // size, W // size, size * size)
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], -1)[..., 0], (arg, x.shape, size)


def maxpool_backward(dout, cache):
    arg, shape, size = cache
    N, C, H, W = shape
    win = np.zeros((N, C, H // size, W // size, size * size))
    np.put_along_axis(win, arg[..., None], dout[..., None], -1)
    win = win.reshape(N, C, H // size, W // size, size, size).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(shape)


def residual_add_forward(branch, shortcut):
    return np.asarray(branch, np.float64) + np.asarray(shortcut, np.float64)


def residual_add_backward(dout):
    return dout, dout


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    N, K = z.shape
    if labels.shape != (N,):
        raise ValueError(f"{N} logits rows but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(N), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(N), labels] -= 1.0
    return float(loss), grad / N


# -- whole-model passes --------------------------------------------------------

def forward_train(model, x):
    """Forward pass keeping per-layer caches for :func:`backward`."""
    x = np.asarray(x, dtype=np.float64)
    tape = []
    stack = []
    for i, layer in enumerate(model.layers):
        k = layer.kind
        cache = None
        if k == "conv":
            mask = model.selections.get(i)
            x, cache = conv_forward(x, layer.weight, layer.bias, layer.stride, layer.pad,
                                    None if mask is None or mask.all() else mask)
        elif k == "relu":
            x, cache = relu_forward(x)
        elif k == "maxpool":
            x, cache = maxpool_forward(x, layer.size)
        elif k == "flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif k == "fc":
            x, cache = fc_forward(x, layer.weight, layer.bias)
        elif k == "res_entry":
            stack.append(x)
        elif k == "res_exit":
            x = residual_add_forward(x, stack.pop())
        elif k == "gather":
            cache = x.shape
            x = x[:, layer.index]
        tape.append(cache)
    return x, tape


def backward(model, tape, dlogits):
    """Return ``{layer_index: (dW, db)}`` for every conv/fc layer."""
    grads = {}
    dx = dlogits
    pending = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer, cache = model.layers[i], tape[i]
        k = layer.kind
        if k == "conv":
            dx, dw, db = conv_backward(dx, cache)
            grads[i] = (dw, db)
        elif k == "fc":
            dx, dw, db = fc_backward(dx, cache)
            grads[i] = (dw, db)
        elif k == "relu":
            dx = relu_backward(dx, cache)
        elif k == "maxpool":
            dx = maxpool_backward(dx, cache)
        elif k == "flatten":
            dx = dx.reshape(cache)
        elif k == "res_exit":
            dx, dshort = residual_add_backward(dx)
            pending.append(dshort)
        elif k == "res_entry":
            dx = dx + pending.pop()
        elif k == "gather":
            full = np.zeros(cache)
            full[:, layer.index] = dx
            dx = full
    return grads


def loss_and_grads(model, images, labels):
    logits, tape = forward_train(model, images)
    loss, dlogits = cross_entropy_loss(logits, labels)
    return loss, backward(model, tape, dlogits)


def sgd_step(model, grads, lr):
    layers = list(model.layers)
    for i, (dw, db) in grads.items():
        layer = layers[i]
        w = (layer.weight.astype(np.float64) - lr * dw).astype(np.float32)
        b = (layer.bias.astype(np.float64) - lr * db).astype(np.float32)
        if i in model.selections:
            w *= model.selections[i].astype(np.float32)[None, :, None, None]
        layers[i] = layer.replace(weight=w, bias=b)
    return model.replace(layers=tuple(layers))


def sgd_finetune(model, train, cfg, val=None, log_path=None):
    """Plain SGD on cross-entropy; returns ``(model, history)``.

    ``history`` has one dict per epoch with the mean training loss and, when
    ``val`` is given, validation accuracy. ``log_path`` receives it as CSV.
    """
    if train.labels is None:
        raise ValueError("fine-tuning needs a labelled training set")
    if cfg.lr == 0:
        return model, []
    rng = np.random.default_rng(cfg.seed)
    history = []
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            # overflow surfaces as a non-finite loss, reported below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(model, train.images[idx], train.labels[idx])
                model_next = sgd_step(model, grads, cfg.lr)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch}, batch starting {s}; lower the learning rate")
            model = model_next
            total += loss * len(idx)
        row = {"epoch": epoch, "loss": total / n}
        if val is not None:
            row["val_accuracy"] = accuracy(model, val.images, val.labels)
        log.info("epoch %d loss %.4f%s", epoch, row["loss"],
                 f" val {row['val_accuracy']:.4f}" if val is not None else "")
        history.append(row)
    if log_path is not None:
        write_train_log(history, log_path)
    return model, history


def write_train_log(history, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_accuracy"])
        for row in history:
            writer.writerow([row["epoch"], f"{row['loss']:.6f}",
                             "" if "val_accuracy" not in row else f"{row['val_accuracy']:.6f}"])
    return path
