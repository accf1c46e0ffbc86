"""Single-layer channel selection and weight reconstruction.

:func:`select_and_reconstruct` ramps the LASSO penalty up from zero,
alternating a coordinate-descent selection with a least-squares refit of the
surviving channels, until exactly ``nnz - f`` channels remain.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pcp.graph import accuracy, apply_selection
from pcp.numerics import lasso_cd, least_squares
from pcp.sampler import SamplerConfig, collect_features

ZERO_TOL = 1e-10


class PruneError(RuntimeError):
    pass


@dataclass(frozen=True)
class LambdaRamp:
    initial_scale: float = 1e-4   # first nonzero lambda, as a fraction of lambda_max
    growth: float = 2.0
    max_steps: int = 64

    def __post_init__(self):
        if self.initial_scale < 0 or self.growth <= 1 or self.max_steps < 1:
            raise ValueError(f"invalid lambda ramp {self}")


@dataclass(frozen=True, eq=False)
class PruneRequest:
    batch: object
    current_selection: np.ndarray
    current_weights: np.ndarray
    channels_to_remove: int
    ramp: LambdaRamp = field(default_factory=LambdaRamp)

    def __post_init__(self):
        sel = np.asarray(self.current_selection, dtype=np.uint8)
        object.__setattr__(self, "current_selection", sel)
        nnz = int(sel.sum())
        f = self.channels_to_remove
        if f < 1:
            raise ValueError(f"channels_to_remove must be >= 1, got {f}")
        if f > nnz - 1:
            raise ValueError(f"cannot remove {f} of {nnz} live channels; at least one must remain")
        c = self.batch.n_channels
        if sel.shape != (c,) or np.shape(self.current_weights)[1] != c:
            raise ValueError("selection, weights and batch disagree on the channel count")

    @property
    def target_nnz(self):
        return int(self.current_selection.sum()) - self.channels_to_remove


@dataclass(frozen=True, eq=False)
class PruneResult:
    selection: np.ndarray
    weights: np.ndarray
    reconstruction_error: float
    lambda_used: float
    steps: int = 0


def _contributions(batch, w):
    """Design columns vec(X_i W_i^T) for every channel: [S*n, c]."""
    c, S, hw = batch.x_slices.shape
    n = w.shape[0]
    wr = w.reshape(n, c, hw)
    z = np.einsum("csk,nck->csn", batch.x_slices, wr, optimize=True)
    return z.reshape(c, S * n).T


def _refit(batch, support, n, kshape):
    """Least-squares weights for the channels in ``support``; zeros elsewhere."""
    c = batch.n_channels
    idx = np.flatnonzero(support)
    A = batch.design_inputs(idx)
    sol = least_squares(A, batch.target)                     # [k*hw, n]
    w = np.zeros((n, c) + kshape, dtype=np.float64)
    w[:, idx] = sol.T.reshape((n, len(idx)) + kshape)
    resid = batch.target - A @ sol
    return w, float(np.sum(resid * resid))


def reconstruction_error(batch, support, weights):
    """Squared Frobenius residual of ``weights`` restricted to ``support`` on the batch."""
    idx = np.flatnonzero(support)
    n = weights.shape[0]
    w = np.asarray(weights, np.float64)[:, idx].reshape(n, -1)
    resid = batch.target - batch.design_inputs(idx) @ w.T
    return float(np.sum(resid * resid))


def select_and_reconstruct(req):
    """Remove exactly ``req.channels_to_remove`` channels and refit the rest."""
    batch = req.batch
    w = np.asarray(req.current_weights, dtype=np.float64)
    n, kshape = w.shape[0], tuple(w.shape[2:])
    live = req.current_selection.astype(bool)
    frozen = ~live
    target = req.target_nnz
    y = batch.target.reshape(-1)

    fits = {}  # support bytes -> (weights, error)

    def refit(support):
        key = support.tobytes()
        if key not in fits:
            fits[key] = _refit(batch, support, n, kshape)
        return fits[key]

    w = w * live[None, :, None, None]
    z = _contributions(batch, w)
    gram, corr = z.T @ z, z.T @ y
    lam_max = float(np.max(np.abs(2.0 * corr[live]))) if live.any() else 0.0

    lam = 0.0
    prev_beta = None
    beta = None
    support = live.copy()
    step = 0
    for step in range(req.ramp.max_steps + 1):
        beta = lasso_cd(None, lam, frozen, gram=gram, corr=corr)
        support = (np.abs(beta) > ZERO_TOL) & live
        if support.sum() <= target:
            break
        # Refit surviving channels; the refit weights define the next design.
        w_fit, _ = refit(support)
        z = _contributions(batch, w_fit)
        gram, corr = z.T @ z, z.T @ y
        frozen = ~support
        prev_beta = beta
        lam = req.ramp.initial_scale * lam_max if lam == 0.0 else lam * req.ramp.growth
        if lam == 0.0:
            # all-zero design: nothing carries signal, drop by index order below
            support = np.zeros_like(live)
            break
    else:
        raise PruneError(
            f"layer {batch.layer}: support still {int(support.sum())} > {target} after {req.ramp.max_steps} lambda steps"
        )

    if support.sum() < target:
        # Re-add the channels that were strongest at the previous lambda.
        mags = np.abs(prev_beta) if prev_beta is not None else np.zeros(len(live))
        cand = np.flatnonzero(live & ~support)
        order = cand[np.lexsort((cand, -mags[cand]))]
        support = support.copy()
        support[order[: target - int(support.sum())]] = True

    w_new, err = refit(support)
    return PruneResult(support.astype(np.uint8), w_new.astype(np.float32), err, float(lam), step)


def attempt_prune(state, original, layer, f, images, valset, sampler_cfg=SamplerConfig(),
                  ramp=LambdaRamp(), cache=None):
    """Trial-prune one layer of ``state`` and score the hybrid model on ``valset``.

    ``state`` is not modified.
    """
    batch = collect_features(state, original, layer, images, sampler_cfg, cache=cache)
    req = PruneRequest(batch, state.selections[layer], state.layers[layer].weight, f, ramp)
    trial = select_and_reconstruct(req)
    hybrid = apply_selection(state, layer, trial.selection, trial.weights)
    return trial, accuracy(hybrid, valset.images, valset.labels)


def prune_committed(state, original, layers, f_per_layer, images, sampler_cfg=SamplerConfig(),
                    ramp=LambdaRamp(), seed_for=None, cache=None):
    """Prune ``layers`` shallow-to-deep, re-collecting features after every update.

    ``f_per_layer`` maps layer -> channels to remove. ``seed_for(layer)``
    optionally supplies a per-layer sampler seed. Returns the new model and
    the per-layer :class:`PruneResult`; the input model is untouched.
    """
    layers = list(layers)
    if layers != sorted(layers) or len(set(layers)) != len(layers):
        raise ValueError(f"layers must be strictly ascending, got {layers}")
    current = state
    results = {}
    for layer in layers:
        cfg = sampler_cfg if seed_for is None else _with_seed(sampler_cfg, seed_for(layer))
        batch = collect_features(current, original, layer, images, cfg, cache=cache)
        req = PruneRequest(batch, current.selections[layer], current.layers[layer].weight,
                           f_per_layer[layer], ramp)
        res = select_and_reconstruct(req)
        current = apply_selection(current, layer, res.selection, res.weights)
        results[layer] = res
    return current, results


def _with_seed(cfg, seed):
    from dataclasses import replace

    return replace(cfg, seed=int(seed))
