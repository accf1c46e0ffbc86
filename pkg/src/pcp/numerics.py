"""Dense kernels: convolution forward pass, least squares and LASSO.

Tensors are plain ``numpy`` arrays. Storage is float32; every reduction is
carried out in float64 and cast back on return.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from pcp.kernels import im2col, lasso_cd_gram

__all__ = [
    "DesignMatrix",
    "conv2d_forward",
    "conv_output_size",
    "lasso_cd",
    "lasso_lambda_max",
    "lasso_objective",
    "least_squares",
    "soft_threshold",
]


def _require_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")


def conv_output_size(size, kernel, stride, pad):
    span = size + 2 * pad - kernel
    if span < 0 or span % stride:
        raise ValueError(
            f"input extent {size} with kernel {kernel}, stride {stride}, pad {pad} "
            "does not tile to an integer output size"
        )
    return span // stride + 1


def conv2d_forward(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlate ``x`` [N,c,H,W] with ``weight`` [n,c,h,w] via im2col.

    Returns a float32 array of shape [N,n,H',W'].
    """
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"expected 4-d input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"stride must be >= 1 and pad >= 0, got stride={stride} pad={pad}")
    N, c, H, W = x.shape
    n, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"input has {c} channels but weight expects {wc}")
    if bias is not None and np.shape(bias) != (n,):
        raise ValueError(f"bias shape {np.shape(bias)} does not match {n} filters")
    oh = conv_output_size(H, kh, stride, pad)
    ow = conv_output_size(W, kw, stride, pad)
    _require_finite("input", x)
    _require_finite("weight", weight)

    cols = im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)
    out = cols @ weight.reshape(n, -1).astype(np.float64).T
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return out.reshape(N, oh, ow, n).transpose(0, 3, 1, 2).astype(np.float32)


def least_squares(A, B):
    """Minimise ``||B - A @ X||_F`` over X.

    Uses QR with column pivoting; when A is numerically rank-deficient the
    minimum-norm solution is returned instead (SVD based).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    vector_rhs = B.ndim == 1
    if vector_rhs:
        B = B[:, None]
    if A.ndim != 2 or A.size == 0 or B.size == 0:
        raise ValueError(f"least_squares needs non-empty 2-d inputs, got {A.shape} and {B.shape}")
    m, k = A.shape
    if B.shape[0] != m:
        raise ValueError(f"row mismatch: A has {m} rows, B has {B.shape[0]}")

    X = None
    if m >= k:
        Q, R, perm = scipy.linalg.qr(A, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = max(m, k) * np.finfo(np.float64).eps * (diag[0] if diag.size else 0.0)
        if diag.size and diag[-1] > tol:
            Xp = scipy.linalg.solve_triangular(R, Q.T @ B)
            X = np.empty_like(Xp)
            X[perm] = Xp
    if X is None:
        # scipy's default cutoff (eps) keeps noise-level singular values of
        # exactly duplicated columns; use the max(m, k) * eps convention instead
        X = scipy.linalg.lstsq(A, B, cond=max(m, k) * np.finfo(np.float64).eps, lapack_driver="gelsd")[0]
    return X[:, 0] if vector_rhs else X


@dataclass(frozen=True)
class DesignMatrix:
    """Per-channel response columns and the flattened regression target.

    ``columns[:, i]`` is ``vec(X_i @ W_i.T)``, the contribution channel i makes
    to the layer output on the sampled rows.
    """

    columns: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=np.float64)
        tgt = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if cols.ndim != 2 or cols.shape[0] != tgt.shape[0]:
            raise ValueError(f"columns {cols.shape} incompatible with target of length {tgt.shape[0]}")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "target", tgt)

    @property
    def n_channels(self):
        return self.columns.shape[1]

    def gram(self):
        return self.columns.T @ self.columns

    def correlation(self):
        return self.columns.T @ self.target


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_lambda_max(design, frozen_zeros=None):
    """Smallest lambda at which every free coefficient is zero."""
    corr = np.abs(2.0 * design.correlation())
    if frozen_zeros is not None:
        corr = np.where(np.asarray(frozen_zeros, dtype=bool), 0.0, corr)
    return float(corr.max()) if corr.size else 0.0


def lasso_objective(design, beta, lam):
    r = design.target - design.columns @ beta
    return float(r @ r + lam * np.abs(beta).sum())


def lasso_cd(design, lam, frozen_zeros=None, *, beta0=None, tol=1e-8, max_sweeps=10_000,
             gram=None, corr=None, return_sweeps=False):
    """Cyclic coordinate descent for ``||y - Z b||^2 + lam * ||b||_1``.

    Coordinates flagged in ``frozen_zeros`` are held at exactly zero. A
    precomputed ``gram``/``corr`` pair may be passed to skip the products.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    c = design.n_channels if design is not None else gram.shape[0]
    if frozen_zeros is None:
        frozen = np.zeros(c, dtype=np.uint8)
    else:
        frozen = np.ascontiguousarray(frozen_zeros, dtype=np.uint8)
        if frozen.shape != (c,):
            raise ValueError(f"frozen mask has length {frozen.shape[0]}, expected {c}")
    if gram is None:
        gram = design.gram()
    if corr is None:
        corr = design.correlation()
    start = np.zeros(c) if beta0 is None else np.asarray(beta0, dtype=np.float64)
    beta, sweeps = lasso_cd_gram(
        np.ascontiguousarray(gram, dtype=np.float64),
        np.ascontiguousarray(corr, dtype=np.float64),
        float(lam), frozen, np.ascontiguousarray(start), float(tol), int(max_sweeps),
    )
    return (beta, sweeps) if return_sweeps else beta
