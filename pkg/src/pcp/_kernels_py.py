"""Pure-Python/numpy fallbacks for the compiled kernels in ``_kernels.pyx``.

Same signatures and bit-for-bit the same arithmetic order for the LASSO loop,
so either backend produces identical selections.
"""
import numpy as np


def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def lasso_cd_gram(gram, corr, lam, frozen, beta0, tol=1e-8, max_sweeps=10000):
    c = gram.shape[0]
    beta = np.array(beta0, dtype=np.float64, copy=True)
    gb = gram @ beta
    half = 0.5 * lam
    for i in range(c):
        if frozen[i] and beta[i] != 0.0:
            gb -= gram[:, i] * beta[i]
            beta[i] = 0.0
    diag = np.diagonal(gram)
    sweep = 0
    while sweep < max_sweeps:
        sweep += 1
        max_delta = 0.0
        for i in range(c):
            if frozen[i] or diag[i] <= 0.0:
                continue
            r = corr[i] - (gb[i] - diag[i] * beta[i])
            new = _soft(r, half) / diag[i]
            delta = new - beta[i]
            if delta != 0.0:
                # elementwise loop keeps the summation order of the compiled path
                col = gram[:, i]
                for j in range(c):
                    gb[j] += col[j] * delta
                beta[i] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta < tol:
            break
    return beta, sweep


def _patch_index(shape, kh, kw, stride, pad):
    H, W = shape[2], shape[3]
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    iy = oy.reshape(-1, 1) * stride + ky.reshape(1, -1)
    ix = ox.reshape(-1, 1) * stride + kx.reshape(1, -1)
    return oh, ow, iy, ix


def im2col(x, kh, kw, stride, pad):
    n, c, H, W = x.shape
    oh, ow, iy, ix = _patch_index(x.shape, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # [n, c, positions, k] -> [n, positions, c, k]
    patches = xp[:, :, iy, ix].transpose(0, 2, 1, 3)
    return np.ascontiguousarray(patches.reshape(n * oh * ow, c * kh * kw), dtype=np.float64)


def col2im(cols, shape, kh, kw, stride, pad):
    n, c, H, W = shape
    oh, ow, iy, ix = _patch_index(shape, kh, kw, stride, pad)
    out = np.zeros((n, c, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    patches = cols.reshape(n, oh * ow, c, kh * kw).transpose(0, 2, 1, 3)
    np.add.at(out, (slice(None), slice(None), iy, ix), patches)
    return out[:, :, pad:pad + H, pad:pad + W].copy()
