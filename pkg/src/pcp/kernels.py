"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Set ``PCP_PURE_PYTHON=1`` to force the fallback.
"""
import os

if os.environ.get("PCP_PURE_PYTHON", "") not in ("", "0"):
    from pcp._kernels_py import col2im, im2col, lasso_cd_gram
    BACKEND = "python"
else:
    try:
        from pcp._kernels import col2im, im2col, lasso_cd_gram
        BACKEND = "cython"
    except ImportError:
        from pcp._kernels_py import col2im, im2col, lasso_cd_gram
        BACKEND = "python"

__all__ = ["BACKEND", "col2im", "im2col", "lasso_cd_gram"]
