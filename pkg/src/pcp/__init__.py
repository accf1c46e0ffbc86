"""Progressive channel pruning for small convolutional networks."""
from pcp.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
