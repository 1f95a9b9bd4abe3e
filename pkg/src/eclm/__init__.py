"""Multi-view customer embeddings and lookalike audience expansion."""
from ._kernels import BACKEND_NAME as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
