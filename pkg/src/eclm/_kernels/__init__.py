"""Kernel dispatch.

The numba implementation is used when numba imports cleanly and the
environment variable ``ECLM_NUMBA`` is not set to ``0``. The pure-numpy
path is always importable as ``eclm._kernels.numpy_impl``.
"""
import importlib
import os

from . import numpy_impl

_requested = os.environ.get("ECLM_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

numba_impl = None
if _requested:
    try:
        numba_impl = importlib.import_module(".numba_impl", __name__)
    except ImportError:  # pragma: no cover - numba missing
        numba_impl = None

USE_NUMBA = numba_impl is not None
backend = numba_impl if USE_NUMBA else numpy_impl
BACKEND_NAME = "numba" if USE_NUMBA else "numpy"

# loss-only evaluations and helpers always come from numpy
softplus = numpy_impl.softplus
renorm_rows = numpy_impl.renorm_rows
transe_batch_loss = numpy_impl.transe_batch_loss
demography_batch_loss = numpy_impl.demography_batch_loss
loyalty_batch_loss = numpy_impl.loyalty_batch_loss
cnn_batch_forward = numpy_impl.cnn_batch_forward

transe_scores = backend.transe_scores
transe_step = backend.transe_step
literal_scores = backend.literal_scores
demography_step = backend.demography_step
loyalty_step = backend.loyalty_step
row_dots = backend.row_dots


def get_backend(name: str):
    """Return the kernel module by name (``numpy`` or ``numba``)."""
    if name == "numpy":
        return numpy_impl
    if name == "numba":
        return importlib.import_module(".numba_impl", __name__)
    raise ValueError(f"unknown kernel backend {name!r}")
