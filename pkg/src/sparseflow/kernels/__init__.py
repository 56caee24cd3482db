"""Compute kernels for convolution and pooling, with backend selection.

The compiled extension (`sparseflow.kernels._fast`) is preferred when it has
been built; otherwise the numpy implementations in `pyref` are used. Set
SPARSEFLOW_KERNELS=python or =compiled to force a backend (forcing `compiled`
raises if the extension is missing). Dense layers use BLAS matmul directly
and have no kernel here.
"""

import logging
import os

from . import pyref

_log = logging.getLogger(__name__)

_choice = os.environ.get("SPARSEFLOW_KERNELS", "auto")
if _choice not in ("auto", "python", "compiled"):
    raise ValueError(f"SPARSEFLOW_KERNELS must be auto|python|compiled, got {_choice!r}")

_impl = pyref
if _choice != "python":
    try:
        from . import _fast

        _impl = _fast
    except ImportError:
        if _choice == "compiled":
            raise
        _log.debug("compiled kernels unavailable, using numpy fallback")

BACKEND = "compiled" if _impl is not pyref else "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_weight = _impl.conv2d_backward_weight
conv2d_backward_input = _impl.conv2d_backward_input
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward


def backend_name():
    """Active kernel backend: 'compiled' or 'python'."""
    return BACKEND
