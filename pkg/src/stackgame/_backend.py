"""Pick the compiled kernels when they import, else the Python twins.

Set ``STACKGAME_PURE=1`` to force the Python path.
"""
import os

from . import _pykernels as python_kernels

compiled_kernels = None
if os.environ.get("STACKGAME_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_kernels
    except ImportError:  # extension not built
        compiled_kernels = None

kernels = compiled_kernels if compiled_kernels is not None else python_kernels
BACKEND = kernels.BACKEND
