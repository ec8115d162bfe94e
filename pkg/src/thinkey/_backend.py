"""Select the kernel implementation at import time.

The compiled extension is used when it was built; set ``THINKEY_BACKEND=python``
to force the numpy fallback (the benchmark and the parity tests do this).
"""
import os

from . import _kernels_py

python_kernels = _kernels_py

try:
    from . import _kernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

if os.environ.get("THINKEY_BACKEND", "").lower() == "python" or compiled_kernels is None:
    kernels = _kernels_py
    BACKEND = "python"
else:
    kernels = compiled_kernels
    BACKEND = "compiled"
