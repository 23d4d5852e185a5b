"""Selects the numeric kernel backend at import time.

The compiled core (``_kernels_c``) is preferred when it imported cleanly;
otherwise the numpy fallback is used. ``DRIVERINTENT_KERNEL=py`` or ``=c``
forces a choice (forcing ``c`` raises if the extension is unavailable).
Both backends satisfy the same contracts; results agree to float64
round-off but are not guaranteed bitwise-identical across backends.
"""

import os

from . import _kernels_py

_choice = os.environ.get("DRIVERINTENT_KERNEL", "auto").lower()
if _choice not in ("auto", "c", "py"):
    raise ValueError(f"DRIVERINTENT_KERNEL must be auto, c or py, got {_choice!r}")

if _choice == "py":
    impl = _kernels_py
    BACKEND = "py"
else:
    try:
        from . import _kernels_c as impl  # type: ignore[no-redef]

        BACKEND = "c"
    except ImportError:
        if _choice == "c":
            raise
        impl = _kernels_py
        BACKEND = "py"

gelu_fwd = impl.gelu_fwd
gelu_bwd = impl.gelu_bwd
softmax_fwd = impl.softmax_fwd
softmax_bwd = impl.softmax_bwd
layernorm_fwd = impl.layernorm_fwd
layernorm_bwd = impl.layernorm_bwd
adamw_update = impl.adamw_update
