"""Backend selection for the clause kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels``. Set ``MLNSMOOTH_PURE_PYTHON=1`` to
force the fallback.
"""
import os

if os.environ.get("MLNSMOOTH_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as _impl
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        from . import _pykernels as _impl

BACKEND = "cython" if _impl.__name__.endswith("_ckernels") else "python"

truth_batch = _impl.truth_batch
score_batch = _impl.score_batch
pll_batch = _impl.pll_batch
