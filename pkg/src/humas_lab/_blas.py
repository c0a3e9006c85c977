"""Pin BLAS to one thread per process.

The pipeline's linear algebra is thousands of small (~200x200) solves and
kernel products; threaded BLAS loses more to spin-wait synchronization on
those than it gains, and worker processes already provide the parallelism.
Must run before numpy first loads its BLAS, hence the env-var route with a
threadpoolctl fallback for interpreters where numpy is already imported.
"""

from __future__ import annotations

import os
import sys


def pin_single_threaded_blas() -> None:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")
    if "numpy" in sys.modules:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(1, user_api="blas")
        except Exception:
            pass
