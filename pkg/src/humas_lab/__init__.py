"""Trace-driven auto-scaling laboratory.

Pipeline pieces: trace ingestion, synthetic trace generation, resource
efficiency normalization, LSDD-based usage-pattern drift detection,
piecewise-linear pattern learning, workload forecasting, capacity planning,
and a cluster replay simulator that scores the whole loop.
"""

from ._blas import pin_single_threaded_blas

pin_single_threaded_blas()

__version__ = "0.1.0"
