"""Weighted-rank metric learning with a CMC retrieval benchmark harness.

Kept intentionally light: importing :mod:`warca` must not pull in numpy,
so that the CLI can pin BLAS thread counts before any heavy import.
Use the submodules directly (``warca.dataset``, ``warca.linear``, ...).
"""

__version__ = "0.1.0"
