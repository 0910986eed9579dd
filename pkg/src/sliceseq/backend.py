"""Kernel backend selection.

Hot kernels (cluster attention, segment reductions, centroid assignment)
exist in two functionally equivalent implementations: numba-compiled loops
and vectorized numpy. The env var SLICESEQ_BACKEND picks one ("numba" or
"numpy"); unset means numba when importable, numpy otherwise. The two paths
may differ in low-order bits; within one backend, single-threaded execution
is bit-deterministic.
"""

import os

ENV_VAR = "SLICESEQ_BACKEND"

try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False


def _detect() -> str:
    choice = os.environ.get(ENV_VAR, "").strip().lower()
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError(f"{ENV_VAR}=numba but numba is not importable")
        return "numba"
    if choice:
        raise RuntimeError(f"{ENV_VAR} must be 'numba' or 'numpy', got {choice!r}")
    return "numba" if NUMBA_AVAILABLE else "numpy"


_active = _detect()


def active_backend() -> str:
    return _active


def use_numba() -> bool:
    return _active == "numba"


def set_backend(name: str | None) -> None:
    """Switch backends at runtime (tests and benchmarks); None re-detects
    from the environment."""
    global _active
    if name is None:
        _active = _detect()
        return
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba backend requested but numba is not importable")
    _active = name


class MacCounter:
    """Running count of multiply-accumulate operations executed by the
    attention-map portion of cluster attention (scores + value aggregation).
    Incremented with actual loop trip counts, so it reflects the work the
    kernel really did, empty clusters and padding skips included."""

    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


attention_macs = MacCounter()
