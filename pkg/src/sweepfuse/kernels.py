"""Kernel backend selection.

The compute-heavy inner loops (census transform, homography warping, cost
volume sweeps, semi-global path aggregation, masked median) exist twice: a
compiled Cython extension and a pure numpy fallback with identical,
bit-for-bit output. The extension is used when importable; set
SWEEPFUSE_KERNELS=python or =native to force a backend.
"""

from __future__ import annotations

import os

from . import _kernels_np
from ._kernels_np import COST_SENTINEL, SGM_DIRECTIONS, popcount32  # noqa: F401

_KERNEL_FUNCS = (
    "census_transform",
    "warp_bilinear",
    "sweep_full",
    "sweep_local",
    "sgm_scan",
    "median_filter_masked",
)


def _load_native():
    try:
        from . import _kernels_c
        return _kernels_c
    except ImportError:
        return None


def _select():
    mode = os.environ.get("SWEEPFUSE_KERNELS", "auto").strip().lower()
    if mode not in ("auto", "native", "python"):
        raise RuntimeError(f"SWEEPFUSE_KERNELS must be auto, native or python, got {mode!r}")
    if mode == "python":
        return _kernels_np, "python"
    native = _load_native()
    if native is not None:
        return native, "native"
    if mode == "native":
        raise RuntimeError("SWEEPFUSE_KERNELS=native but the compiled extension is unavailable")
    return _kernels_np, "python"


_impl, _backend_name = _select()


def backend_name() -> str:
    """Name of the active backend: 'native' or 'python'."""
    return _backend_name


def available_backends() -> list[str]:
    out = ["python"]
    if _load_native() is not None:
        out.insert(0, "native")
    return out


def get_backend(name: str):
    """Return the kernel module for an explicit backend name (for tests and
    benchmarks)."""
    if name == "python":
        return _kernels_np
    if name == "native":
        native = _load_native()
        if native is None:
            raise RuntimeError("compiled kernel extension is not available")
        return native
    raise ValueError(f"unknown backend {name!r}")


census_transform = _impl.census_transform
warp_bilinear = _impl.warp_bilinear
sweep_full = _impl.sweep_full
sweep_local = _impl.sweep_local
sgm_scan = _impl.sgm_scan
median_filter_masked = _impl.median_filter_masked
