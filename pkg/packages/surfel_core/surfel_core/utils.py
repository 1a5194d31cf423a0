"""
Utility functions for surfel_core.
"""

import time

import numpy as np


def _duration(seconds: float) -> str:
    seconds = int(seconds)
    return f"{seconds // 60}m {seconds % 60:02d}s" if seconds >= 60 else f"{seconds}s"


def show_progress(current: int, total: int, start_time: float, prefix: str = "", per_line: int = 50):
    """
    Dotted progress for step / frame loops.

    One dot per call; a status line (count, percentage, elapsed, ETA) closes
    every `per_line` dots and the final call. No carriage returns, so the
    output stays readable when piped to a log.
    """
    if total <= 0 or current < 1:
        return
    if (current - 1) % per_line == 0:
        print(prefix, end="", flush=True)
    print(".", end="", flush=True)
    if current % per_line and current != total:
        return
    elapsed = time.time() - start_time
    eta = elapsed * (total - current) / current if elapsed > 0 else 0.0
    print(f" {current}/{total} ({100.0 * current / total:.0f}%) | {_duration(elapsed)} elapsed"
          f" | ETA {_duration(eta)}", flush=True)


def normalize_vectors(v: np.ndarray, eps: float = 1e-12):
    """
    Unit vectors along the last axis.

    Returns:
        (unit, norm); rows with norm <= eps come back as zero vectors.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1)
    safe = np.where(norm > eps, norm, 1.0)
    unit = np.where((norm > eps)[..., None], v / safe[..., None], 0.0)
    return unit, norm


def normalize_backward(unit: np.ndarray, norm: np.ndarray, grad: np.ndarray,
                       eps: float = 1e-12) -> np.ndarray:
    """Adjoint of normalize_vectors: dL/dv = (g - n (n.g)) / |v|."""
    tangential = grad - unit * np.sum(unit * grad, axis=-1, keepdims=True)
    safe = np.where(norm > eps, norm, 1.0)
    return np.where((norm > eps)[..., None], tangential / safe[..., None], 0.0)
