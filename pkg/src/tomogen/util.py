"""Shared numeric helpers: seeding, hashing, HU normalization."""

from __future__ import annotations

import hashlib
import json

import numpy as np

HU_MIN = -1000.0
HU_MAX = 1000.0
HU_SCALE = 1000.0


def derive_seed(*parts) -> int:
    """Stable 63-bit seed derived from arbitrary labels.

    Used everywhere a sub-seed is needed (per-record, per-step, per-slice) so
    that results are reproducible and independent of execution order.
    """
    key = json.dumps(parts, sort_keys=True, default=str).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(obj) -> str:
    """sha256 hex digest of a canonical-JSON rendering of a config mapping."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def array_hash(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a)
    h = hashlib.sha256()
    h.update(str(a.dtype).encode())
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


def hu_to_model(x) -> np.ndarray:
    """Map HU values in [-1000, 1000] to model space [-1, 1]."""
    return np.asarray(x, dtype=np.float32) / HU_SCALE


def model_to_hu(x) -> np.ndarray:
    """Inverse of :func:`hu_to_model`, clipping to the valid model range first."""
    return np.clip(np.asarray(x, dtype=np.float32), -1.0, 1.0) * HU_SCALE


def psnr(a, b, data_range: float) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * float(np.log10(data_range**2 / mse))
