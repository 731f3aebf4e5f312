"""Checkpoint persistence: a JSON manifest plus raw parameter blobs.

Layout: ``<dir>/manifest.json`` and ``<dir>/params/<name>.bin`` where each
blob is ``u32 rank, u32 dims..., little-endian f32 payload``. Integer
tensors are stored as f32 (all live values fit exactly). Save -> load ->
save round-trips byte-identically, manifest timestamps aside.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .util import config_hash


def write_blob(path: Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype="<f4")
    if array.ndim:
        array = np.ascontiguousarray(array)
    header = struct.pack("<I", array.ndim) + struct.pack(
        f"<{array.ndim}I", *array.shape
    )
    Path(path).write_bytes(header + array.tobytes())


def read_blob(path: Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (rank,) = struct.unpack_from("<I", buf, 0)
    dims = struct.unpack_from(f"<{rank}I", buf, 4)
    data = np.frombuffer(buf, dtype="<f4", offset=4 + 4 * rank)
    if data.size != int(np.prod(dims, dtype=np.int64)):
        raise ValueError(f"{path}: payload size {data.size} does not match dims {dims}")
    return data.reshape(dims).copy()


@dataclass
class Checkpoint:
    stage: str
    config: dict
    step: int
    metrics: dict
    upstream: dict
    params: dict[str, np.ndarray]
    manifest: dict

    @property
    def config_hash(self) -> str:
        return self.manifest["config_hash"]


def _blob_name(param_name: str) -> str:
    return param_name.replace("/", "_") + ".bin"


def save_checkpoint(
    directory: Path,
    stage: str,
    config: dict,
    step: int,
    params: dict[str, np.ndarray],
    metrics: dict | None = None,
    upstream: dict | None = None,
) -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float32)
        write_blob(directory / "params" / _blob_name(name), arr)
        entries.append({"name": name, "file": f"params/{_blob_name(name)}", "shape": list(arr.shape)})
    manifest = {
        "stage": stage,
        "config": config,
        "config_hash": config_hash(config),
        "step": int(step),
        "metrics": metrics or {},
        "upstream": upstream or {},
        "params": entries,
        "saved_at": time.time(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    params = {}
    for entry in manifest["params"]:
        arr = read_blob(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(
                f"{entry['file']}: blob shape {list(arr.shape)} != manifest {entry['shape']}"
            )
        params[entry["name"]] = arr
    return Checkpoint(
        stage=manifest["stage"],
        config=manifest["config"],
        step=manifest["step"],
        metrics=manifest["metrics"],
        upstream=manifest["upstream"],
        params=params,
        manifest=manifest,
    )


def state_dict_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_state_arrays(module: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    missing = sorted(set(state) - set(params))
    extra = sorted(set(params) - set(state))
    if missing or extra:
        raise ValueError(f"state mismatch; missing {missing}, unexpected {extra}")
    converted = {
        k: torch.from_numpy(params[k]).to(state[k].dtype).reshape(state[k].shape)
        for k in state
    }
    module.load_state_dict(converted)


def optimizer_arrays(optimizer: torch.optim.Optimizer, prefix: str = "opt") -> dict[str, np.ndarray]:
    """Flatten Adam state (step, exp_avg, exp_avg_sq) into named f32 blobs."""
    out = {}
    for gi, group in enumerate(optimizer.param_groups):
        for pi, p in enumerate(group["params"]):
            state = optimizer.state.get(p, {})
            for key, val in state.items():
                arr = val.detach().numpy() if torch.is_tensor(val) else np.asarray(float(val))
                out[f"{prefix}.{gi}.{pi}.{key}"] = arr.astype(np.float32)
    return out


def load_optimizer_arrays(
    optimizer: torch.optim.Optimizer, params: dict[str, np.ndarray], prefix: str = "opt"
) -> None:
    for gi, group in enumerate(optimizer.param_groups):
        for pi, p in enumerate(group["params"]):
            keys = {
                k.split(".")[-1]: k
                for k in params
                if k.startswith(f"{prefix}.{gi}.{pi}.")
            }
            if not keys:
                continue
            state = {}
            for short, full in keys.items():
                arr = params[full]
                if short == "step":
                    state[short] = torch.tensor(float(arr))
                else:
                    state[short] = torch.from_numpy(arr).reshape(p.shape)
            optimizer.state[p] = state
