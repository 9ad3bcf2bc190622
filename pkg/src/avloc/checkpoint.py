"""Training state persisted as a deterministic zip of ``.npy`` members plus JSON metadata.

Every member gets the same fixed timestamp and the metadata is dumped with
sorted keys, so saving the same state twice gives identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict

CHECKPOINT_FORMAT = "avloc-checkpoint"
CHECKPOINT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_steps: int
    step: int
    rng_state: dict
    version: int = CHECKPOINT_VERSION


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _put(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "adam_steps": ckpt.adam_steps,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "param_names": sorted(ckpt.params),
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _put(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for group, arrays in (("params", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
            for name in sorted(arrays):
                _put(zf, f"{group}/{name}.npy", _npy_bytes(arrays[name]))
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError, IsADirectoryError) as exc:
        raise ValueError(f"{path}: not a readable checkpoint ({exc})") from None
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")

        def group(prefix):
            return {n: np.load(io.BytesIO(zf.read(f"{prefix}/{n}.npy")), allow_pickle=False)
                    for n in meta["param_names"]}

        return Checkpoint(
            config=config_from_dict(meta["config"]),
            params=group("params"),
            adam_m=group("adam_m"),
            adam_v=group("adam_v"),
            adam_steps=meta["adam_steps"],
            step=meta["step"],
            rng_state=meta["rng_state"],
            version=meta["version"],
        )
