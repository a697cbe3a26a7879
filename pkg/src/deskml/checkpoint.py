"""Self-describing binary checkpoints for TrainState.

Layout: magic, version, JSON manifest (step, rng, array headers), then
raw little-endian array payloads in manifest order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .tensor import Tensor

_MAGIC = b"DKMC"
_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(state, path: str):
    groups = {
        "params": state.params,
        "model_state": state.model_state,
        "opt_state": state.opt_state,
    }
    arrays = []
    payloads = []
    for group, tree in groups.items():
        for name in sorted(tree):
            arr = np.ascontiguousarray(tree[name].data)
            arr = arr.astype(arr.dtype.newbyteorder("<"))
            arrays.append({
                "group": group,
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
            })
            payloads.append(arr.tobytes())
    header = json.dumps({
        "step": state.step,
        "rng": [state.rng.hi, state.rng.lo],
        "arrays": arrays,
    }).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(header)))
        f.write(header)
        for p in payloads:
            f.write(p)


def load_checkpoint(path: str):
    from .rng import RngKey
    from .train import TrainState

    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    try:
        if raw[:4] != _MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        version, hlen = struct.unpack("<II", raw[4:12])
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(raw[12:12 + hlen])
        groups = {"params": {}, "model_state": {}, "opt_state": {}}
        offset = 12 + hlen
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            nbytes = dtype.itemsize * count
            buf = raw[offset:offset + nbytes]
            if len(buf) != nbytes:
                raise CheckpointError(f"{path}: truncated payload for {spec['name']}")
            arr = np.frombuffer(buf, dtype=dtype).reshape(spec["shape"]).copy()
            groups[spec["group"]][spec["name"]] = Tensor(arr)
            offset += nbytes
        return TrainState(
            step=int(header["step"]),
            params=groups["params"],
            model_state=groups["model_state"],
            opt_state=groups["opt_state"],
            rng=RngKey(header["rng"][0], header["rng"][1]),
        )
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
