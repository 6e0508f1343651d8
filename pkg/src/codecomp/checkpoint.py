"""Versioned checkpoint archives: named parameter blobs + a JSON header.

A checkpoint is a zip containing one .npy blob per tensor (model
parameters, optimizer moments, rng states) and a header with architecture
hyperparameters and a sha256 per blob. Round-trips are bit-exact.
"""

import hashlib
import io
import json
import os
import zipfile

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _tensor_to_bytes(t):
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
    return buf.getvalue()


def _tensor_from_bytes(data):
    return torch.from_numpy(np.load(io.BytesIO(data), allow_pickle=False))


def save_checkpoint(path, model, optimizer=None, step=0, extra=None,
                    rng_states=None):
    """Atomically write a checkpoint archive (write-temp-then-rename)."""
    blobs = {}
    for name, tensor in model.state_dict().items():
        blobs["params/" + name] = _tensor_to_bytes(tensor)

    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        opt_meta = {"param_groups": sd["param_groups"], "state_keys": {}}
        for idx, state in sd["state"].items():
            keys = []
            for key, value in state.items():
                if isinstance(value, torch.Tensor):
                    blobs["opt/%s/%s" % (idx, key)] = _tensor_to_bytes(value)
                    keys.append([key, "tensor"])
                else:
                    keys.append([key, value])
            opt_meta["state_keys"][str(idx)] = keys

    if rng_states:
        for name, data in rng_states.items():
            blobs["rng/" + name] = data

    header = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "extra": extra or {},
        "optimizer": opt_meta,
        "checksums": {name: hashlib.sha256(data).hexdigest()
                      for name, data in blobs.items()},
    }

    tmp = path + ".tmp"
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=1, sort_keys=True))
        for name, data in sorted(blobs.items()):
            zf.writestr(name, data)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read and verify a checkpoint archive.

    Returns (header, blobs) where blobs maps entry name -> raw bytes;
    use restore_model / restore_optimizer to apply them.
    """
    try:
        with zipfile.ZipFile(path, "r") as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(
                    "unsupported checkpoint format_version %r"
                    % header.get("format_version"))
            blobs = {}
            for name, digest in header["checksums"].items():
                data = zf.read(name)
                if hashlib.sha256(data).hexdigest() != digest:
                    raise CheckpointError("checksum mismatch for %r" % name)
                blobs[name] = data
    except (zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError("corrupt checkpoint %s: %s" % (path, exc))
    return header, blobs


def restore_model(model, blobs):
    state = {}
    for name, data in blobs.items():
        if name.startswith("params/"):
            state[name[len("params/"):]] = _tensor_from_bytes(data)
    model.load_state_dict(state)


def restore_optimizer(optimizer, header, blobs):
    meta = header["optimizer"]
    if meta is None:
        raise CheckpointError("checkpoint has no optimizer state")
    state = {}
    for idx_str, keys in meta["state_keys"].items():
        idx = int(idx_str)
        entry = {}
        for key, value in keys:
            if value == "tensor":
                entry[key] = _tensor_from_bytes(blobs["opt/%s/%s" % (idx, key)])
            else:
                entry[key] = value
        state[idx] = entry
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def rng_state_blobs(torch_state, data_rng):
    """Serialize rng states: torch generator bytes + numpy bit generator JSON."""
    return {
        "torch.bin": bytes(torch_state.numpy().tobytes()),
        "data.json": json.dumps(data_rng.bit_generator.state).encode("utf-8"),
    }


def restore_rng_states(blobs):
    torch_state = None
    data_state = None
    if "rng/torch.bin" in blobs:
        torch_state = torch.from_numpy(
            np.frombuffer(blobs["rng/torch.bin"], dtype=np.uint8).copy())
    if "rng/data.json" in blobs:
        data_state = json.loads(blobs["rng/data.json"].decode("utf-8"))
    return torch_state, data_state
