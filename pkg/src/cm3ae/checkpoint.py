"""CMCK named-tensor checkpoints.

Layout (little-endian): magic ``b"CMCK"``, u32 version (1), then entries
until end of file. Each entry is a u32 name length, the UTF-8 name, a u32
rank, ``rank`` u32 dimensions, and the float32 data in C order.

Model parameters are stored under ``model/``, AdamW moments under
``optim/``, and bookkeeping (step, config digest, generator state) under
``meta/``; byte strings are stored one byte per float32 value.
"""
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .exceptions import FormatError
from .model import PARAMETER_GROUPS

CMCK_MAGIC = b"CMCK"
CMCK_VERSION = 1
_U32 = struct.Struct("<I")


def write_tensors(path, tensors):
    """Write an ordered mapping ``name -> array`` as a CMCK file."""
    with open(path, "wb") as f:
        f.write(CMCK_MAGIC)
        f.write(_U32.pack(CMCK_VERSION))
        for name, value in tensors.items():
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            arr = np.asarray(value, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(_U32.pack(len(raw)))
            f.write(raw)
            f.write(_U32.pack(arr.ndim))
            for d in arr.shape:
                f.write(_U32.pack(d))
            f.write(arr.tobytes())


def read_tensors(path):
    """Read a CMCK file into an ordered dict of float32 arrays."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError("file shorter than the CMCK header", len(data))
    if data[:4] != CMCK_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {CMCK_MAGIC!r}", 0)
    (version,) = _U32.unpack_from(data, 4)
    if version != CMCK_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos, out = 8, {}

    def need(n):
        if pos + n > len(data):
            raise FormatError(f"truncated entry: need {n} bytes, {len(data) - pos} left", pos)

    while pos < len(data):
        need(4)
        (n,) = _U32.unpack_from(data, pos)
        pos += 4
        need(n)
        try:
            name = data[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8", pos) from None
        pos += n
        need(4)
        (rank,) = _U32.unpack_from(data, pos)
        pos += 4
        need(4 * rank)
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64)) * 4
        need(size)
        out[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
        pos += size
    return out


def bytes_to_array(blob):
    return np.frombuffer(blob, dtype=np.uint8).astype(np.float32)


def array_to_bytes(arr):
    return np.asarray(arr).astype(np.uint8).tobytes()


def _param_group(name):
    return PARAMETER_GROUPS[name.split(".")[0]]


def save_checkpoint(path, model, optimizer=None, step=0, rng=None, extra=None):
    """Serialize model parameters, AdamW state, and training bookkeeping.

    ``extra`` is a JSON-serializable dict stored verbatim (e.g. the
    training configuration).
    """
    tensors = {}
    names = {}
    for name, p in model.named_parameters():
        tensors[f"model/{name}"] = p
        names[p] = name
    if optimizer is not None:
        for p, state in optimizer.state.items():
            name = names[p]
            for key in ("exp_avg", "exp_avg_sq"):
                tensors[f"optim/{name}/{key}"] = state[key]
            tensors[f"optim/{name}/step"] = np.asarray([float(state["step"])])
    tensors["meta/step"] = np.asarray([step])
    tensors["meta/config_digest"] = bytes_to_array(model.config.digest())
    tensors["meta/model_config"] = bytes_to_array(json.dumps(model.config.to_dict()).encode())
    if rng is not None:
        tensors["meta/rng_state"] = bytes_to_array(json.dumps(rng.bit_generator.state).encode())
    if extra is not None:
        tensors["meta/extra"] = bytes_to_array(json.dumps(extra).encode())
    write_tensors(path, tensors)


class CheckpointMismatch(ValueError):
    """Checkpoint tensors do not fit the instantiated model."""

    def __init__(self, problems):
        super().__init__("checkpoint does not match model:\n  " + "\n  ".join(problems))
        self.problems = problems


def load_checkpoint(path, model, optimizer=None, rng=None, groups=None):
    """Load a CMCK file into ``model`` (and optionally optimizer / generator).

    Parameters
    ----------
    groups : iterable of str, optional
        Restrict loading to these parameter groups (e.g. ``{"fusion"}``);
        everything else in the model is left untouched.

    Returns
    -------
    dict with ``step``, ``config_digest``, ``model_config`` and ``extra``.

    Raises
    ------
    CheckpointMismatch
        Listing every missing, unexpected or mis-shaped parameter.
    """
    tensors = read_tensors(path)
    params = dict(model.named_parameters())
    wanted = {n for n in params if groups is None or _param_group(n) in groups}
    stored = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    problems = []
    for name in sorted(wanted):
        if name not in stored:
            problems.append(f"missing parameter {name}")
        elif tuple(stored[name].shape) != tuple(params[name].shape):
            problems.append(
                f"shape mismatch for {name}: checkpoint {tuple(stored[name].shape)} "
                f"vs model {tuple(params[name].shape)}"
            )
    if groups is None:
        problems.extend(f"unexpected parameter {n}" for n in sorted(set(stored) - set(params)))
    if problems:
        raise CheckpointMismatch(problems)

    with torch.no_grad():
        for name in wanted:
            params[name].copy_(torch.from_numpy(stored[name]))

    if optimizer is not None:
        for name in wanted:
            key = f"optim/{name}/exp_avg"
            if key not in tensors:
                continue
            p = params[name]
            optimizer.state[p] = {
                "step": torch.tensor(float(tensors[f"optim/{name}/step"][0])),
                "exp_avg": torch.from_numpy(tensors[key]).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(tensors[f"optim/{name}/exp_avg_sq"]).to(p.dtype),
            }
    if rng is not None and "meta/rng_state" in tensors:
        rng.bit_generator.state = json.loads(array_to_bytes(tensors["meta/rng_state"]))

    info = {"step": int(tensors["meta/step"][0]) if "meta/step" in tensors else 0}
    if "meta/config_digest" in tensors:
        info["config_digest"] = array_to_bytes(tensors["meta/config_digest"])
    if "meta/model_config" in tensors:
        info["model_config"] = json.loads(array_to_bytes(tensors["meta/model_config"]))
    if "meta/extra" in tensors:
        info["extra"] = json.loads(array_to_bytes(tensors["meta/extra"]))
    return info


def read_model_config(path):
    """The ``ModelConfig`` a checkpoint was saved from."""
    from .config import ModelConfig

    tensors = read_tensors(path)
    if "meta/model_config" not in tensors:
        raise FormatError("checkpoint has no model configuration entry")
    return ModelConfig.from_dict(json.loads(array_to_bytes(tensors["meta/model_config"])))


def parameter_checksums(model, groups=None):
    """SHA-256 over the raw bytes of each parameter group, keyed by group name."""
    hashes = {}
    for name, p in model.named_parameters():
        g = _param_group(name)
        if groups is not None and g not in groups:
            continue
        h = hashes.setdefault(g, hashlib.sha256())
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return {g: h.hexdigest() for g, h in hashes.items()}
