"""Versioned little-endian binary checkpoints.

Layout::

    b"CRVAECKP" | u32 version | u32 len | config JSON | u32 epoch | u32 n_arrays
    n_arrays x ( u16 len | name | u8 dtype | u8 ndim | ndim x u32 | data )

``dtype`` is 1 for float32 (model parameters and buffers) and 2 for float64
(optimizer, scheduler and RNG state, counters, histories). Integer state is
stored as float64, which is exact for everything saved here.
"""

import dataclasses
import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import AugmentationSpec
from .exceptions import CheckpointError, ConfigurationError
from .model import Architecture

MAGIC = b"CRVAECKP"
VERSION = 1
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    arrays: dict = field(default_factory=dict)
    version: int = VERSION


def _jsonable(value):
    if dataclasses.is_dataclass(value):
        return {"__type__": type(value).__name__, **dataclasses.asdict(value)}
    return value


def _from_jsonable(value):
    if isinstance(value, dict) and "__type__" in value:
        value = dict(value)
        kind = value.pop("__type__")
        cls = {"AugmentationSpec": AugmentationSpec, "Architecture": Architecture}[kind]
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
    return value


def to_bytes(ckpt):
    out = io.BytesIO()
    config = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode()
    out.write(MAGIC)
    out.write(struct.pack("<II", ckpt.version, len(config)))
    out.write(config)
    out.write(struct.pack("<II", ckpt.epoch, len(ckpt.arrays)))
    for name, array in ckpt.arrays.items():
        array = np.asarray(array)
        code = 1 if array.dtype == np.float32 else 2
        data = np.asarray(array, dtype=_CODES[code]).copy(order="C")
        encoded = name.encode()
        out.write(struct.pack("<H", len(encoded)) + encoded)
        out.write(struct.pack("<BB", code, data.ndim))
        out.write(struct.pack(f"<{data.ndim}I", *data.shape))
        out.write(data.tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"checkpoint truncated reading {what} at byte {self.pos} "
                f"(need {n}, have {len(self.buf) - self.pos})"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf):
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, config_len = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    try:
        config = json.loads(r.take(config_len, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint config: {exc}") from exc
    epoch, n_arrays = r.unpack("<II", "array count")
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = r.unpack("<H", "array name length")
        name = r.take(name_len, "array name").decode()
        code, ndim = r.unpack("<BB", f"header of {name}")
        if code not in _CODES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        dtype = _CODES[code]
        count = int(np.prod(shape, dtype=np.int64))
        data = r.take(count * dtype.itemsize, f"data of {name}")
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} unexpected trailing bytes in checkpoint")
    return Checkpoint(config, epoch, arrays, version)


def save_checkpoint(ckpt, path):
    """Write atomically (temp file + rename)."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(to_bytes(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect=None):
    """Read a checkpoint; ``expect`` maps model keys to required values."""
    with open(path, "rb") as f:
        ckpt = from_bytes(f.read())
    if expect:
        model = ckpt.config.get("model", {})
        for key, want in expect.items():
            have = model.get(key)
            if isinstance(have, list):
                have = tuple(have)
            if have != want:
                raise ConfigurationError(
                    f"checkpoint {path} has {key}={have!r}, configuration expects {want!r}"
                )
    return ckpt


# -- estimator <-> checkpoint -------------------------------------------------


def _module_arrays(prefix, module):
    out = {}
    for name, tensor in module.state_dict().items():
        array = tensor.detach().cpu().numpy()
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        out[f"{prefix}/{name}"] = array
    return out


def _load_module(prefix, module, arrays):
    state = {}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks {key}")
        value = arrays[key]
        if value.shape != tuple(tensor.shape):
            raise CheckpointError(f"{key}: shape {value.shape} != model {tuple(tensor.shape)}")
        state[name] = torch.from_numpy(np.array(value)).to(tensor.dtype)
    module.load_state_dict(state)


def _model_params(model):
    params = {k: _jsonable(v) for k, v in model.get_params().items()}
    params["input_shape"] = list(model.input_shape_)
    return params


def checkpoint_from_model(model, run_config=None):
    """Snapshot every piece of training state of a fitted :class:`CRVAE`."""
    arrays = {}
    arrays.update(_module_arrays("encoder", model.encoder_))
    arrays.update(_module_arrays("decoder", model.decoder_))
    if model.key_encoder_ is not None:
        arrays.update(_module_arrays("key_encoder", model.key_encoder_))
    params = list(model.encoder_.parameters()) + list(model.decoder_.parameters())
    for i, p in enumerate(params):
        for key, value in sorted(model.optimizer_.state.get(p, {}).items()):
            arrays[f"optimizer/{i}/{key}"] = torch.as_tensor(value).double().numpy()
    arrays["optimizer/lr"] = np.array([g["lr"] for g in model.optimizer_.param_groups])
    sched = model.scheduler_
    arrays["scheduler/state"] = np.array(
        [sched.best, sched.num_bad_epochs, sched.last_epoch, sched.cooldown_counter],
        dtype=np.float64,
    )
    arrays["rng/main"] = model.generator_.get_state().numpy().astype(np.float64)
    arrays["rng/key"] = model.key_generator_.get_state().numpy().astype(np.float64)
    arrays["meta/counters"] = np.array([model.n_epochs_, model.n_steps_], dtype=np.float64)
    arrays["history/epoch_loss"] = np.array(model.loss_history_, dtype=np.float64)
    arrays["history/steps"] = np.array(model.step_log_, dtype=np.float64).reshape(-1, 2)
    config = {"model": _model_params(model), "run": run_config or {}}
    return Checkpoint(config, model.n_epochs_, arrays)


def model_from_checkpoint(ckpt):
    """Rebuild a :class:`CRVAE` that continues exactly where the snapshot stopped."""
    from .estimator import CRVAE

    params = {k: _from_jsonable(v) for k, v in ckpt.config["model"].items()}
    input_shape = tuple(params.pop("input_shape"))
    model = CRVAE(**params)
    model._initialize(input_shape)
    arrays = ckpt.arrays
    _load_module("encoder", model.encoder_, arrays)
    _load_module("decoder", model.decoder_, arrays)
    if model.key_encoder_ is not None:
        _load_module("key_encoder", model.key_encoder_, arrays)
    params = list(model.encoder_.parameters()) + list(model.decoder_.parameters())
    for name, value in arrays.items():
        if not name.startswith("optimizer/") or name == "optimizer/lr":
            continue
        _, index, key = name.split("/", 2)
        p = params[int(index)]
        dtype = torch.float32 if key == "step" else p.dtype
        model.optimizer_.state[p][key] = torch.from_numpy(np.array(value)).to(dtype)
    for group, lr in zip(model.optimizer_.param_groups, arrays["optimizer/lr"]):
        group["lr"] = float(lr)
    best, bad, last, cooldown = arrays["scheduler/state"]
    sched = model.scheduler_
    sched.best, sched.num_bad_epochs = float(best), int(bad)
    sched.last_epoch, sched.cooldown_counter = int(last), int(cooldown)
    sched._last_lr = [g["lr"] for g in model.optimizer_.param_groups]
    model.generator_.set_state(torch.from_numpy(arrays["rng/main"].astype(np.uint8)))
    model.key_generator_.set_state(torch.from_numpy(arrays["rng/key"].astype(np.uint8)))
    model.n_epochs_, model.n_steps_ = (int(v) for v in arrays["meta/counters"])
    model.loss_history_ = arrays["history/epoch_loss"].tolist()
    model.step_log_ = [tuple(row) for row in arrays["history/steps"].tolist()]
    return model
