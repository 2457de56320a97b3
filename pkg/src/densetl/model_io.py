"""Binary model container (``.dgm``).

Layout, all integers little-endian::

    b"DGM1" | u32 version (=1) | u64 header_len | header (UTF-8 JSON)
    | tensors as raw float32, in header order | u32 CRC32(header + tensors)

The header lists every tensor (name, shape, trainable flag), the build
configuration and seed, and free-form metadata. Model tensors come first
(parameters and batch-norm running statistics, leaf by leaf); an optional
optimizer section follows so a run can resume exactly.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .densenet import DenseNetConfig, HeadConfig, Model, build_backbone, build_model, config_to_dict
from .optim import Optimizer, OptimizerHyper, OptimizerState, init_state

MAGIC = b"DGM1"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_CRC = struct.Struct("<I")


class ModelFormatError(Exception):
    code = "bad_format"


class BadMagicError(ModelFormatError):
    code = "bad_magic"


class VersionMismatchError(ModelFormatError):
    code = "version_mismatch"


class TruncatedPayloadError(ModelFormatError):
    code = "truncated_payload"


class ChecksumError(ModelFormatError):
    code = "checksum_mismatch"


@dataclass
class Checkpoint:
    model: Model
    optimizer_hyper: Optional[OptimizerHyper] = None
    optimizer_state: Optional[OptimizerState] = None

    @property
    def metadata(self) -> dict:
        return self.model.metadata


def _header(model: Model, optimizer: Optional[Optimizer]) -> tuple[dict, list[np.ndarray]]:
    tensors, arrays = [], []
    for name, arr, trainable in model.state_arrays():
        tensors.append({"name": name, "shape": list(arr.shape), "trainable": trainable})
        arrays.append(arr)
    header = {
        "config": config_to_dict(model.config),
        "head": None if model.head is None else asdict(model.head),
        "seed": model.seed,
        "class_names": model.class_names,
        "backbone_len": model.backbone_len,
        "layer_trainable": [layer.trainable for layer in model.layers],
        "leaf_trainable": {name: leaf.trainable for name, leaf in model.leaves()},
        "trace": model.trace,
        "layers": model.describe(),
        "tensors": tensors,
        "metadata": model.metadata,
        "optimizer": None,
    }
    if optimizer is not None:
        opt_tensors = []
        for buf, by_name in optimizer.state.buffers.items():
            for name, arr in by_name.items():
                opt_tensors.append({"buffer": buf, "name": name, "shape": list(arr.shape)})
                arrays.append(arr)
        header["optimizer"] = {
            "hyper": optimizer.hyper.to_dict(),
            "t": optimizer.state.t,
            "tensors": opt_tensors,
        }
    return header, arrays


def save_model(model: Model, path, optimizer: Optional[Optimizer] = None) -> Path:
    header, arrays = _header(model, optimizer)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = hbytes + b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(payload)
        fh.write(_CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF))
    return path


def _expected_elements(header: dict) -> int:
    total = sum(math.prod(t["shape"]) for t in header["tensors"])
    if header.get("optimizer"):
        total += sum(math.prod(t["shape"]) for t in header["optimizer"]["tensors"])
    return total


def read_header(path) -> dict:
    """Parse and validate a container, returning its header without building the model."""
    return _read(path)[0]


def _read(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC) and not (len(raw) < 4 and MAGIC.startswith(raw) and raw):
        raise BadMagicError(f"{path}: not a model file (bad magic bytes)")
    if len(raw) < _PREAMBLE.size:
        raise TruncatedPayloadError(f"{path}: file ends inside the preamble")
    _, version, hlen = _PREAMBLE.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, expected {VERSION}")
    body_end = len(raw) - _CRC.size
    if _PREAMBLE.size + hlen > body_end:
        raise TruncatedPayloadError(f"{path}: file ends inside the header")
    payload = raw[_PREAMBLE.size:body_end]
    crc_ok = zlib.crc32(payload) & 0xFFFFFFFF == _CRC.unpack_from(raw, body_end)[0]
    try:
        header = json.loads(payload[:hlen].decode("utf-8"))
        expected = _expected_elements(header) * 4
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        if not crc_ok:
            raise ChecksumError(f"{path}: checksum mismatch") from None
        raise ModelFormatError(f"{path}: malformed header ({exc})") from None
    have = len(payload) - hlen
    if have < expected:
        raise TruncatedPayloadError(f"{path}: payload holds {have} of {expected} tensor bytes")
    if have > expected:
        raise ModelFormatError(f"{path}: {have - expected} unexpected trailing bytes")
    if not crc_ok:
        raise ChecksumError(f"{path}: checksum mismatch")
    return header, payload[hlen:]


def load_checkpoint(path) -> Checkpoint:
    header, blob = _read(path)
    config = DenseNetConfig(**header["config"])
    if header["head"] is None:
        model = build_backbone(config, seed=header["seed"])
    else:
        model = build_model(config, HeadConfig(**header["head"]), header["seed"], header["class_names"])
    model.metadata = header["metadata"]

    offset = 0

    def take(shape) -> np.ndarray:
        nonlocal offset
        n = math.prod(shape) * 4
        arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=offset).astype(np.float32)
        offset += n
        return arr.reshape(shape)

    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    declared = [t["name"] for t in header["tensors"]]
    if declared != [name for name, _, _ in model.state_arrays()]:
        raise ModelFormatError(f"{path}: tensor list does not match the declared architecture")
    for entry in header["tensors"]:
        arr = take(entry["shape"])
        name = entry["name"]
        if name in params:
            if params[name].shape != arr.shape:
                raise ModelFormatError(f"{path}: {name} has shape {arr.shape}, expected {params[name].shape}")
            params[name].data = arr
            params[name].requires_grad = bool(entry["trainable"])
        else:
            buffers[name][...] = arr

    for name, leaf in model.leaves():
        leaf.trainable = bool(header["leaf_trainable"][name])
    for layer, flag in zip(model.layers, header["layer_trainable"]):
        layer.trainable = bool(flag)

    ckpt = Checkpoint(model)
    opt = header.get("optimizer")
    if opt:
        hyper = OptimizerHyper(**opt["hyper"])
        state = OptimizerState(hyper.kind, t=int(opt["t"]))
        for entry in opt["tensors"]:
            state.buffers.setdefault(entry["buffer"], {})[entry["name"]] = take(entry["shape"]).copy()
        ckpt.optimizer_hyper, ckpt.optimizer_state = hyper, state
    return ckpt


def load_model(path) -> Model:
    return load_checkpoint(path).model


def restore_optimizer(ckpt: Checkpoint, params) -> Optimizer:
    """Rebuild an :class:`Optimizer` over ``params`` from a checkpoint's saved state."""
    if ckpt.optimizer_hyper is None:
        raise ModelFormatError("checkpoint carries no optimizer state")
    opt = Optimizer(params, ckpt.optimizer_hyper)
    fresh = init_state(opt.params, ckpt.optimizer_hyper)
    for buf, by_name in fresh.buffers.items():
        saved = ckpt.optimizer_state.buffers.get(buf, {})
        if set(saved) != set(by_name):
            raise ModelFormatError("optimizer state does not match the trainable parameter set")
    opt.state = ckpt.optimizer_state
    return opt
