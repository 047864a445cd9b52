"""``.mckpt`` checkpoint files.

Layout::

    b"MCKPT001" | uint64 LE manifest length N | N bytes UTF-8 JSON | blobs

The manifest maps every stored array to ``{"shape": [...], "offset": k}``
where ``k`` is the byte offset into the blob section; all arrays are
little-endian float32.  Parameters are stored as ``param/<name>``,
batch-norm buffers as ``bn_mean/<layer>`` and ``bn_var/<layer>``, Adam
moments as ``adam_m/<name>`` and ``adam_v/<name>``.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, BatchNormStats
from .errors import ConfigError, FormatError
from .model import ModelParams, NetConfig

MAGIC = b"MCKPT001"


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    epoch: int
    net: NetConfig
    train_config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _arrays(ckpt):
    out = {}
    for name, arr in ckpt.params.weights.items():
        out[f"param/{name}"] = arr
    for name, stats in ckpt.params.bn.items():
        out[f"bn_mean/{name}"] = stats.mean
        out[f"bn_var/{name}"] = stats.var
    for name, arr in ckpt.adam.m.items():
        out[f"adam_m/{name}"] = arr
    for name, arr in ckpt.adam.v.items():
        out[f"adam_v/{name}"] = arr
    return out


def encode_checkpoint(ckpt):
    tensors, blobs, offset = {}, [], 0
    for name, arr in sorted(_arrays(ckpt).items()):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": "mckpt/1",
        "epoch": ckpt.epoch,
        "net_config": ckpt.net.to_json(),
        "arch_hash": ckpt.net.arch_hash(),
        "adam": {"t": ckpt.adam.t, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "train_config": ckpt.train_config,
        "history": ckpt.history,
        "meta": ckpt.meta,
        "tensors": tensors,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def save_checkpoint(ckpt, path):
    Path(path).write_bytes(encode_checkpoint(ckpt))


def decode_checkpoint(raw, expect=None):
    """Parse checkpoint bytes; ``expect`` (a NetConfig) rejects mismatched architectures."""
    pre = len(MAGIC) + 8
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic, expected MCKPT001", 0)
    (n,) = struct.unpack_from("<Q", raw, len(MAGIC))
    try:
        manifest = json.loads(raw[pre : pre + n].decode("utf-8"))
        net = NetConfig.from_json(manifest["net_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest: {exc}", pre) from exc
    if manifest.get("arch_hash") != net.arch_hash():
        raise FormatError("architecture hash does not match the stored config", pre)
    if expect is not None and expect.arch_hash() != net.arch_hash():
        raise ConfigError("net_config", "checkpoint was trained with a different architecture")
    base = pre + n
    arrays = {}
    for name, info in manifest["tensors"].items():
        shape = tuple(info["shape"])
        count = int(np.prod(shape))
        start = base + info["offset"]
        if start + 4 * count > len(raw):
            raise FormatError(f"tensor {name} runs past end of file", start)
        arrays[name] = np.frombuffer(raw, "<f4", count, start).reshape(shape).astype(np.float32)

    params = ModelParams()
    adam_info = manifest["adam"]
    adam = AdamState(t=adam_info["t"], beta1=adam_info["beta1"], beta2=adam_info["beta2"], eps=adam_info["eps"])
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        if kind == "param":
            params.weights[name] = arr
        elif kind == "bn_mean":
            params.bn.setdefault(name, BatchNormStats(arr.shape[0])).mean[:] = arr
        elif kind == "bn_var":
            params.bn.setdefault(name, BatchNormStats(arr.shape[0])).var[:] = arr
        elif kind == "adam_m":
            adam.m[name] = arr
        elif kind == "adam_v":
            adam.v[name] = arr
    return Checkpoint(
        params=params,
        adam=adam,
        epoch=manifest["epoch"],
        net=net,
        train_config=manifest.get("train_config", {}),
        history=manifest.get("history", []),
        meta=manifest.get("meta", {}),
    )


def load_checkpoint(path, expect=None):
    return decode_checkpoint(Path(path).read_bytes(), expect)
