"""RFCK checkpoint files.

Layout: ``b"RFCK"``, u32 version, u32 header length, UTF-8 JSON header,
little-endian float32 parameter payload in manifest order, then the
optimizer moments (exp_avg, exp_avg_sq per parameter) in the same order.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from renderflow.errors import CorruptFileError, UnsupportedConfigurationError
from renderflow.model import NetConfig, RenderNet

MAGIC = b"RFCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    net_config: NetConfig
    params: dict
    stage: str = "base"
    step: int = 0
    train_config: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def build_net(self, dtype=torch.float32) -> RenderNet:
        if self.stage == "inverse":
            raise UnsupportedConfigurationError(
                "inverse checkpoints hold adapter weights only; load them with renderflow.inverse.load_inverse")
        net = RenderNet(self.net_config)
        load_params(net, self.params)
        return net.to(dtype)

    def params_hash(self) -> str:
        return params_hash(self.params)

    def groups(self) -> dict:
        out = {}
        for name in self.params:
            group = "inverse_adapter" if self.stage == "inverse" else RenderNet.group_of(name)
            out.setdefault(group, []).append(name)
        return out


def state_arrays(module: torch.nn.Module) -> dict:
    return {name: p.detach().cpu().numpy().astype(np.float32, copy=True) for name, p in module.named_parameters()}


def load_params(module: torch.nn.Module, params: dict, strict: bool = True):
    named = dict(module.named_parameters())
    missing = set(named) - set(params)
    if strict and missing:
        raise CorruptFileError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, arr in params.items():
            if name not in named:
                raise CorruptFileError(f"checkpoint has unknown parameter {name!r}")
            if tuple(named[name].shape) != tuple(arr.shape):
                raise CorruptFileError(f"shape mismatch for {name}: {arr.shape} vs {tuple(named[name].shape)}")
            named[name].copy_(torch.from_numpy(np.asarray(arr, dtype=np.float32)))


def params_hash(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def optimizer_arrays(opt: torch.optim.Optimizer, named: dict) -> dict:
    by_id = {id(p): n for n, p in named.items()}
    out = {}
    for p, st in opt.state.items():
        if not st:
            continue
        out[by_id[id(p)]] = {
            "step": float(st["step"]),
            "exp_avg": st["exp_avg"].detach().numpy().astype(np.float32, copy=True),
            "exp_avg_sq": st["exp_avg_sq"].detach().numpy().astype(np.float32, copy=True),
        }
    return out


def restore_optimizer(opt: torch.optim.Optimizer, named: dict, state: dict):
    for name, st in state.items():
        p = named[name]
        opt.state[p] = {
            "step": torch.tensor(float(st["step"])),
            "exp_avg": torch.from_numpy(np.array(st["exp_avg"], dtype=np.float32)),
            "exp_avg_sq": torch.from_numpy(np.array(st["exp_avg_sq"], dtype=np.float32)),
        }


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write ``ckpt``; returns the sha256 of the written file."""
    names = list(ckpt.params)
    manifest, offset = [], 0
    for name in names:
        arr = ckpt.params[name]
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    opt_manifest = [{"name": n, "step": ckpt.optimizer[n]["step"]} for n in names if n in ckpt.optimizer]
    header = {
        "net_config": ckpt.net_config.to_dict(),
        "train_config": ckpt.train_config,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "manifest": manifest,
        "optimizer": opt_manifest,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_PREFIX.pack(MAGIC, VERSION, len(hbytes)), hbytes]
    chunks += [np.ascontiguousarray(ckpt.params[n], dtype="<f4").tobytes() for n in names]
    for entry in opt_manifest:
        st = ckpt.optimizer[entry["name"]]
        chunks.append(np.ascontiguousarray(st["exp_avg"], dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(st["exp_avg_sq"], dtype="<f4").tobytes())
    blob = b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREFIX.size:
        raise CorruptFileError(f"{path}: truncated")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(data[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header") from exc
    base = _PREFIX.size + hlen
    params = {}
    end = base
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        start = base + entry["offset"]
        if start + 4 * n > len(data):
            raise CorruptFileError(f"{path}: truncated parameter payload")
        params[entry["name"]] = np.frombuffer(data, "<f4", n, start).reshape(shape).astype(np.float32)
        end = max(end, start + 4 * n)
    optimizer = {}
    off = end
    for entry in header["optimizer"]:
        shape = params[entry["name"]].shape
        n = int(np.prod(shape))
        if off + 8 * n > len(data):
            raise CorruptFileError(f"{path}: truncated optimizer payload")
        m = np.frombuffer(data, "<f4", n, off).reshape(shape).astype(np.float32)
        v = np.frombuffer(data, "<f4", n, off + 4 * n).reshape(shape).astype(np.float32)
        optimizer[entry["name"]] = {"step": entry["step"], "exp_avg": m, "exp_avg_sq": v}
        off += 8 * n
    return Checkpoint(
        net_config=NetConfig(**header["net_config"]),
        params=params,
        stage=header["stage"],
        step=int(header["step"]),
        train_config=header["train_config"],
        optimizer=optimizer,
        rng_state=header.get("rng_state"),
        extra=header.get("extra", {}),
    )


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
