"""Binary model checkpoint.

Layout (all integers and floats little-endian):

    bytes 0..7    magic ``b"SIHDMOD\\0"``
    bytes 8..11   format version, uint32 (currently 1)
    bytes 12..19  header length in bytes, uint64
    header        UTF-8 JSON: config hash, schedule kind, layer shapes,
                  guidance/exploration coefficients, and an array directory
                  of (name, shape, offset) entries
    payload       the directory's arrays, concatenated float64 little-endian

Array names: ``layer{h}/{param}`` for live weights, ``ema{h}/{param}`` for
EMA shadows, ``schedule/betas``, ``cond/vertices`` and per-height
``cond/h{h}/...`` conditioning tables.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .diffusion import (ConditioningTables, DiffusionStack, Normalizer,
                        VarianceSchedule)
from .network import Denoiser

MAGIC = b"SIHDMOD\0"
VERSION = 1


def _collect_arrays(stack: DiffusionStack) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {"schedule/betas": stack.schedule.betas}
    for h, net in stack.denoisers.items():
        for name, value in net.params.items():
            arrays[f"layer{h}/{name}"] = value
        shadow = stack.ema_params.get(h, net.params)
        for name, value in shadow.items():
            arrays[f"ema{h}/{name}"] = value
        norm = stack.normalizers.get(h) or Normalizer.identity(net.channels)
        arrays[f"norm{h}/mean"] = norm.mean
        arrays[f"norm{h}/std"] = norm.std
    t = stack.tables
    arrays["cond/vertices"] = t.vertices
    for h, comm in t.community_of.items():
        arrays[f"cond/h{h}/community_of"] = comm.astype(np.float64)
        node_ids = sorted(t.gains[h])
        arrays[f"cond/h{h}/node_ids"] = np.asarray(node_ids, dtype=np.float64)
        arrays[f"cond/h{h}/gains"] = np.asarray([t.gains[h][n] for n in node_ids])
    return arrays


def save_stack(stack: DiffusionStack, path, config_hash: str = ""):
    arrays = _collect_arrays(stack)
    directory = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8

    header = {
        "config_hash": config_hash,
        "state_dim": stack.state_dim,
        "action_dim": stack.action_dim,
        "r_max": stack.r_max,
        "guidance_weight": stack.guidance_weight,
        "explore_coef": stack.explore_coef,
        "blend": stack.blend,
        "trained": stack.trained,
        "pad_lengths": {str(h): l for h, l in stack.pad_lengths.items()},
        "layers": [{"layer": h, "seq_len": n.seq_len, "channels": n.channels,
                    "hidden": n.params["W2"].shape[0], "cond_dim": n.cond_dim,
                    "step_dim": n.step_dim}
                   for h, n in sorted(stack.denoisers.items())],
        "arrays": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_stack(path) -> tuple[DiffusionStack, str]:
    """Read a checkpoint; returns (stack, config_hash)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()

    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)

    schedule = VarianceSchedule(betas=arrays["schedule/betas"])
    denoisers: dict[int, Denoiser] = {}
    ema_params: dict[int, dict] = {}
    normalizers: dict[int, Normalizer] = {}
    for spec in header["layers"]:
        h = spec["layer"]
        net = Denoiser(layer=h, seq_len=spec["seq_len"], channels=spec["channels"],
                       hidden=spec["hidden"], cond_dim=spec["cond_dim"],
                       step_dim=spec["step_dim"])
        net.params = {name: arrays[f"layer{h}/{name}"].copy() for name in net.params}
        net.trained = header["trained"]
        denoisers[h] = net
        ema_params[h] = {name: arrays[f"ema{h}/{name}"].copy() for name in net.params}
        normalizers[h] = Normalizer(mean=arrays[f"norm{h}/mean"].copy(),
                                    std=arrays[f"norm{h}/std"].copy())

    community_of: dict[int, np.ndarray] = {}
    gains: dict[int, dict[int, float]] = {}
    for name in arrays:
        if name.startswith("cond/h") and name.endswith("community_of"):
            h = int(name.split("/")[1][1:])
            community_of[h] = arrays[name].astype(np.int64)
            node_ids = arrays[f"cond/h{h}/node_ids"].astype(np.int64)
            gvals = arrays[f"cond/h{h}/gains"]
            gains[h] = {int(n): float(g) for n, g in zip(node_ids, gvals)}
    tables = ConditioningTables(vertices=arrays["cond/vertices"],
                                community_of=community_of, gains=gains)

    stack = DiffusionStack(
        denoisers=denoisers, schedule=schedule,
        guidance_weight=header["guidance_weight"],
        explore_coef=header["explore_coef"],
        pad_lengths={int(h): int(l) for h, l in header["pad_lengths"].items()},
        state_dim=header["state_dim"], action_dim=header["action_dim"],
        r_max=header["r_max"], tables=tables, blend=header["blend"],
        ema_params=ema_params, normalizers=normalizers, trained=header["trained"])
    return stack, header["config_hash"]
