"""Checkpoint files.

Layout::

    b"DDPCKPT1\\n"
    uint64 little-endian header length
    UTF-8 JSON header: cfg, seed, meta, and a list of
        {name, group, shape, dtype, offset} entries
    raw little-endian float32 payloads, in header order

``offset`` is relative to the start of the payload section. The header is
written with sorted keys and no timestamps, so identical state gives
identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LoadError
from .models import Graph, ModelConfig, build_model

MAGIC = b"DDPCKPT1\n"


@dataclass
class Checkpoint:
    cfg: ModelConfig
    seed: int
    tensors: dict[str, np.ndarray]
    groups: dict[str, str]
    meta: dict = field(default_factory=dict)

    def group(self, name: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if self.groups[k] == name}


def write_checkpoint(path: str | os.PathLike, graph: Graph, optimizer=None, meta: dict | None = None) -> None:
    tensors: list[tuple[str, str, np.ndarray]] = []
    tensors += [(k, "param", t.data) for k, t in graph.params.items()]
    tensors += [(k, "buffer", t.data) for k, t in graph.buffers.items()]
    meta = dict(meta or {})
    if optimizer is not None:
        tensors += [(f"adam.m.{k}", "adam_m", a) for k, a in optimizer.m.items()]
        tensors += [(f"adam.v.{k}", "adam_v", a) for k, a in optimizer.v.items()]
        meta["adam"] = optimizer.hyper()
    entries, payload, offset = [], [], 0
    for name, group, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "group": group, "shape": list(arr.shape),
                        "dtype": "F32", "offset": offset})
        payload.append(raw)
        offset += len(raw)
    header = {"format": 1, "cfg": graph.cfg.to_dict(), "seed": graph.seed,
              "meta": meta, "tensors": entries}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in payload:
            fh.write(raw)
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise LoadError(f"{path} is not a checkpoint")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except ValueError as exc:
        raise LoadError(f"{path}: bad header") from exc
    base = pos + hlen
    tensors, groups = {}, {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + 4 * n > len(blob):
            raise LoadError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start)
        tensors[e["name"]] = arr.astype(np.float32).reshape(e["shape"])
        groups[e["name"]] = e["group"]
    cfg = ModelConfig(**header["cfg"])
    return Checkpoint(cfg, header["seed"], tensors, groups, header.get("meta", {}))


def load_graph(path: str | os.PathLike, arch: str | None = None) -> Graph:
    ckpt = read_checkpoint(path)
    if arch is not None and ckpt.cfg.arch != arch:
        raise LoadError(f"{path} holds a {ckpt.cfg.arch} model, not {arch}")
    g = build_model(ckpt.cfg, ckpt.seed)
    try:
        g.load_arrays(ckpt.tensors)
    except (KeyError, ValueError) as exc:
        raise LoadError(f"{path}: {exc}") from exc
    return g
