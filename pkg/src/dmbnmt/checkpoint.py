"""Checkpoint files: a text manifest followed by raw little-endian arrays.

Layout::

    dmbnmt-checkpoint
    format_version = 1
    config.<field> = <value>        (one line per ModelConfig field)
    folded = 0|1
    tensor <name> <dtype> <d0,d1,...> <offset> <nbytes> [scale]
    ...
    end
    <array bytes in manifest order>

Offsets count from the first byte after the ``end`` line.  ``dtype`` is
``float32`` or ``int8``; int8 tensors carry a per-tensor scale.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, TransformerModel

MAGIC = "dmbnmt-checkpoint"
FORMAT_VERSION = 1
DTYPES = {"float32": np.dtype("<f4"), "int8": np.dtype("i1")}


class CheckpointError(ValueError):
    pass


@dataclass
class TensorEntry:
    name: str
    dtype: str
    shape: tuple
    offset: int
    nbytes: int
    scale: float | None = None


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    folded: bool = False
    scales: dict[str, float] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def manifest_key(self) -> tuple:
        return (self.config, self.folded,
                tuple((n, a.shape, str(a.dtype)) for n, a in self.tensors.items()))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_config(values: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name not in values:
            continue
        raw = values.pop(f.name)
        default = f.default
        if isinstance(default, bool):
            kwargs[f.name] = raw in ("1", "true", "True")
        elif isinstance(default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    if values:
        raise CheckpointError(f"unknown config keys in manifest: {sorted(values)}")
    return ModelConfig(**kwargs)


def from_model(model: TransformerModel) -> Checkpoint:
    tensors = {n: np.asarray(t.data, dtype=np.float32)
               for n, t in model.named_parameters().items()}
    return Checkpoint(model.cfg, tensors, model.folded)


def to_model(ckpt: Checkpoint) -> TransformerModel:
    model = TransformerModel(ckpt.config)
    if ckpt.folded:
        model.fold()
    params = model.named_parameters()
    if set(params) != set(ckpt.tensors):
        missing = sorted(set(params) - set(ckpt.tensors))[:5]
        extra = sorted(set(ckpt.tensors) - set(params))[:5]
        raise CheckpointError(f"tensor names do not match model: missing {missing}, extra {extra}")
    for name, t in params.items():
        arr = ckpt.tensors[name]
        if name in ckpt.scales:
            arr = dequantize(arr, ckpt.scales[name])
        if arr.shape != t.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {t.shape}")
        t.data[...] = arr
    return model


def dequantize(q: np.ndarray, scale: float) -> np.ndarray:
    return q.astype(np.float32) * np.float32(scale)


def write(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    lines = [MAGIC, f"format_version = {FORMAT_VERSION}"]
    for k, v in ckpt.config.to_dict().items():
        lines.append(f"config.{k} = {_format_value(v)}")
    lines.append(f"folded = {int(ckpt.folded)}")
    for k, v in ckpt.meta.items():
        lines.append(f"meta.{k} = {v}")
    blobs, offset = [], 0
    for name, arr in ckpt.tensors.items():
        dtype = "int8" if name in ckpt.scales else "float32"
        data = np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes()
        shape = ",".join(str(s) for s in arr.shape)
        line = f"tensor {name} {dtype} {shape} {offset} {len(data)}"
        if dtype == "int8":
            line += f" {ckpt.scales[name]!r}"
        lines.append(line)
        blobs.append(data)
        offset += len(data)
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            fh.write(b)


def read_manifest(fh) -> tuple[dict, list[TensorEntry], bool, dict]:
    first = fh.readline().decode("utf-8").strip()
    if first != MAGIC:
        raise CheckpointError(f"not a checkpoint (header {first!r})")
    cfg, meta, entries, folded, version = {}, {}, [], False, None
    for raw in iter(fh.readline, b""):
        line = raw.decode("utf-8").rstrip("\n")
        if line == "end":
            break
        if line.startswith("tensor "):
            parts = line.split()
            shape = tuple(int(s) for s in parts[3].split(",") if s)
            scale = float(parts[6]) if len(parts) > 6 else None
            entries.append(TensorEntry(parts[1], parts[2], shape, int(parts[4]),
                                       int(parts[5]), scale))
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if key == "format_version":
            version = int(value)
        elif key == "folded":
            folded = value == "1"
        elif key.startswith("config."):
            cfg[key[len("config."):]] = value
        elif key.startswith("meta."):
            meta[key[len("meta."):]] = value
        else:
            raise CheckpointError(f"unrecognized manifest line {line!r}")
    else:
        raise CheckpointError("manifest is not terminated by 'end'")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    return cfg, entries, folded, meta


def read(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        cfg, entries, folded, meta = read_manifest(fh)
        data = fh.read()
    tensors, scales = {}, {}
    for e in entries:
        if e.dtype not in DTYPES:
            raise CheckpointError(f"{e.name}: unknown dtype {e.dtype}")
        chunk = data[e.offset : e.offset + e.nbytes]
        if len(chunk) != e.nbytes:
            raise CheckpointError(f"{e.name}: truncated data")
        arr = np.frombuffer(chunk, dtype=DTYPES[e.dtype]).reshape(e.shape)
        tensors[e.name] = arr.astype(np.float32) if e.dtype == "float32" else arr.copy()
        if e.scale is not None:
            scales[e.name] = e.scale
    return Checkpoint(_parse_config(cfg), tensors, folded, scales, meta)


def save_model(model: TransformerModel, path, meta: dict | None = None) -> None:
    ckpt = from_model(model)
    ckpt.meta.update(meta or {})
    write(ckpt, path)


def load_model(path) -> TransformerModel:
    return to_model(read(path))
