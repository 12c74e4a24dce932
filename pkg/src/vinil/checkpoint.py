"""Binary checkpoints of model parameters and strategy state.

Layout (little endian)::

    b"VINIL1\\0"
    u32 entry count
    per entry: u32 name length, UTF-8 name, u32 rank, u32 dims[rank],
               float64 payload[prod(dims)]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .models import EncoderConfig, ModelState, init_model
from .strategies import EwCState, MemoryBuffer
from .tensor import Tensor

MAGIC = b"VINIL1\0"


class CheckpointError(ValueError):
    pass


def _entries(model: ModelState, strategy_state=None, extra=None) -> list[tuple[str, np.ndarray]]:
    out = [(name, p.values) for name, p in model.params.items()]
    ewc = buffer = None
    if isinstance(strategy_state, EwCState):
        ewc = strategy_state
    elif isinstance(strategy_state, MemoryBuffer):
        buffer = strategy_state
    if ewc is not None and ewc.anchored:
        out += [(f"ewc.theta_prev.{k}", v) for k, v in ewc.theta_prev.items()]
        out += [(f"ewc.importance.{k}", v) for k, v in ewc.importance.items()]
    if buffer is not None and len(buffer):
        out.append(("replay.images", np.stack(buffer.images)))
        out.append(("replay.task_ids", np.array(buffer.task_ids, dtype=np.float64)))
        if buffer.labels is not None:
            out.append(("replay.labels", np.array(buffer.labels, dtype=np.float64)))
    for k, v in (extra or {}).items():
        out.append((f"meta.{k}", np.asarray(v, dtype=np.float64)))
    return out


def encode_checkpoint(entries: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: ModelState, strategy_state, path, extra: dict | None = None) -> Path:
    """Write model parameters plus EwC anchor / replay memory to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(_entries(model, strategy_state, extra)))
    return path


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{source}: truncated while reading {what} at offset {pos} "
                                  f"(need {n} bytes, have {len(data) - pos})")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    magic = take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r} at offset 0")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"entry {i} name length"))
        at = pos
        try:
            name = take(nlen, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{source}: entry {i} name is not UTF-8 at offset {at}") from exc
        if name in out:
            raise CheckpointError(f"{source}: duplicate entry {name!r} at offset {at}")
        (rank,) = struct.unpack("<I", take(4, f"{name!r} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name!r} dims"))
        n = int(np.prod(dims)) if rank else 1
        payload = take(8 * n, f"{name!r} payload")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - pos} trailing bytes at offset {pos}")
    return out


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def restore_model(config: EncoderConfig, arrays: dict[str, np.ndarray]) -> ModelState:
    """Rebuild a model for ``config`` and fill it from checkpoint arrays."""
    model = init_model(config, 0)
    for name, p in model.params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"parameter {name!r}: checkpoint shape {arrays[name].shape} "
                                  f"!= model shape {p.shape}")
        p.values = arrays[name].copy()
    if "classifier.weight" in arrays:
        w, b = arrays["classifier.weight"], arrays["classifier.bias"]
        if w.shape[0] != config.embed_dim:
            raise CheckpointError(f"classifier.weight: checkpoint shape {w.shape} does not fit "
                                  f"embed_dim {config.embed_dim}")
        model.params["classifier.weight"] = Tensor(w.copy(), requires_grad=True)
        model.params["classifier.bias"] = Tensor(b.copy(), requires_grad=True)
        model.num_instances = w.shape[1]
    extra = sorted(k for k in arrays if "." in k and k.split(".")[0] in ("encoder", "projector")
                   and k not in model.params)
    if extra:
        raise CheckpointError(f"checkpoint has parameters the model lacks: {extra}")
    return model


def restore_strategy(arrays: dict[str, np.ndarray]):
    """Return the EwCState or MemoryBuffer stored in a checkpoint, if any."""
    if "replay.images" in arrays:
        images = list(arrays["replay.images"])
        labels = arrays.get("replay.labels")
        return MemoryBuffer(images=images,
                            labels=None if labels is None else [int(x) for x in labels],
                            task_ids=[int(x) for x in arrays["replay.task_ids"]])
    theta = {k[len("ewc.theta_prev."):]: v for k, v in arrays.items() if k.startswith("ewc.theta_prev.")}
    if theta:
        imp = {k[len("ewc.importance."):]: v for k, v in arrays.items() if k.startswith("ewc.importance.")}
        return EwCState(theta, imp)
    return None
