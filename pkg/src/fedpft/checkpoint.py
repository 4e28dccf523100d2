"""``FPFT`` binary tensor checkpoints and the JSON adapter wire format.

Layout (little-endian)::

    b"FPFT" | u32 version
    repeated until EOF:
        u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f32 payload[prod(dims)]

Models add two bookkeeping tensors, ``meta.config`` and ``meta.source_layers``,
so a checkpoint alone is enough to rebuild a :class:`TransformerModel`.
"""

from __future__ import annotations

import base64
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .transformer import LoraAdapters, ModelConfig, TransformerModel

MAGIC = b"FPFT"
VERSION = 1
_CONFIG_FIELDS = ("num_layers", "num_heads", "d_model", "d_ff", "vocab_size", "max_seq_len", "num_classes")


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an FPFT checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported FPFT version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(blob):
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
            out[name] = arr.astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return out


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def model_tensors(model: TransformerModel) -> dict[str, np.ndarray]:
    cfg = model.config
    meta = {
        "meta.config": np.array([getattr(cfg, f) for f in _CONFIG_FIELDS], np.float32),
        "meta.source_layers": np.array(model.source_layers, np.float32),
    }
    return {**meta, **model.params}


def model_from_tensors(tensors: Mapping[str, np.ndarray]) -> TransformerModel:
    tensors = dict(tensors)
    try:
        cfg_vec = tensors.pop("meta.config")
        src = tensors.pop("meta.source_layers")
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks {exc.args[0]}") from exc
    cfg = ModelConfig(**{f: int(v) for f, v in zip(_CONFIG_FIELDS, cfg_vec)})
    return TransformerModel(cfg, tensors, tuple(int(s) for s in src))


def save_model(model: TransformerModel, path) -> None:
    atomic_write(path, encode_tensors(model_tensors(model)))


def load_model(path) -> TransformerModel:
    return model_from_tensors(decode_tensors(Path(path).read_bytes()))


def adapter_message(adapters: LoraAdapters, client_id: int, num_samples: int, round_index: int) -> str:
    """Client -> server JSON message carrying an adapter payload."""
    payload = base64.b64encode(encode_tensors(dict(sorted(adapters.tensors.items())))).decode("ascii")
    return json.dumps(
        {"client_id": client_id, "round": round_index, "num_samples": num_samples, "rank": adapters.rank, "payload": payload}
    )


def parse_adapter_message(text: str) -> tuple[LoraAdapters, int, int]:
    """Returns ``(adapters, client_id, num_samples)``."""
    doc = json.loads(text)
    tensors = decode_tensors(base64.b64decode(doc["payload"]))
    return LoraAdapters(int(doc["rank"]), tensors), int(doc["client_id"]), int(doc["num_samples"])
