"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        4 bytes  b"LITN"
    version      u32      FORMAT_VERSION
    config_len   u32      length of the config block in bytes
    config       UTF-8    "key=value" lines, sorted by key
    n_records    u32
    n_records x:
        name_len u32
        name     UTF-8
        dtype    u8       see DTYPE_TAGS
        rank     u32
        dims     rank x u64
        data     raw little-endian C-order buffer
    crc32        u32      zlib.crc32 of every preceding byte

Records are written in sorted name order, so identical states produce
identical files.  Model tensors are stored as ``model.<name>``, Adam moments as
``adam.m.<name>`` / ``adam.v.<name>``.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import LitNet, ModelConfig

MAGIC = b"LITN"
FORMAT_VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_TAG_OF = {dt.newbyteorder("="): tag for tag, dt in DTYPE_TAGS.items()}


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


class NonFiniteStateError(CheckpointError):
    pass


# -- raw container ------------------------------------------------------------------

def encode_config(config: dict[str, str]) -> bytes:
    lines = []
    for key in sorted(config):
        value = str(config[key])
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"config entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def decode_config(blob: bytes) -> dict[str, str]:
    out = {}
    for line in blob.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            out[key] = value
    return out


def write_checkpoint(path, config: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    """Serialize ``config`` and ``tensors``; the file is replaced atomically."""
    buf = io.BytesIO()
    cfg = encode_config(config)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        tag = _TAG_OF.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BI", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    payload = buf.getvalue()
    payload += struct.pack("<I", zlib.crc32(payload))

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointCorruptError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    if len(data) < 12:
        raise CheckpointCorruptError(f"{path}: truncated header")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointCorruptError(f"{path}: checksum mismatch (truncated or corrupted)")
    r.data = data[:-4]

    (cfg_len,) = r.unpack("<I")
    try:
        config = decode_config(r.take(cfg_len))
    except UnicodeDecodeError as exc:
        raise CheckpointCorruptError(f"{path}: config block is not UTF-8") from exc
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in DTYPE_TAGS:
            raise CheckpointCorruptError(f"{path}: record {name!r} has unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}Q")
        dt = DTYPE_TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(r.data):
        raise CheckpointCorruptError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return config, tensors


# -- training state --------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    model_state: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    rng_state: Optional[dict] = None
    extra: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: LitNet, **kwargs) -> "Checkpoint":
        return cls(model.cfg, {k: v.copy() for k, v in model.state_dict().items()}, **kwargs)

    def build_model(self, cfg: Optional[ModelConfig] = None) -> LitNet:
        """Instantiate a model and load the stored weights into it.

        ``cfg`` defaults to the stored configuration; a different configuration
        must have exactly the same tensor names and shapes.
        """
        model = LitNet(cfg or self.model_config)
        load_model_state(model, self.model_state)
        return model


def load_model_state(model: LitNet, state: dict[str, np.ndarray]) -> None:
    own = model.state_dict()
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    if missing or extra:
        raise CheckpointMismatchError(f"tensor names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    bad = [f"{k} {state[k].shape} vs {own[k].shape}" for k in sorted(own) if state[k].shape != own[k].shape]
    if bad:
        raise CheckpointMismatchError("tensor shapes differ: " + "; ".join(bad[:5]))
    model.load_state_dict(state)


def _config_to_text(cfg: ModelConfig) -> dict[str, str]:
    return {f"model.{k}": "" if v is None else str(v) for k, v in cfg.to_dict().items()}


def _config_from_text(text: dict[str, str]) -> ModelConfig:
    raw = {k[len("model.") :]: v for k, v in text.items() if k.startswith("model.")}
    parsed = {}
    for k, v in raw.items():
        if v in ("True", "False"):
            parsed[k] = v == "True"
        elif v == "":
            parsed[k] = None
        elif v.lstrip("-").isdigit():
            parsed[k] = int(v)
        else:
            parsed[k] = v
    return ModelConfig.from_dict(parsed)


def _check_finite(tensors: dict[str, np.ndarray]) -> None:
    bad = [name for name, arr in tensors.items() if arr.dtype.kind == "f" and not np.all(np.isfinite(arr))]
    if bad:
        raise NonFiniteStateError(f"refusing to save non-finite values in {', '.join(bad[:5])}")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    config = _config_to_text(ckpt.model_config)
    config["state.step"] = str(ckpt.step)
    config["state.seed"] = str(ckpt.seed)
    if ckpt.rng_state is not None:
        config["state.rng"] = _encode_rng(ckpt.rng_state)
    for k, v in ckpt.extra.items():
        config[f"extra.{k}"] = str(v)
    tensors = {f"model.{k}": v for k, v in ckpt.model_state.items()}
    tensors.update({f"adam.m.{k}": v for k, v in ckpt.adam_m.items()})
    tensors.update({f"adam.v.{k}": v for k, v in ckpt.adam_v.items()})
    _check_finite(tensors)
    write_checkpoint(path, config, tensors)


def load_checkpoint(path) -> Checkpoint:
    config, tensors = read_checkpoint(path)
    try:
        model_cfg = _config_from_text(config)
        step = int(config.get("state.step", "0"))
        seed = int(config.get("state.seed", "0"))
    except (ValueError, TypeError) as exc:
        raise CheckpointCorruptError(f"{path}: invalid config block ({exc})") from exc
    groups: dict[str, dict[str, np.ndarray]] = {"model.": {}, "adam.m.": {}, "adam.v.": {}}
    for name, arr in tensors.items():
        for prefix, bucket in groups.items():
            if name.startswith(prefix):
                bucket[name[len(prefix) :]] = arr
                break
        else:
            raise CheckpointCorruptError(f"{path}: unexpected record {name!r}")
    rng = _decode_rng(config["state.rng"]) if "state.rng" in config else None
    extra = {k[len("extra.") :]: v for k, v in config.items() if k.startswith("extra.")}
    return Checkpoint(model_cfg, groups["model."], groups["adam.m."], groups["adam.v."], step, seed, rng, extra)


def load_model(path, cfg: Optional[ModelConfig] = None) -> LitNet:
    return load_checkpoint(path).build_model(cfg)


def _encode_rng(state: dict) -> str:
    inner = state["state"]
    return f"{state['bit_generator']}:{inner['state']}:{inner['inc']}:{state['has_uint32']}:{state['uinteger']}"


def _decode_rng(text: str) -> dict:
    name, s, inc, has, uint = text.split(":")
    return {"bit_generator": name, "state": {"state": int(s), "inc": int(inc)}, "has_uint32": int(has), "uinteger": int(uint)}
