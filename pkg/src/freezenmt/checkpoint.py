"""Checkpoint container and its binary file format.

Little-endian layout::

    b"SFCK"  u32 version  u32 n_tensors
    n_tensors x  [u16 name_len][name utf-8][u8 component][u8 trainable][u8 rank]
                 [u64 extent]*rank [f64 value]*size
    u32 n_state_tensors, then optimizer moments in the same tensor encoding
    u32 metadata_len, then ``key=value`` lines (utf-8)

Optimizer moments are named ``m:<param>`` and ``v:<param>``.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .params import Component, Parameter, ParameterStore

MAGIC = b"SFCK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, store: ParameterStore) -> "AdamState":
        return cls(0, {p.name: np.zeros_like(p.value) for p in store},
                   {p.name: np.zeros_like(p.value) for p in store})

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


@dataclass
class Checkpoint:
    store: ParameterStore
    config: ModelConfig
    optimizer: AdamState | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.store.copy(), self.config,
                          self.optimizer.copy() if self.optimizer else None, dict(self.metadata))

    def param_digest(self) -> str:
        h = hashlib.sha256()
        for p in self.store:
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(self.store)))
        for p in self.store:
            _write_tensor(buf, p.name, int(p.component), p.trainable, p.value)
        opt = self.optimizer
        state = [] if opt is None else [
            (f"{kind}:{name}", arr) for name in self.store.names()
            for kind, arr in (("m", opt.m[name]), ("v", opt.v[name]))
        ]
        buf.write(struct.pack("<I", len(state)))
        for name, arr in state:
            _write_tensor(buf, name, 0, False, arr)
        meta = dict(self.metadata)
        for k, v in _config_items(self.config):
            meta[k] = v
        if opt is not None:
            meta["optimizer.step"] = str(opt.step)
        text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
        buf.write(struct.pack("<I", len(text)))
        buf.write(text)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        r = _Reader(data)
        if r.take(4) != MAGIC:
            raise CheckpointFormatError("not a checkpoint file (bad magic)")
        version, n = r.unpack("<II")
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        params = []
        for _ in range(n):
            name, tag, trainable, arr = _read_tensor(r)
            try:
                comp = Component(tag)
            except ValueError as exc:
                raise CheckpointFormatError(f"unknown component tag {tag}") from exc
            params.append(Parameter(name, arr, comp, trainable))
        store = ParameterStore(params)
        (n_state,) = r.unpack("<I")
        moments = {}
        for _ in range(n_state):
            name, _, _, arr = _read_tensor(r)
            moments[name] = arr
        (n_meta,) = r.unpack("<I")
        try:
            text = r.take(n_meta).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("metadata is not UTF-8") from exc
        if r.pos != len(data):
            raise CheckpointFormatError("trailing bytes after metadata block")
        meta: dict[str, str] = {}
        for line in text.splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointFormatError(f"bad metadata line {line!r}")
            meta[key] = value
        config = _config_from(meta)
        opt = None
        if moments:
            opt = AdamState(int(meta.get("optimizer.step", "0")),
                            {p.name: moments[f"m:{p.name}"] for p in store},
                            {p.name: moments[f"v:{p.name}"] for p in store})
        for key in list(meta):
            if key.startswith("model.") or key == "optimizer.step":
                del meta[key]
        return cls(store, config, opt, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.save(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(path)


def rng_state_text(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True, separators=(",", ":"))


def rng_from_text(text: str) -> np.random.Generator:
    state = json.loads(text)
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


_CONFIG_FIELDS = ("src_vocab", "tgt_vocab", "embed_dim", "hidden_dim", "encoder_layers",
                  "decoder_layers", "dropout_rnn", "label_smoothing", "decoder_init", "init_scale")


def _config_items(cfg: ModelConfig):
    for name in _CONFIG_FIELDS:
        yield f"model.{name}", repr(getattr(cfg, name)) if isinstance(getattr(cfg, name), float) \
            else str(getattr(cfg, name))


def _config_from(meta: dict[str, str]) -> ModelConfig:
    try:
        kw = {}
        for name in _CONFIG_FIELDS:
            raw = meta[f"model.{name}"]
            default = ModelConfig.__dataclass_fields__[name].default
            if name in ("src_vocab", "tgt_vocab") or isinstance(default, int):
                kw[name] = int(raw)
            elif isinstance(default, float):
                kw[name] = float(raw)
            else:
                kw[name] = raw
        return ModelConfig(**kw)
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"missing or bad model config in metadata: {exc}") from exc


def _write_tensor(buf, name: str, tag: int, trainable: bool, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BBB", tag, int(trainable), arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensor(r: _Reader):
    (name_len,) = r.unpack("<H")
    try:
        name = r.take(name_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError("tensor name is not UTF-8") from exc
    tag, trainable, rank = r.unpack("<BBB")
    shape = r.unpack(f"<{rank}Q")
    size = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    return name, tag, bool(trainable), arr
