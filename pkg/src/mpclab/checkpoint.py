"""Binary checkpoint files.

Layout (little-endian)::

    "MPCC" | u32 version | u32 len + UTF-8 JSON header (config digest,
    model config, counters, provenance, normalizer) | u32 count + tensors |
    u32 count + optimizer tensors | u32 len + rng state bytes

Each tensor is ``u16 name len | name | u8 rank | u32 dims... | f64 payload``.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import Normalizer
from .model import ModelConfig
from .numerics import AdamState

MAGIC = b"MPCC"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    stage: str
    config_digest: str = ""
    epoch: int = 0
    step: int = 0
    adam: AdamState | None = None
    rng_state: dict = field(default_factory=dict)
    normalizer: Normalizer | None = None
    parent_digest: str | None = None
    info: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        header = {
            "config_digest": self.config_digest,
            "model_config": self.model_config.to_dict(),
            "stage": self.stage,
            "epoch": self.epoch,
            "step": self.step,
            "parent_digest": self.parent_digest,
            "info": self.info,
            "normalizer": None if self.normalizer is None else {
                "mean": self.normalizer.mean.tolist(), "std": self.normalizer.std.tolist()},
        }
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        _write_blob(buf, json.dumps(header, sort_keys=True).encode("utf-8"))
        _write_tensors(buf, self.params)
        _write_tensors(buf, _adam_tensors(self.adam))
        _write_blob(buf, json.dumps(self.rng_state, sort_keys=True).encode("utf-8"))
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> Checkpoint:
        buf = _Reader(raw, source)
        if buf.take(4) != MAGIC:
            raise DataError(f"{source}: not a checkpoint file")
        (version,) = buf.unpack("<I")
        if version != VERSION:
            raise DataError(f"{source}: unsupported checkpoint version {version}")
        header = json.loads(buf.blob().decode("utf-8"))
        params = buf.tensors()
        adam = _adam_from_tensors(buf.tensors())
        rng_state = json.loads(buf.blob().decode("utf-8"))
        if buf.remaining():
            raise DataError(f"{source}: {buf.remaining()} trailing bytes")
        norm = header.get("normalizer")
        return cls(
            params=params,
            model_config=ModelConfig.from_dict(header["model_config"]),
            stage=header["stage"],
            config_digest=header["config_digest"],
            epoch=header["epoch"],
            step=header["step"],
            adam=adam,
            rng_state=rng_state,
            normalizer=None if norm is None else Normalizer(np.array(norm["mean"]), np.array(norm["std"])),
            parent_digest=header.get("parent_digest"),
            info=header.get("info", {}),
        )

    @classmethod
    def load(cls, path) -> Checkpoint:
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(raw, str(path))


def _write_blob(buf, data: bytes) -> None:
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _write_tensors(buf, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


def _adam_tensors(state: AdamState | None) -> dict[str, np.ndarray]:
    if state is None:
        return {}
    out = {
        "step": np.array(float(state.step)),
        "beta1": np.array(state.beta1),
        "beta2": np.array(state.beta2),
        "eps": np.array(state.eps),
    }
    for name in state.m:
        out[f"m/{name}"] = state.m[name]
        out[f"v/{name}"] = state.v[name]
    return out


def _adam_from_tensors(t: dict[str, np.ndarray]) -> AdamState | None:
    if not t:
        return None
    state = AdamState(beta1=float(t["beta1"]), beta2=float(t["beta2"]), eps=float(t["eps"]),
                      step=int(t["step"]))
    for key, arr in t.items():
        if key.startswith("m/"):
            state.m[key[2:]] = arr
        elif key.startswith("v/"):
            state.v[key[2:]] = arr
    return state


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataError(f"{self.source}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}I") if rank else ()
            n = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(self.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        return out

    def remaining(self) -> int:
        return len(self.raw) - self.pos


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
