"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    magic  b"LRPOMOCK"
    u32    format_version
    u32    header length, then canonical JSON header
    u32    tensor count, then per tensor:
           u32 name length, utf-8 name, u32 ndim, u32 dims..., float32 data

Tensors are written in sorted name order so that save -> load -> save is
byte-identical.  Nothing executable is ever deserialized.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState
from .errors import CheckpointError
from .policy import AttentionPolicy, PolicyConfig

MAGIC = b"LRPOMOCK"
FORMAT_VERSION = 1
PHASES = ("main", "final")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class Checkpoint:
    policy_config: dict
    train_config: dict
    phase: str
    step: int
    params: dict[str, np.ndarray]
    adam: dict = field(default_factory=dict)
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @classmethod
    def capture(cls, policy: AttentionPolicy, adam: AdamState | None, rng, phase: str, step: int,
                train_config: dict, metadata: dict | None = None) -> "Checkpoint":
        if phase not in PHASES:
            raise CheckpointError(f"unknown phase {phase!r}")
        return cls(
            policy_config=policy.config.to_dict(),
            train_config=dict(train_config),
            phase=phase,
            step=int(step),
            params={k: v.data.astype(np.float32) for k, v in policy.params.items()},
            adam=adam.hyperparameters() if adam else {},
            first_moment={k: v.astype(np.float32) for k, v in (adam.first_moment if adam else {}).items()},
            second_moment={k: v.astype(np.float32) for k, v in (adam.second_moment if adam else {}).items()},
            rng_state=rng.bit_generator.state if rng is not None else None,
            metadata=dict(metadata or {}),
        )

    def policy(self) -> AttentionPolicy:
        pol = AttentionPolicy(PolicyConfig(**self.policy_config))
        pol.load_state_dict(self.params)
        return pol

    def adam_state(self) -> AdamState | None:
        if not self.adam:
            return None
        h = self.adam
        return AdamState(
            learning_rate=h["learning_rate"], beta1=h["beta1"], beta2=h["beta2"], epsilon=h["epsilon"],
            step_count=h["step_count"],
            first_moment={k: v.copy() for k, v in self.first_moment.items()},
            second_moment={k: v.copy() for k, v in self.second_moment.items()},
        )

    def rng(self) -> np.random.Generator | None:
        if self.rng_state is None:
            return None
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g

    # ------------------------------------------------------------- encoding

    def _header(self) -> dict:
        return {
            "policy_config": self.policy_config,
            "train_config": self.train_config,
            "phase": self.phase,
            "step": self.step,
            "adam": self.adam,
            "rng_state": self.rng_state,
            "metadata": self.metadata,
        }

    def to_bytes(self) -> bytes:
        header = canonical_json(self._header()).encode()
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        tensors.update({f"adam.m/{k}": v for k, v in self.first_moment.items()})
        tensors.update({f"adam.v/{k}": v for k, v in self.second_moment.items()})
        out = [MAGIC, struct.pack("<II", self.format_version, len(header)), header, struct.pack("<I", len(tensors))]
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            nb = name.encode()
            out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[: len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        pos = len(MAGIC)
        try:
            version, hlen = struct.unpack_from("<II", data, pos)
            pos += 8
            if version != FORMAT_VERSION:
                raise CheckpointError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
            header = json.loads(data[pos:pos + hlen])
            pos += hlen
            (count,) = struct.unpack_from("<I", data, pos)
            pos += 4
            tensors = {}
            for _ in range(count):
                (nlen,) = struct.unpack_from("<I", data, pos)
                pos += 4
                name = data[pos:pos + nlen].decode()
                pos += nlen
                (ndim,) = struct.unpack_from("<I", data, pos)
                pos += 4
                shape = struct.unpack_from(f"<{ndim}I", data, pos)
                pos += 4 * ndim
                size = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
                pos += 4 * size
                tensors[name] = arr.astype(np.float32)
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None
        if pos != len(data):
            raise CheckpointError("trailing bytes after checkpoint payload")

        def group(prefix):
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        return cls(
            policy_config=header["policy_config"],
            train_config=header["train_config"],
            phase=header["phase"],
            step=header["step"],
            params=group("param/"),
            adam=header["adam"],
            first_moment=group("adam.m/"),
            second_moment=group("adam.v/"),
            rng_state=header["rng_state"],
            metadata=header.get("metadata", {}),
            format_version=version,
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
