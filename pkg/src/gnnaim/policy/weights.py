"""Policy parameter container and its binary file format.

Layout: 8-byte magic, uint32 format version, uint64 header length, a UTF-8
JSON header (tensor table: name, shape, byte offset; plus free-form
metadata), the tensors as little-endian float64 in row-major order, and a
SHA-256 digest of everything before it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .networks import NetShape, init_actor, init_critic

MAGIC = b"GNNAIMW\0"
FORMAT_VERSION = 1
NETS = ("actor", "critic1", "critic2")


class WeightsError(ValueError):
    """Unreadable or incompatible weights file."""

    def __init__(self, message: str, *, tensor: str | None = None, expected=None, found=None):
        super().__init__(message)
        self.tensor = tensor
        self.expected = expected
        self.found = found


@dataclass
class PolicyWeights:
    actor: dict
    critic1: dict
    critic2: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, seed: int, shape: NetShape = NetShape()) -> "PolicyWeights":
        rng = np.random.default_rng(seed)
        return cls(init_actor(rng, shape), init_critic(rng, shape), init_critic(rng, shape))

    def nets(self):
        return {"actor": self.actor, "critic1": self.critic1, "critic2": self.critic2}

    def flat(self) -> dict:
        return {f"{net}.{k}": v for net, params in self.nets().items() for k, v in params.items()}

    def copy(self) -> "PolicyWeights":
        return PolicyWeights(
            {k: v.copy() for k, v in self.actor.items()},
            {k: v.copy() for k, v in self.critic1.items()},
            {k: v.copy() for k, v in self.critic2.items()},
            dict(self.meta),
        )

    def equals(self, other: "PolicyWeights") -> bool:
        a, b = self.flat(), other.flat()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def save_weights(path, weights: PolicyWeights) -> Path:
    path = Path(path)
    tensors, blobs, offset = [], [], 0
    for name, arr in sorted(weights.flat().items()):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        if not np.all(np.isfinite(arr)):
            raise WeightsError(f"tensor {name} has non-finite entries", tensor=name)
        data = arr.tobytes(order="C")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"tensors": tensors, "meta": weights.meta}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def load_weights(path, shape: NetShape | None = None) -> PolicyWeights:
    """Read a weights file; with ``shape`` given, tensor shapes are checked against it."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise WeightsError(f"{path}: not a policy weights file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise WeightsError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise WeightsError(f"{path}: unsupported format version {version}", expected=FORMAT_VERSION, found=version)
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + hlen].decode("utf-8"))
    data = body[start + hlen :]
    nets: dict[str, dict] = {n: {} for n in NETS}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=t["offset"]).reshape(t["shape"]).astype(np.float64)
        net, key = t["name"].split(".", 1)
        if net not in nets:
            raise WeightsError(f"{path}: unknown network {net!r}", tensor=t["name"])
        nets[net][key] = arr
    weights = PolicyWeights(nets["actor"], nets["critic1"], nets["critic2"], header.get("meta", {}))
    if shape is not None:
        check_shapes(weights, shape)
    return weights


def check_shapes(weights: PolicyWeights, shape: NetShape = NetShape()) -> None:
    ref = PolicyWeights.initial(0, shape).flat()
    got = weights.flat()
    missing = sorted(set(ref) - set(got))
    if missing:
        raise WeightsError(f"missing tensors: {', '.join(missing)}", tensor=missing[0])
    for name, arr in ref.items():
        if got[name].shape != arr.shape:
            raise WeightsError(
                f"tensor {name}: expected shape {arr.shape}, found {got[name].shape}",
                tensor=name,
                expected=arr.shape,
                found=got[name].shape,
            )
