"""Named parameter collections and the binary checkpoint container.

Checkpoint layout (all integers little-endian)::

    b"DCLM"  u32 version  u32 count
    count x { u16 name_len, utf-8 name, u8 rank, rank x u32 dim, f64 payload }
    optional trailer: b"META" u32 json_len utf-8 json

The trailer carries model metadata (variant, config, vocabulary) so that a
checkpoint cannot be evaluated with the wrong wiring.  Readers that only
know the parameter block can stop after ``count`` entries.
"""

from __future__ import annotations

import json
import struct
from typing import Iterator

import numpy as np

from dclm.tensor import Tensor

MAGIC = b"DCLM"
META_MAGIC = b"META"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParameterSet:
    """Mapping from unique parameter name to a trainable :class:`Tensor`.

    Iteration is always in sorted name order.
    """

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} registered twice")
        t = value if isinstance(value, Tensor) else Tensor(value)
        if any(id(t) == id(other) for other in self._tensors.values()):
            raise ValueError(f"tensor for {name!r} is already registered")
        t.requires_grad = True
        t.name = name
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._tensors[name]

    def __iter__(self):
        return iter(self.names())

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, t.shape) for name, t in self.items()]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {name: (np.zeros_like(t.values) if t.grad is None else t.grad)
                for name, t in self.items()}

    def copy(self) -> ParameterSet:
        return ParameterSet({name: Tensor(t.values.copy()) for name, t in self.items()})

    def num_values(self) -> int:
        return sum(t.values.size for t in self._tensors.values())


def save_checkpoint(path, params: ParameterSet, metadata: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(params, metadata))


def dumps_checkpoint(params: ParameterSet, metadata: dict | None = None) -> bytes:
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    if metadata is not None:
        blob = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out.append(META_MAGIC)
        out.append(struct.pack("<I", len(blob)))
        out.append(blob)
    return b"".join(out)


def load_checkpoint(path) -> tuple[ParameterSet, dict | None]:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())


def loads_checkpoint(data: bytes) -> tuple[ParameterSet, dict | None]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a DCLM checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        params = ParameterSet()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
            params.add(name, values.reshape(dims))
        metadata = None
        if pos < len(data):
            if data[pos:pos + 4] != META_MAGIC:
                raise CheckpointError("trailing bytes after parameter block")
            (mlen,) = struct.unpack_from("<I", data, pos + 4)
            metadata = json.loads(data[pos + 8:pos + 8 + mlen].decode("utf-8"))
    except (struct.error, ValueError) as err:
        if isinstance(err, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint: {err}") from None
    return params, metadata
