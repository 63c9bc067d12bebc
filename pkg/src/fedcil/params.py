"""Frozen parameter snapshots and the binary checkpoint format.

Checkpoint layout (all little-endian)::

    b"FCIL" | version u32 | entry count u32
    per entry: name length u32 | name (utf-8) | rank u32 | dims u32 * rank | float64 payload

The class-label order of a snapshot is stored as an extra rank-1 entry
named ``__labels__`` so that a snapshot round-trips completely.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ContractError, ProtocolError

MAGIC = b"FCIL"
SCHEMA_VERSION = 1
LABELS_ENTRY = "__labels__"

# entries whose leading axis (or trailing columns for the generator input)
# is indexed by class label and may therefore differ in size between clients
CLASS_ROW_ENTRIES = ("cls.W", "cls.b")
CLASS_COLUMN_ENTRIES = ("gen.0.W",)


@dataclass(frozen=True)
class ParameterVector:
    """Immutable, ordered ``(name, array)`` snapshot of a model.

    ``labels`` gives the class label of each class-head row (and of each
    one-hot input column of the generator).
    """

    entries: tuple[tuple[str, np.ndarray], ...]
    labels: tuple[int, ...] = ()
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate parameter names in {names}")
        if LABELS_ENTRY in names:
            raise ContractError(f"{LABELS_ENTRY!r} is reserved")
        frozen = []
        for name, arr in self.entries:
            a = np.array(arr, dtype=np.float64, copy=True)
            a.setflags(write=False)
            frozen.append((name, a))
        object.__setattr__(self, "entries", tuple(frozen))
        object.__setattr__(self, "labels", tuple(int(x) for x in self.labels))

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], labels: Iterable[int] = (),
                    names: Iterable[str] | None = None) -> "ParameterVector":
        keys = list(arrays) if names is None else list(names)
        return cls(tuple((k, arrays[k]) for k in keys), tuple(labels))

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def __getitem__(self, name: str) -> np.ndarray:
        for n, a in self.entries:
            if n == name:
                return a
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(n == name for n, _ in self.entries)

    def as_dict(self) -> dict[str, np.ndarray]:
        """Writable copies of every entry."""
        return {n: a.copy() for n, a in self.entries}

    def subset(self, prefixes: tuple[str, ...]) -> "ParameterVector":
        return ParameterVector(tuple((n, a) for n, a in self.entries
                                     if n.startswith(prefixes)), self.labels)

    def num_values(self) -> int:
        return int(sum(a.size for _, a in self.entries))

    def bit_equal(self, other: "ParameterVector") -> bool:
        if self.names != other.names or self.labels != other.labels:
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for (_, a), (_, b) in zip(self.entries, other.entries))

    def aggregation_compatible(self, other: "ParameterVector") -> bool:
        """Same names and shapes, except along the class axis."""
        if self.names != other.names:
            return False
        for (name, a), (_, b) in zip(self.entries, other.entries):
            if name in CLASS_ROW_ENTRIES:
                if a.shape[1:] != b.shape[1:]:
                    return False
            elif name in CLASS_COLUMN_ENTRIES:
                na, nb = a.shape[1] - len(self.labels), b.shape[1] - len(other.labels)
                if a.shape[0] != b.shape[0] or na != nb:
                    return False
            elif a.shape != b.shape:
                return False
        return True


def _pack(entries: list[tuple[str, np.ndarray]], version: int) -> bytes:
    out = [MAGIC, struct.pack("<II", version, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def to_bytes(pv: ParameterVector) -> bytes:
    entries = list(pv.entries)
    entries.append((LABELS_ENTRY, np.asarray(pv.labels, dtype=np.float64)))
    return _pack(entries, pv.schema_version)


def from_bytes(blob: bytes) -> ParameterVector:
    if blob[:4] != MAGIC:
        raise ContractError("not a checkpoint: bad magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != SCHEMA_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    pos = 12
    entries, labels = [], ()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        if name == LABELS_ENTRY:
            labels = tuple(int(x) for x in arr)
        else:
            entries.append((name, arr.astype(np.float64)))
    if pos != len(blob):
        raise ContractError("trailing bytes after last checkpoint entry")
    return ParameterVector(tuple(entries), labels, version)


def save_checkpoint(path: str | Path, pv: ParameterVector) -> None:
    path = Path(path)
    try:
        path.write_bytes(to_bytes(pv))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> ParameterVector:
    return from_bytes(Path(path).read_bytes())


def require_compatible(vectors: list[ParameterVector]) -> None:
    head = vectors[0]
    for other in vectors[1:]:
        if not head.aggregation_compatible(other):
            raise ProtocolError(
                f"uploads are not aggregation-compatible: {head.names} vs {other.names}")
