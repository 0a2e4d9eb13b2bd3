"""Feature pack container: magic line, u32 LE header length, JSON header, float32 LE payload."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Tuple, Union

import numpy as np

from .errors import PackCorruptError

MAGIC = b"CSRFPK1\n"
_LENGTH = struct.Struct("<I")
_DTYPE = np.dtype("<f4")


def vis_layer_tag(index: int) -> str:
    return f"vis.L{index}"


def txt_layer_tag(index: int) -> str:
    return f"txt.L{index}"


@dataclass
class FeaturePack:
    """Frozen-encoder features for one image or one text, keyed by layer tag."""

    subject_id: str
    entries: Dict[str, np.ndarray] = field(default_factory=dict)
    attrs: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.entries = {tag: np.asarray(value, dtype=np.float32) for tag, value in self.entries.items()}

    def __getitem__(self, tag: str) -> np.ndarray:
        try:
            return self.entries[tag]
        except KeyError:
            raise PackCorruptError(f"pack {self.subject_id!r} has no entry {tag!r}") from None

    def __contains__(self, tag: object) -> bool:
        return tag in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def layer_stack(self, prefix: str) -> np.ndarray:
        """Stack ``<prefix>.L0 .. <prefix>.Ln`` into one [n+1, ...] array."""

        tags: List[str] = []
        index = 0
        while f"{prefix}.L{index}" in self.entries:
            tags.append(f"{prefix}.L{index}")
            index += 1
        if not tags:
            raise PackCorruptError(f"pack {self.subject_id!r} has no {prefix}.L* entries")
        return np.stack([self.entries[tag] for tag in tags])

    def equals(self, other: "FeaturePack") -> bool:
        if self.subject_id != other.subject_id or self.attrs != other.attrs:
            return False
        if list(self.entries) != list(other.entries):
            return False
        return all(
            self.entries[tag].shape == other.entries[tag].shape
            and self.entries[tag].tobytes() == other.entries[tag].tobytes()
            for tag in self.entries
        )


def encode_feature_pack(pack: FeaturePack) -> bytes:
    if not pack.entries:
        raise PackCorruptError(f"refusing to write empty pack {pack.subject_id!r}")
    descriptors: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0
    for tag, value in pack.entries.items():
        array = np.ascontiguousarray(value, dtype=_DTYPE)
        if not np.all(np.isfinite(array)):
            raise PackCorruptError(f"pack {pack.subject_id!r} entry {tag!r} has non-finite values")
        raw = array.tobytes()
        descriptors.append(
            {"tag": tag, "shape": list(array.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = {"subject_id": pack.subject_id, "attrs": pack.attrs, "entries": descriptors}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, _LENGTH.pack(len(header_bytes)), header_bytes, *chunks])


def decode_feature_pack(blob: bytes, *, source: str = "<bytes>") -> FeaturePack:
    if not blob.startswith(MAGIC):
        raise PackCorruptError(f"{source}: bad magic bytes")
    start = len(MAGIC)
    if len(blob) < start + _LENGTH.size:
        raise PackCorruptError(f"{source}: truncated before header length")
    (header_len,) = _LENGTH.unpack_from(blob, start)
    header_start = start + _LENGTH.size
    payload_start = header_start + header_len
    if len(blob) < payload_start:
        raise PackCorruptError(f"{source}: header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[header_start:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PackCorruptError(f"{source}: unreadable header ({exc})") from exc
    if not isinstance(header, Mapping) or "entries" not in header or "subject_id" not in header:
        raise PackCorruptError(f"{source}: header lacks subject_id/entries")

    payload = memoryview(blob)[payload_start:]
    entries: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for descriptor in header["entries"]:
        tag = descriptor.get("tag")
        if descriptor.get("dtype") != "float32":
            raise PackCorruptError(f"{source}: entry {tag!r} has unsupported dtype {descriptor.get('dtype')!r}")
        shape: Tuple[int, ...] = tuple(int(dim) for dim in descriptor.get("shape", []))
        offset = int(descriptor.get("offset", -1))
        nbytes = int(descriptor.get("nbytes", -1))
        count = int(np.prod(shape)) if shape else 1
        if nbytes != count * _DTYPE.itemsize:
            raise PackCorruptError(
                f"{source}: entry {tag!r} shape {list(shape)} needs {count * _DTYPE.itemsize} bytes, header says {nbytes}"
            )
        if offset != expected_offset:
            raise PackCorruptError(f"{source}: entry {tag!r} offset {offset}, expected {expected_offset}")
        if offset + nbytes > len(payload):
            raise PackCorruptError(f"{source}: payload truncated inside entry {tag!r}")
        array = np.frombuffer(payload[offset : offset + nbytes], dtype=_DTYPE).reshape(shape)
        entries[str(tag)] = array.astype(np.float32)
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise PackCorruptError(
            f"{source}: {len(payload) - expected_offset} trailing payload bytes not described by header"
        )
    return FeaturePack(str(header["subject_id"]), entries, dict(header.get("attrs", {})))


def write_feature_pack(pack: FeaturePack, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_feature_pack(pack)
    tmp = target.with_suffix(target.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(target)
    return target


def read_feature_pack(path: Union[str, Path]) -> FeaturePack:
    source = Path(path)
    return decode_feature_pack(source.read_bytes(), source=str(source))
