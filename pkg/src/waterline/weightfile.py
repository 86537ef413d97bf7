"""Binary weight container.

Layout (little-endian)::

    b"WLDN" | version u32 | fingerprint u64 | tensor count u32
    repeated: name length u16 | utf-8 name | rank u8 | extents u32 * rank
              | float64 payload
    crc32 u32 over every byte after the tensor count

The fingerprint is the architecture hash, so weights cannot be loaded into
a network of a different shape or wiring.
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .netbuilder import Network

MAGIC = b"WLDN"
VERSION = 1

PathOrFile = Union[str, Path, io.BufferedIOBase]


class WeightFileError(ValueError):
    pass


class BadMagic(WeightFileError):
    pass


class VersionMismatch(WeightFileError):
    pass


class TruncatedPayload(WeightFileError):
    pass


class ShapeTableMismatch(WeightFileError):
    pass


class FingerprintMismatch(WeightFileError):
    def __init__(self, stored: int, expected: int):
        super().__init__(f"weight fingerprint {stored:016x} does not match "
                         f"architecture fingerprint {expected:016x}")
        self.stored = stored
        self.expected = expected


class ChecksumMismatch(WeightFileError):
    pass


def dumps(network: Network) -> bytes:
    body = bytearray()
    for name, arr in network.params.items():
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    head = MAGIC + struct.pack("<IQI", VERSION, network.fingerprint, len(network.params))
    return head + bytes(body) + struct.pack("<I", zlib.crc32(body))


def save_weights(network: Network, dest: PathOrFile) -> None:
    data = dumps(network)
    if hasattr(dest, "write"):
        dest.write(data)
    else:
        Path(dest).write_bytes(data)


class _Reader:
    def __init__(self, data: bytes, start: int):
        self.data = data
        self.pos = start

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayload(f"file ends at byte {len(self.data)}, "
                                   f"needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_header(data: bytes) -> Tuple[int, int, int]:
    """Return ``(version, fingerprint, tensor count)`` after checking the magic."""
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 24:
        raise TruncatedPayload("header shorter than 24 bytes")
    version, fingerprint, count = struct.unpack("<IQI", data[4:20])
    if version != VERSION:
        raise VersionMismatch(f"format version {version}, this reader supports {VERSION}")
    return version, fingerprint, count


def loads(spec, data: bytes) -> Network:
    """Rebuild a network for ``spec`` (a spec with ``architecture()``, or an Architecture)."""
    arch = spec.architecture() if hasattr(spec, "architecture") else spec
    _, fingerprint, count = read_header(data)
    rd = _Reader(data, 20)
    table: List[Tuple[str, Tuple[int, ...], np.ndarray]] = []
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        (rank,) = rd.unpack("<B")
        shape = rd.unpack(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        payload = np.frombuffer(rd.take(8 * n), dtype="<f8").reshape(shape)
        table.append((name, tuple(shape), payload))
    body_end = rd.pos
    (crc,) = rd.unpack("<I")

    expected = {k: v[0] for k, v in arch.param_shapes().items()}
    stored = {name: shape for name, shape, _ in table}
    if stored != expected:
        diffs = sorted(set(stored.items()) ^ set(expected.items()))
        raise ShapeTableMismatch(f"stored shape table differs from spec: {diffs[:4]}")
    if fingerprint != arch.fingerprint():
        raise FingerprintMismatch(fingerprint, arch.fingerprint())
    if zlib.crc32(data[20:body_end]) != crc:
        raise ChecksumMismatch("payload CRC-32 mismatch")
    params: Dict[str, np.ndarray] = {name: payload.astype(np.float64) for name, _, payload in table}
    return Network(arch, {k: params[k] for k in expected}, None, spec)


def load_weights(spec, source: PathOrFile) -> Network:
    data = source.read() if hasattr(source, "read") else Path(source).read_bytes()
    return loads(spec, data)
