"""ModelBlob container: ``"ZMDL" | u8 fmt | u8 type | u32 version | payload | u32 crc32``."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

BLOB_MAGIC = b"ZMDL"
BLOB_FORMAT = 1
DETECTOR_TAGS = {"birch": 1, "arima": 2, "rnn": 3}
TAG_NAMES = {v: k for k, v in DETECTOR_TAGS.items()}

_HEAD = struct.Struct(">4sBBI")
_CRC = struct.Struct(">I")


class BlobError(ValueError):
    pass


class CorruptBlobError(BlobError):
    """CRC mismatch or structural damage."""


class DetectorTypeMismatch(BlobError):
    def __init__(self, expected: str, found: str):
        super().__init__(f"detector type mismatch: expected {expected!r}, found {found!r}")
        self.expected = expected
        self.found = found


@dataclass(frozen=True)
class ModelBlob:
    detector: str
    version: int
    payload: bytes

    def encode(self) -> bytes:
        if self.detector not in DETECTOR_TAGS:
            raise BlobError(f"unknown detector type {self.detector!r}")
        body = _HEAD.pack(BLOB_MAGIC, BLOB_FORMAT, DETECTOR_TAGS[self.detector], self.version) + self.payload
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def decode(cls, data: bytes, source: str = "<bytes>") -> "ModelBlob":
        if len(data) < _HEAD.size + _CRC.size:
            raise CorruptBlobError(f"{source}: blob too short ({len(data)} bytes)")
        body, (crc,) = data[: -_CRC.size], _CRC.unpack(data[-_CRC.size :])
        if zlib.crc32(body) != crc:
            raise CorruptBlobError(f"{source}: CRC mismatch")
        magic, fmt, tag, version = _HEAD.unpack_from(body)
        if magic != BLOB_MAGIC:
            raise CorruptBlobError(f"{source}: bad magic {magic!r}")
        if fmt != BLOB_FORMAT:
            raise BlobError(f"{source}: unsupported blob format {fmt}")
        if tag not in TAG_NAMES:
            raise BlobError(f"{source}: unknown detector tag {tag}")
        return cls(TAG_NAMES[tag], version, bytes(body[_HEAD.size :]))
