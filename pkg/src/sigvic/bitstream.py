"""Self-contained container for one compressed image.

Layout, little-endian::

    magic      4s   b"SGVC"
    version    u8   1
    width      u32  original image width
    height     u32  original image height
    lambda     f32  rate-distortion tradeoff used by the encoder
    K          u16  shallow channel count
    z_len      u32  bytes of hyper-latent payload
    y_len      u32  bytes of latent payload
    z_payload  z_len bytes
    y_payload  y_len bytes
    crc32      u32  CRC-32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from .errors import ContainerError

MAGIC = b"SGVC"
VERSION = 1
_HEADER = struct.Struct("<4sBIIfHII")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class Bitstream:
    width: int
    height: int
    lam: float
    K: int
    z_payload: bytes
    y_payload: bytes

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(
            MAGIC, VERSION, self.width, self.height, self.lam, self.K,
            len(self.z_payload), len(self.y_payload),
        )
        body = head + self.z_payload + self.y_payload
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size + _CRC.size:
            raise ContainerError(f"stream of {len(data)} bytes is shorter than the header")
        magic, version, width, height, lam, k, z_len, y_len = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ContainerError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ContainerError(f"unsupported version {version}")
        end = _HEADER.size + z_len + y_len
        if end + _CRC.size != len(data):
            raise ContainerError(
                f"payload lengths ({z_len} + {y_len}) disagree with stream size {len(data)}"
            )
        (crc,) = _CRC.unpack_from(data, end)
        if crc != zlib.crc32(data[:end]):
            raise ContainerError("checksum mismatch")
        z = bytes(data[_HEADER.size:_HEADER.size + z_len])
        y = bytes(data[_HEADER.size + z_len:end])
        return cls(width, height, lam, k, z, y)
