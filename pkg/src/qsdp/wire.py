"""Bit-exact serialization of quantized block sequences.

Message layout (all little-endian, no alignment gaps):

    header:   version  u8   (currently 1)
              bit_width u8
              bucket_size  u32
              block_count  u32
              total_length u32
    per block (block_count times, in order):
              shift     f32
              scale_lo  f32
              scale_hi  f32
              payload   ceil(length * bit_width / 8) bytes

Block lengths are implied by the bucket structure: every block has
`bucket_size` elements except the last, which holds the remainder of
`total_length`.  Codes are packed least-significant-bit first within each
byte; the final byte of each block is zero-padded.  Scales and the shift are
transported as float32, so blocks built by the bucketed quantizers (whose
metadata is float32-exact) round-trip field-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .quantize import QuantizedBlock

__all__ = [
    "WIRE_VERSION",
    "HEADER_BITS",
    "BLOCK_META_BITS",
    "encode",
    "decode",
    "message_size_bits",
    "WireError",
    "EncodeError",
    "DecodeError",
    "TruncatedMessageError",
    "UnsupportedVersionError",
    "CodeRangeError",
]

WIRE_VERSION = 1
_HEADER = struct.Struct("<BBIII")
_BLOCK_META = struct.Struct("<fff")
HEADER_BITS = _HEADER.size * 8
BLOCK_META_BITS = _BLOCK_META.size * 8


class WireError(ValueError):
    pass


class EncodeError(WireError):
    pass


class DecodeError(WireError):
    pass


class TruncatedMessageError(DecodeError):
    pass


class UnsupportedVersionError(DecodeError):
    pass


class CodeRangeError(DecodeError):
    pass


def _payload_bytes(length: int, bit_width: int) -> int:
    return (length * bit_width + 7) // 8


def _pack_codes(codes: np.ndarray, bit_width: int) -> bytes:
    shifts = np.arange(bit_width, dtype=np.uint32)
    bits = ((codes[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def _unpack_codes(payload: bytes, length: int, bit_width: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    used = length * bit_width
    if np.any(bits[used:]):
        raise DecodeError("nonzero padding bits in payload")
    weights = (np.uint64(1) << np.arange(bit_width, dtype=np.uint64))
    codes = bits[:used].reshape(length, bit_width).astype(np.uint64) @ weights
    return codes.astype(np.uint32)


def _check_f32_exact(block: QuantizedBlock) -> None:
    for name in ("shift", "scale_lo", "scale_hi"):
        val = getattr(block, name)
        if float(np.float32(val)) != val:
            raise EncodeError(
                f"block {name}={val!r} is not float32-exact; the wire carries "
                "f32 metadata, quantize through the bucketed path"
            )


def encode(blocks: list[QuantizedBlock]) -> bytes:
    """Serialize a canonical (bucket-shaped) block list deterministically."""
    if not blocks:
        return _HEADER.pack(WIRE_VERSION, 0, 0, 0, 0)
    bit_width = blocks[0].bit_width
    bucket_size = blocks[0].length
    total = 0
    for i, b in enumerate(blocks):
        if b.bit_width != bit_width:
            raise EncodeError(
                f"mixed bit_width: block 0 has {bit_width}, block {i} has {b.bit_width}"
            )
        last = i == len(blocks) - 1
        if not last and b.length != bucket_size:
            raise EncodeError("only the final block may be shorter than the bucket")
        if last and b.length > bucket_size:
            raise EncodeError("final block exceeds the bucket size")
        total += b.length
    out = [_HEADER.pack(WIRE_VERSION, bit_width, bucket_size, len(blocks), total)]
    for b in blocks:
        _check_f32_exact(b)
        out.append(_BLOCK_META.pack(b.shift, b.scale_lo, b.scale_hi))
        out.append(_pack_codes(b.codes, bit_width))
    return b"".join(out)


def decode(data: bytes) -> list[QuantizedBlock]:
    """Exact inverse of encode; malformed input raises a DecodeError."""
    if len(data) < _HEADER.size:
        raise TruncatedMessageError(
            f"message of {len(data)} bytes is shorter than the header"
        )
    version, bit_width, bucket_size, count, total = _HEADER.unpack_from(data, 0)
    if version != WIRE_VERSION:
        raise UnsupportedVersionError(f"unsupported wire version {version}")
    if count == 0:
        if len(data) != _HEADER.size or total != 0:
            raise DecodeError("empty message carries trailing data")
        return []
    if bit_width < 1 or bit_width > 32:
        raise CodeRangeError(f"header bit_width {bit_width} outside [1, 32]")
    if bucket_size < 1:
        raise DecodeError("bucket_size must be positive for non-empty messages")
    last_len = total - (count - 1) * bucket_size
    if not 1 <= last_len <= bucket_size:
        raise DecodeError(
            f"total_length {total} inconsistent with {count} buckets of {bucket_size}"
        )
    blocks = []
    offset = _HEADER.size
    for i in range(count):
        length = bucket_size if i < count - 1 else last_len
        if offset + _BLOCK_META.size > len(data):
            raise TruncatedMessageError(f"block {i} metadata truncated")
        shift, lo, hi = _BLOCK_META.unpack_from(data, offset)
        offset += _BLOCK_META.size
        nbytes = _payload_bytes(length, bit_width)
        payload = data[offset : offset + nbytes]
        if len(payload) < nbytes:
            raise TruncatedMessageError(f"block {i} payload truncated")
        offset += nbytes
        codes = _unpack_codes(payload, length, bit_width)
        if codes.size and int(codes.max()) >= (1 << bit_width):
            raise CodeRangeError(f"block {i} contains a code outside bit_width")
        blocks.append(
            QuantizedBlock(
                codes=codes,
                shift=shift,
                scale_lo=lo,
                scale_hi=hi,
                bit_width=bit_width,
                length=length,
            )
        )
    if offset != len(data):
        raise DecodeError(f"{len(data) - offset} unexpected trailing bytes")
    return blocks


def message_size_bits(blocks: list[QuantizedBlock]) -> int:
    """Exact encoded size in bits, metadata and per-block padding included."""
    size = HEADER_BITS
    for b in blocks:
        size += BLOCK_META_BITS + 8 * _payload_bytes(b.length, b.bit_width)
    return size
