"""Wire primitives: unsigned varints, frames, and the message-type registry.

Every protocol message travels as a length-prefixed frame:

    frame  := uvarint(length) || msg_type(1 byte) || body
    length == 1 + len(body)

Varints are unsigned LEB128: little-endian base-128 groups, high bit set on
every byte except the last. Values are capped at 64 bits (at most 10 encoded
bytes). Frame bodies are capped at 1 MiB; layers above keep their payloads
under that (blocks max 256 KiB, stream data frames max 16 KiB).

The body layout of each message type is documented in docs/wire.md and
exercised by testdata/wire_vectors.txt.
"""

from __future__ import annotations

from .errors import PeermeshError

MAX_VARINT = (1 << 64) - 1
MAX_FRAME_BODY = 1 << 20

# Connection management / traversal        0x01 - 0x0F
HELLO = 0x01
DIALBACK_REQ = 0x02
DIALBACK_RESP = 0x03
RESERVE_REQ = 0x04
RESERVE_RESP = 0x05
RELAY_CONNECT = 0x06
RELAY_CONNECT_RESP = 0x07
CIRCUIT_OPEN = 0x08
CIRCUIT_DATA = 0x09
CIRCUIT_CLOSE = 0x0A
RESERVE_CANCEL = 0x0B
PUNCH_SYNC = 0x0C
PUNCH_SYNC_ACK = 0x0D
DRAIN_MARK = 0x0E

# DHT                                      0x10 - 0x17
DHT_PING = 0x10
DHT_PONG = 0x11
DHT_FIND_NODE = 0x12
DHT_NODES = 0x13
DHT_GET_PROVIDERS = 0x14
DHT_PROVIDERS = 0x15
DHT_ADD_PROVIDER = 0x16
DHT_ACK = 0x17

# Block exchange                           0x20 - 0x25
EXCH_WANT_HAVE = 0x20
EXCH_WANT_BLOCK = 0x21
EXCH_HAVE = 0x22
EXCH_DONT_HAVE = 0x23
EXCH_BLOCK = 0x24
EXCH_CANCEL = 0x25

# CRDT sync                                0x30 - 0x32
CRDT_VV_OFFER = 0x30
CRDT_DELTA = 0x31
CRDT_DELTA_ACK = 0x32

# RPC                                      0x40 - 0x46
RPC_REQUEST = 0x40
RPC_RESPONSE = 0x41
RPC_STREAM_OPEN = 0x42
RPC_STREAM_DATA = 0x43
RPC_STREAM_END = 0x44
RPC_CREDIT = 0x45
RPC_ERROR = 0x46


class WireError(PeermeshError):
    pass


class NeedMoreBytes(WireError):
    """Buffer holds a prefix of a valid frame; feed more bytes and retry."""


class MalformedFrame(WireError):
    """Bytes can never extend to a valid frame."""


class FrameTooLarge(WireError):
    """Declared body length exceeds MAX_FRAME_BODY."""


def encode_varint(value: int) -> bytes:
    """Encode an unsigned integer < 2**64 as LEB128."""
    if value < 0 or value > MAX_VARINT:
        raise ValueError("varint out of range: %r" % (value,))
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_varint(buf, offset: int = 0) -> tuple[int, int]:
    """Decode a LEB128 varint from buf at offset.

    Returns (value, next_offset). Raises NeedMoreBytes on a truncated buffer
    and MalformedFrame when the encoding exceeds 10 bytes or 64 bits.
    """
    value = 0
    shift = 0
    pos = offset
    while True:
        if pos >= len(buf):
            raise NeedMoreBytes("truncated varint")
        byte = buf[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            if value > MAX_VARINT:
                raise MalformedFrame("varint exceeds 64 bits")
            return value, pos
        shift += 7
        if shift >= 70:
            raise MalformedFrame("varint longer than 10 bytes")


def varint_len(value: int) -> int:
    """Encoded size of a varint without building it."""
    if value < 0 or value > MAX_VARINT:
        raise ValueError("varint out of range: %r" % (value,))
    n = 1
    while value > 0x7F:
        value >>= 7
        n += 1
    return n


def encode_frame(msg_type: int, body: bytes) -> bytes:
    """Frame a message: uvarint(1 + len(body)) || msg_type || body."""
    if not 0 <= msg_type <= 0xFF:
        raise ValueError("msg_type out of range")
    if len(body) > MAX_FRAME_BODY:
        raise FrameTooLarge("body of %d bytes exceeds %d" % (len(body), MAX_FRAME_BODY))
    return encode_varint(1 + len(body)) + bytes([msg_type]) + body


def frame_wire_len(body_len: int) -> int:
    """Total bytes a frame with a body of body_len occupies on the wire."""
    return varint_len(1 + body_len) + 1 + body_len


def decode_frame(buf, offset: int = 0) -> tuple[int, bytes, int]:
    """Decode one frame from buf at offset.

    Returns (msg_type, body, next_offset). Raises NeedMoreBytes when the
    buffer holds only a prefix, FrameTooLarge / MalformedFrame on invalid
    declared lengths.
    """
    length, pos = decode_varint(buf, offset)
    if length < 1:
        raise MalformedFrame("frame length %d < 1" % length)
    if length - 1 > MAX_FRAME_BODY:
        raise FrameTooLarge("declared body of %d bytes exceeds %d" % (length - 1, MAX_FRAME_BODY))
    if pos + length > len(buf):
        raise NeedMoreBytes("frame needs %d more bytes" % (pos + length - len(buf)))
    msg_type = buf[pos]
    body = bytes(buf[pos + 1 : pos + length])
    return msg_type, body, pos + length


class FrameDecoder:
    """Incremental frame reassembler for byte-stream transports.

    Feed arbitrary chunks; drain complete frames. Malformed input raises and
    poisons the decoder (a stream that produced garbage cannot resync).
    """

    def __init__(self):
        self._buf = bytearray()
        self._dead = False

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        if self._dead:
            raise MalformedFrame("decoder already failed")
        self._buf.extend(data)
        frames = []
        offset = 0
        while True:
            try:
                msg_type, body, offset = decode_frame(self._buf, offset)
            except NeedMoreBytes:
                break
            except WireError:
                self._dead = True
                raise
            frames.append((msg_type, body))
        del self._buf[:offset]
        return frames


class Writer:
    """Accumulates length-prefixed fields for a frame body."""

    def __init__(self):
        self._parts = []

    def u64(self, value: int) -> "Writer":
        self._parts.append(encode_varint(value))
        return self

    def raw(self, data: bytes) -> "Writer":
        self._parts.append(data)
        return self

    def blob(self, data: bytes) -> "Writer":
        """varint(len) || bytes"""
        self._parts.append(encode_varint(len(data)))
        self._parts.append(data)
        return self

    def text(self, s: str) -> "Writer":
        return self.blob(s.encode("utf-8"))

    def byte(self, value: int) -> "Writer":
        self._parts.append(bytes([value]))
        return self

    def done(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    """Sequential field reader over a frame body; errors as MalformedFrame."""

    def __init__(self, body: bytes):
        self._buf = body
        self._pos = 0

    def u64(self) -> int:
        try:
            value, self._pos = decode_varint(self._buf, self._pos)
        except NeedMoreBytes:
            raise MalformedFrame("truncated field")
        return value

    def raw(self, n: int) -> bytes:
        if self._pos + n > len(self._buf):
            raise MalformedFrame("truncated field")
        out = self._buf[self._pos : self._pos + n]
        self._pos += n
        return out

    def blob(self) -> bytes:
        return self.raw(self.u64())

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedFrame("field is not valid utf-8")

    def byte(self) -> int:
        return self.raw(1)[0]

    def rest(self) -> bytes:
        out = self._buf[self._pos :]
        self._pos = len(self._buf)
        return out

    def at_end(self) -> bool:
        return self._pos == len(self._buf)
