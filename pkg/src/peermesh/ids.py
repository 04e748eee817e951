"""Identities and content identifiers.

PeerId   := SHA-256(public key bytes), 32 bytes.
           Text form: "lpid:" + 64 lowercase hex chars.
Cid      := version(0x01) || codec || hash_algo(0x12) || digest_len(0x20) || digest(32)
           exactly 36 bytes. codec 0x00 = raw block, 0x01 = manifest.
           Text form: "lcid:" + 72 lowercase hex chars (hex of the 36 bytes).
Key256   := point in the 256-bit XOR keyspace. For a PeerId the digest itself;
           for a Cid the SHA-256 of its 36-byte encoding; for a text route the
           SHA-256 of its UTF-8 bytes.

Signatures are Ed25519 (64 bytes) over raw message bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import PeermeshError

CID_VERSION = 0x01
CODEC_RAW = 0x00
CODEC_MANIFEST = 0x01
HASH_SHA256 = 0x12
DIGEST_LEN = 0x20
CID_WIRE_LEN = 36

PEER_ID_PREFIX = "lpid:"
CID_PREFIX = "lcid:"


class IdentityError(PeermeshError):
    pass


class InvalidCid(IdentityError):
    """Bytes or text that do not spell a valid content identifier."""


class InvalidCodec(InvalidCid):
    """Unknown codec byte."""


class InvalidPeerId(IdentityError):
    pass


class InvalidKey(IdentityError):
    """Key material of the wrong size or shape."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True, order=True)
class PeerId:
    digest: bytes

    def __post_init__(self):
        if not isinstance(self.digest, bytes) or len(self.digest) != 32:
            raise InvalidPeerId("peer id must be 32 digest bytes")

    @classmethod
    def from_public_key(cls, public_key: bytes) -> "PeerId":
        if len(public_key) != 32:
            raise InvalidKey("ed25519 public key must be 32 bytes")
        return cls(sha256(public_key))

    @classmethod
    def from_text(cls, text: str) -> "PeerId":
        if not text.startswith(PEER_ID_PREFIX):
            raise InvalidPeerId("missing %r prefix" % PEER_ID_PREFIX)
        hexpart = text[len(PEER_ID_PREFIX) :]
        if len(hexpart) != 64 or hexpart != hexpart.lower():
            raise InvalidPeerId("peer id text must be 64 lowercase hex chars")
        try:
            return cls(bytes.fromhex(hexpart))
        except ValueError:
            raise InvalidPeerId("peer id text is not hex")

    @property
    def text(self) -> str:
        return PEER_ID_PREFIX + self.digest.hex()

    def key(self) -> "Key256":
        return Key256(self.digest)

    def __repr__(self):
        return "PeerId(%s...)" % self.digest.hex()[:12]


@dataclass(frozen=True)
class Cid:
    codec: int
    digest: bytes
    version: int = CID_VERSION
    hash_algo: int = HASH_SHA256

    def __post_init__(self):
        if self.version != CID_VERSION:
            raise InvalidCid("unknown cid version 0x%02x" % self.version)
        if self.codec not in (CODEC_RAW, CODEC_MANIFEST):
            raise InvalidCodec("unknown codec 0x%02x" % self.codec)
        if self.hash_algo != HASH_SHA256:
            raise InvalidCid("unknown hash algo 0x%02x" % self.hash_algo)
        if not isinstance(self.digest, bytes) or len(self.digest) != 32:
            raise InvalidCid("cid digest must be 32 bytes")

    def encode(self) -> bytes:
        return bytes([self.version, self.codec, self.hash_algo, DIGEST_LEN]) + self.digest

    @classmethod
    def decode(cls, raw: bytes) -> "Cid":
        if len(raw) != CID_WIRE_LEN:
            raise InvalidCid("cid encoding must be exactly %d bytes" % CID_WIRE_LEN)
        if raw[3] != DIGEST_LEN:
            raise InvalidCid("unknown digest length 0x%02x" % raw[3])
        return cls(version=raw[0], codec=raw[1], hash_algo=raw[2], digest=raw[4:])

    @classmethod
    def from_text(cls, text: str) -> "Cid":
        if not text.startswith(CID_PREFIX):
            raise InvalidCid("missing %r prefix" % CID_PREFIX)
        hexpart = text[len(CID_PREFIX) :]
        if len(hexpart) != 72 or hexpart != hexpart.lower():
            raise InvalidCid("cid text must be 72 lowercase hex chars")
        try:
            raw = bytes.fromhex(hexpart)
        except ValueError:
            raise InvalidCid("cid text is not hex")
        return cls.decode(raw)

    @property
    def text(self) -> str:
        return CID_PREFIX + self.encode().hex()

    def key(self) -> "Key256":
        return Key256(sha256(self.encode()))

    def __repr__(self):
        return "Cid(codec=%d, %s...)" % (self.codec, self.digest.hex()[:12])


def compute_cid(data: bytes, codec: int = CODEC_RAW) -> Cid:
    """Content identifier of a blob: tag bytes + SHA-256 digest."""
    return Cid(codec=codec, digest=sha256(data))


@dataclass(frozen=True, order=True)
class Key256:
    """A point in the 256-bit XOR metric space."""

    raw: bytes

    def __post_init__(self):
        if not isinstance(self.raw, bytes) or len(self.raw) != 32:
            raise InvalidKey("key must be 32 bytes")

    @classmethod
    def of_text(cls, text: str) -> "Key256":
        return cls(sha256(text.encode("utf-8")))

    @property
    def value(self) -> int:
        return int.from_bytes(self.raw, "big")

    def __repr__(self):
        return "Key256(%s...)" % self.raw.hex()[:12]


def xor_distance(a: Key256, b: Key256) -> Key256:
    """XOR metric: symmetric, zero iff equal, unidirectional."""
    return Key256(bytes(x ^ y for x, y in zip(a.raw, b.raw)))


def distance_int(a: Key256, b: Key256) -> int:
    return a.value ^ b.value


def shared_prefix_len(a: Key256, b: Key256) -> int:
    """Number of leading bits the two keys share (256 when equal)."""
    d = a.value ^ b.value
    if d == 0:
        return 256
    return 256 - d.bit_length()


@dataclass(frozen=True)
class Keypair:
    """Ed25519 keypair; signatures are 64 bytes, deterministic."""

    public: bytes
    secret: bytes = field(repr=False)

    @classmethod
    def generate(cls, rng=None) -> "Keypair":
        """Fresh keypair; pass a seeded random.Random for reproducible identities."""
        if rng is None:
            priv = Ed25519PrivateKey.generate()
        else:
            priv = Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
        return cls._from_private(priv)

    @classmethod
    def from_secret(cls, secret: bytes) -> "Keypair":
        if len(secret) != 32:
            raise InvalidKey("ed25519 secret must be 32 bytes")
        return cls._from_private(Ed25519PrivateKey.from_private_bytes(secret))

    @classmethod
    def _from_private(cls, priv: Ed25519PrivateKey) -> "Keypair":
        public = priv.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        secret = priv.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )
        return cls(public=public, secret=secret)

    @property
    def peer_id(self) -> PeerId:
        return PeerId.from_public_key(self.public)

    def sign(self, message: bytes) -> bytes:
        priv = Ed25519PrivateKey.from_private_bytes(self.secret)
        return priv.sign(message)


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """True iff signature is valid for message under public_key."""
    if len(public_key) != 32 or len(signature) != 64:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False
