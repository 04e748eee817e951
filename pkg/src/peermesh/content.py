"""Chunking, manifests, and block storage.

Payloads are split into fixed-size chunks, each addressed by the hash
of its bytes.  A manifest lists the chunk ids in order plus the total
length; the manifest's own serialization is content-addressed too, so
one root id names the whole object and any replica can verify every
byte it receives.  Manifests are flat: a single level with at most
64 Ki chunks bounds objects near 16 GiB, far beyond desk scale, and
keeps verification a straight walk instead of a tree descent.

Fixed-size chunking is deliberate.  Content-defined chunking buys
insertion-resistant dedup at the cost of a rolling-hash parameter
space that has to be pinned down for interoperability; nothing here
needs that, and fixed offsets make manifests trivially checkable.

Stores keep immutable blocks keyed by id and evict least recently
used unpinned blocks once a byte budget is exceeded.  Pinning a
manifest protects it and every chunk it references.  The on-disk
variant lays blocks out one file per id so two implementations can
share a directory: raw chunks under ``blocks/``, manifests under
``manifests/``, each named by the full id in hex.
"""

from __future__ import annotations

import os
from collections import OrderedDict
from dataclasses import dataclass

from . import wire
from .errors import PeermeshError
from .ids import CODEC_MANIFEST, CODEC_RAW, Cid, compute_cid, sha256

KIB = 1024
DEFAULT_CHUNK_SIZE = 256 * KIB
MIN_CHUNK_SIZE = 1 * KIB
MAX_CHUNK_SIZE = 256 * KIB
MAX_CHUNKS = 64 * 1024


class ContentError(PeermeshError):
    pass


class InvalidChunkSize(ContentError):
    pass


class TooManyChunks(ContentError):
    pass


class NotFound(ContentError):
    def __init__(self, cid: Cid):
        super().__init__("no block %s" % cid.text)
        self.cid = cid


class CidMismatch(ContentError):
    """The integrity gate: stored bytes must hash to the id they claim."""


class MissingBlock(ContentError):
    def __init__(self, cids: list):
        super().__init__("missing %d block(s): %s" % (
            len(cids), ", ".join(c.text for c in cids[:3])))
        self.cids = list(cids)


class CorruptBlock(ContentError):
    def __init__(self, cid: Cid):
        super().__init__("stored bytes do not match %s" % cid.text)
        self.cid = cid


class BadManifest(ContentError):
    pass


@dataclass(frozen=True)
class Block:
    cid: Cid
    data: bytes

    def __post_init__(self):
        if len(self.data) > MAX_CHUNK_SIZE:
            raise ContentError("block exceeds %d bytes" % MAX_CHUNK_SIZE)
        if compute_cid(self.data, self.cid.codec) != self.cid:
            raise CidMismatch("block bytes do not hash to the claimed id")

    @classmethod
    def from_data(cls, data: bytes) -> "Block":
        return cls(compute_cid(data, CODEC_RAW), data)


@dataclass(frozen=True)
class Manifest:
    """Ordered chunk listing with a canonical, re-hashable serialization."""

    total_len: int
    chunk_size: int
    chunks: tuple

    def __post_init__(self):
        if self.chunk_size < 1:
            raise BadManifest("chunk_size must be positive")
        expect = -(-self.total_len // self.chunk_size)
        if len(self.chunks) != expect:
            raise BadManifest("chunk count %d does not cover %d bytes at %d per chunk"
                              % (len(self.chunks), self.total_len, self.chunk_size))
        if len(self.chunks) > MAX_CHUNKS:
            raise TooManyChunks("%d chunks exceeds the %d cap"
                                % (len(self.chunks), MAX_CHUNKS))

    def encode(self) -> bytes:
        # Field order is fixed: total_len, chunk_size, count, digests.
        w = wire.Writer().u64(self.total_len).u64(self.chunk_size).u64(len(self.chunks))
        for c in self.chunks:
            w.raw(c.digest)
        return w.done()

    @classmethod
    def decode(cls, raw: bytes) -> "Manifest":
        try:
            r = wire.Reader(raw)
            total_len = r.u64()
            chunk_size = r.u64()
            count = r.u64()
            if count > MAX_CHUNKS:
                raise TooManyChunks("%d chunks exceeds the %d cap" % (count, MAX_CHUNKS))
            chunks = tuple(Cid(CODEC_RAW, r.raw(32)) for _ in range(count))
            if not r.at_end():
                raise BadManifest("trailing bytes after chunk digests")
        except wire.WireError as err:
            raise BadManifest(str(err)) from err
        return cls(total_len, chunk_size, chunks)

    def cid(self) -> Cid:
        return compute_cid(self.encode(), CODEC_MANIFEST)

    def chunk_span(self, index: int) -> int:
        """Expected byte length of the chunk at ``index``."""
        if index < len(self.chunks) - 1:
            return self.chunk_size
        return self.total_len - self.chunk_size * (len(self.chunks) - 1)


def chunk_data(data: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE):
    """Split ``data`` into fixed-size blocks plus the manifest naming them."""
    if not MIN_CHUNK_SIZE <= chunk_size <= MAX_CHUNK_SIZE:
        raise InvalidChunkSize("chunk_size %d outside [%d, %d]"
                               % (chunk_size, MIN_CHUNK_SIZE, MAX_CHUNK_SIZE))
    if -(-len(data) // chunk_size) > MAX_CHUNKS:
        raise TooManyChunks("payload needs more than %d chunks" % MAX_CHUNKS)
    blocks = [Block.from_data(data[off:off + chunk_size])
              for off in range(0, len(data), chunk_size)]
    manifest = Manifest(len(data), chunk_size, tuple(b.cid for b in blocks))
    return manifest, blocks


def store_object(store, data: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE) -> Cid:
    """Chunk, store the blocks and manifest, and return the root id."""
    manifest, blocks = chunk_data(data, chunk_size)
    for b in blocks:
        store.put(b.cid, b.data)
    root = manifest.cid()
    store.put(root, manifest.encode())
    return root


def assemble(store, root: Cid) -> bytes:
    """Reassemble the object behind a manifest id, re-verifying every chunk."""
    if root.codec != CODEC_MANIFEST:
        raise BadManifest("root %s is not a manifest id" % root.text)
    if not store.has(root):
        raise MissingBlock([root])
    manifest = Manifest.decode(store.get(root))
    missing = [c for c in manifest.chunks if not store.has(c)]
    if missing:
        raise MissingBlock(missing)
    parts = []
    for i, c in enumerate(manifest.chunks):
        data = store.get(c)
        if sha256(data) != c.digest:
            raise CorruptBlock(c)
        if len(data) != manifest.chunk_span(i):
            # Hash is fine but the length contradicts the manifest, so
            # the manifest itself lies about its layout.
            raise BadManifest("chunk %d has %d bytes, manifest implies %d"
                              % (i, len(data), manifest.chunk_span(i)))
        parts.append(data)
    return b"".join(parts)


class _StoreCore:
    """Shared index, recency, pinning, and eviction logic.

    Subclasses provide the byte storage through _save/_load/_drop.
    The index maps cid -> size in least recently used order; every hit
    moves the entry to the tail, so eviction pops from the head.
    """

    def __init__(self, capacity_bytes: int | None = None):
        self.capacity_bytes = capacity_bytes
        self._index: OrderedDict[Cid, int] = OrderedDict()
        self._pins: dict[Cid, frozenset] = {}

    # storage hooks
    def _save(self, cid: Cid, data: bytes) -> None:
        raise NotImplementedError

    def _load(self, cid: Cid) -> bytes:
        raise NotImplementedError

    def _drop(self, cid: Cid) -> None:
        raise NotImplementedError

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, cid: Cid) -> bool:
        return cid in self._index

    def cids(self) -> list:
        return list(self._index)

    @property
    def size_bytes(self) -> int:
        return sum(self._index.values())

    def has(self, cid: Cid) -> bool:
        return cid in self._index

    def put(self, cid: Cid, data: bytes) -> None:
        if compute_cid(data, cid.codec) != cid:
            raise CidMismatch("refusing bytes that do not hash to %s" % cid.text)
        if cid in self._index:
            self._index.move_to_end(cid)
            return
        self._save(cid, data)
        self._index[cid] = len(data)
        self.evict()

    def get(self, cid: Cid) -> bytes:
        if cid not in self._index:
            raise NotFound(cid)
        self._index.move_to_end(cid)
        return self._load(cid)

    def delete(self, cid: Cid) -> bool:
        """Unconditional removal; an explicit delete outranks pinning."""
        if cid not in self._index:
            return False
        del self._index[cid]
        self._drop(cid)
        return True

    def pin(self, root: Cid) -> None:
        if root not in self._index:
            raise NotFound(root)
        if root.codec != CODEC_MANIFEST:
            raise BadManifest("pin target %s is not a manifest id" % root.text)
        manifest = Manifest.decode(self._load(root))
        self._pins[root] = frozenset((root, *manifest.chunks))

    def unpin(self, root: Cid) -> None:
        self._pins.pop(root, None)

    def pinned(self) -> list:
        return list(self._pins)

    def _protected(self) -> set:
        out = set()
        for group in self._pins.values():
            out |= group
        return out

    def evict(self) -> int:
        """Drop least recently used unpinned blocks until under budget."""
        if self.capacity_bytes is None:
            return 0
        freed = 0
        guarded = self._protected()
        while self.size_bytes > self.capacity_bytes:
            victim = next((c for c in self._index if c not in guarded), None)
            if victim is None:
                break  # only pinned data left; overflow beats data loss
            del self._index[victim]
            self._drop(victim)
            freed += 1
        return freed


class BlockStore(_StoreCore):
    """In-memory store; the default for simulations and tests."""

    def __init__(self, capacity_bytes: int | None = None):
        super().__init__(capacity_bytes)
        self._blocks: dict[Cid, bytes] = {}

    def _save(self, cid, data):
        self._blocks[cid] = data

    def _load(self, cid):
        return self._blocks[cid]

    def _drop(self, cid):
        self._blocks.pop(cid, None)


class FsBlockStore(_StoreCore):
    """One file per block under a content directory.

    Layout: ``blocks/<72-char hex id>`` for raw chunks and
    ``manifests/<hex id>`` for manifest serializations, plus a
    ``pins`` file holding one pinned root id per line.  Recency is
    rebuilt from file modification times on open, oldest first.
    """

    def __init__(self, root_dir, capacity_bytes: int | None = None):
        super().__init__(capacity_bytes)
        self.root_dir = str(root_dir)
        for sub in ("blocks", "manifests"):
            os.makedirs(os.path.join(self.root_dir, sub), exist_ok=True)
        self._scan()
        self._load_pins()

    def _path(self, cid: Cid) -> str:
        sub = "manifests" if cid.codec == CODEC_MANIFEST else "blocks"
        return os.path.join(self.root_dir, sub, cid.encode().hex())

    def _pins_path(self) -> str:
        return os.path.join(self.root_dir, "pins")

    def _scan(self) -> None:
        found = []
        for sub in ("blocks", "manifests"):
            base = os.path.join(self.root_dir, sub)
            for name in os.listdir(base):
                try:
                    cid = Cid.decode(bytes.fromhex(name))
                except (ValueError, PeermeshError):
                    continue
                st = os.stat(os.path.join(base, name))
                found.append((st.st_mtime_ns, name, cid, st.st_size))
        for _, _, cid, size in sorted(found):
            self._index[cid] = size

    def _load_pins(self) -> None:
        try:
            with open(self._pins_path(), "r", encoding="utf-8") as fh:
                lines = [ln.strip() for ln in fh if ln.strip()]
        except FileNotFoundError:
            return
        for line in lines:
            try:
                root = Cid.from_text(line)
                if root in self._index:
                    self.pin(root)
            except (PeermeshError, ValueError):
                continue  # stale or foreign entry; dropped on next save

    def _save_pins(self) -> None:
        tmp = self._pins_path() + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for root in self._pins:
                fh.write(root.text + "\n")
        os.replace(tmp, self._pins_path())

    def pin(self, root: Cid) -> None:
        super().pin(root)
        self._save_pins()

    def unpin(self, root: Cid) -> None:
        super().unpin(root)
        self._save_pins()

    def _save(self, cid, data):
        path = self._path(cid)
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)

    def _load(self, cid):
        with open(self._path(cid), "rb") as fh:
            return fh.read()

    def _drop(self, cid):
        try:
            os.remove(self._path(cid))
        except FileNotFoundError:
            pass
