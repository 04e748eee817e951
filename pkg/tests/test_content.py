"""Chunking, manifests, and block stores."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from .oracles import leb128_encode, sha256_hex
from peermesh.content import (
    BadManifest,
    Block,
    BlockStore,
    CidMismatch,
    CorruptBlock,
    FsBlockStore,
    InvalidChunkSize,
    Manifest,
    MissingBlock,
    NotFound,
    TooManyChunks,
    assemble,
    chunk_data,
    store_object,
)
from peermesh.ids import CODEC_MANIFEST, CODEC_RAW, Cid, compute_cid

KIB = 1024
MIB = 1024 * 1024


def fill_store(data: bytes, chunk_size=256 * KIB, capacity=None):
    store = BlockStore(capacity_bytes=capacity)
    root = store_object(store, data, chunk_size)
    return store, root


# --- chunking ---

def test_empty_payload_has_no_blocks():
    manifest, blocks = chunk_data(b"")
    assert manifest.total_len == 0 and manifest.chunks == ()
    assert blocks == []
    store = BlockStore()
    store.put(manifest.cid(), manifest.encode())
    assert assemble(store, manifest.cid()) == b""


def test_exact_mib_splits_into_four_full_blocks():
    manifest, blocks = chunk_data(bytes(MIB))
    assert len(blocks) == 4
    assert all(len(b.data) == 256 * KIB for b in blocks)


def test_one_extra_byte_adds_a_block_and_changes_the_root():
    even, _ = chunk_data(bytes(MIB))
    odd, blocks = chunk_data(bytes(MIB + 1))
    assert len(blocks) == 5 and len(blocks[-1].data) == 1
    assert even.cid() != odd.cid()


def test_chunk_size_limits_enforced():
    for bad in (0, 512, KIB - 1, 256 * KIB + 1, MIB):
        with pytest.raises(InvalidChunkSize):
            chunk_data(b"x", bad)


def test_chunk_count_cap_enforced():
    with pytest.raises(TooManyChunks):
        chunk_data(bytes(64 * KIB * KIB + 1), KIB)


def test_same_input_same_root():
    rng = random.Random(5)
    data = rng.randbytes(3 * MIB)
    assert chunk_data(data)[0].cid() == chunk_data(data)[0].cid()


@settings(max_examples=30, deadline=None)
@given(st.binary(max_size=40 * KIB), st.integers(1, 8))
def test_round_trip_any_payload(data, kib):
    store, root = fill_store(data, chunk_size=kib * KIB)
    assert assemble(store, root) == data


def test_round_trip_3_mib():
    data = random.Random(6).randbytes(3 * MIB)
    store, root = fill_store(data)
    assert assemble(store, root) == data


def test_single_bit_flip_changes_root():
    rng = random.Random(7)
    data = bytearray(rng.randbytes(64 * KIB))
    base = chunk_data(bytes(data), 4 * KIB)[0].cid()
    for _ in range(12):
        pos = rng.randrange(len(data))
        bit = 1 << rng.randrange(8)
        data[pos] ^= bit
        assert chunk_data(bytes(data), 4 * KIB)[0].cid() != base
        data[pos] ^= bit


def test_shared_regions_are_stored_once():
    rng = random.Random(8)
    shared = rng.randbytes(512 * KIB)
    a = shared + rng.randbytes(256 * KIB)
    b = shared + rng.randbytes(256 * KIB)
    store = BlockStore()
    store_object(store, a)
    raw_after_a = sum(1 for c in store.cids() if c.codec == CODEC_RAW)
    store_object(store, b)
    raw_after_b = sum(1 for c in store.cids() if c.codec == CODEC_RAW)
    assert raw_after_a == 3
    assert raw_after_b == 4  # the two shared chunks were not stored again


# --- manifest codec ---

def test_manifest_golden_vectors(testdata_dir=None):
    from pathlib import Path
    path = Path(__file__).resolve().parent.parent / "testdata" / "manifest_vectors.txt"
    rows = [ln.split() for ln in path.read_text().splitlines()
            if ln and not ln.startswith("#")]
    assert rows
    for _, total, chunk, _, enc_hex, root_text in rows:
        manifest, _ = chunk_data(bytes(int(total)), int(chunk))
        assert manifest.encode().hex() == enc_hex
        assert manifest.cid().text == root_text


def test_manifest_decode_round_trip():
    manifest, _ = chunk_data(random.Random(9).randbytes(10 * KIB), KIB)
    again = Manifest.decode(manifest.encode())
    assert again == manifest
    assert again.cid() == manifest.cid()


def test_manifest_rejects_malformed():
    manifest, _ = chunk_data(bytes(4 * KIB), KIB)
    good = manifest.encode()
    with pytest.raises(BadManifest):
        Manifest.decode(good + b"\x00")  # trailing byte
    with pytest.raises(BadManifest):
        Manifest.decode(good[:-1])  # truncated digest
    with pytest.raises(BadManifest):
        Manifest.decode(leb128_encode(100) + leb128_encode(0) + leb128_encode(0))
    with pytest.raises(BadManifest):
        Manifest(total_len=KIB, chunk_size=KIB, chunks=())  # count mismatch


# --- store semantics ---

def test_put_get_has_delete():
    store = BlockStore()
    b = Block.from_data(b"some bytes")
    assert not store.has(b.cid)
    store.put(b.cid, b.data)
    assert store.has(b.cid)
    assert store.get(b.cid) == b.data
    assert store.delete(b.cid) and not store.delete(b.cid)
    with pytest.raises(NotFound):
        store.get(b.cid)


def test_put_rejects_mismatched_bytes():
    store = BlockStore()
    b = Block.from_data(b"honest")
    with pytest.raises(CidMismatch):
        store.put(b.cid, b"tampered")
    with pytest.raises(CidMismatch):
        Block(b.cid, b"tampered")


def test_missing_chunk_named_exactly():
    data = random.Random(10).randbytes(10 * KIB)
    store, root = fill_store(data, chunk_size=KIB)
    victim = Manifest.decode(store.get(root)).chunks[4]
    store.delete(victim)
    with pytest.raises(MissingBlock) as err:
        assemble(store, root)
    assert err.value.cids == [victim]


def test_corrupt_chunk_detected_on_assembly():
    data = random.Random(11).randbytes(6 * KIB)
    store, root = fill_store(data, chunk_size=2 * KIB)
    victim = Manifest.decode(store.get(root)).chunks[1]
    flipped = bytearray(store.get(victim))
    flipped[100] ^= 0x20
    store._blocks[victim] = bytes(flipped)  # corrupt behind the integrity gate
    with pytest.raises(CorruptBlock) as err:
        assemble(store, root)
    assert err.value.cid == victim


def test_assemble_requires_manifest_codec():
    store = BlockStore()
    b = Block.from_data(b"raw leaf")
    store.put(b.cid, b.data)
    with pytest.raises(BadManifest):
        assemble(store, b.cid)


# --- pinning and eviction ---

def test_pinned_object_survives_pressure():
    rng = random.Random(12)
    store = BlockStore(capacity_bytes=8 * KIB)
    root = store_object(store, rng.randbytes(4 * KIB), KIB)
    store.pin(root)
    for _ in range(20):
        store.put(*block_of(rng.randbytes(KIB)))
    assert store.size_bytes <= 8 * KIB
    assert assemble(store, root) == assemble(store, root)  # still intact
    store.unpin(root)
    for _ in range(8):
        store.put(*block_of(rng.randbytes(KIB)))
    with pytest.raises((MissingBlock, NotFound)):
        assemble(store, root)


def block_of(data):
    b = Block.from_data(data)
    return b.cid, b.data


def test_eviction_is_least_recently_used():
    store = BlockStore(capacity_bytes=3 * KIB)
    rng = random.Random(13)
    a, b, c = (Block.from_data(rng.randbytes(KIB)) for _ in range(3))
    for blk in (a, b, c):
        store.put(blk.cid, blk.data)
    store.get(a.cid)  # refresh a; b becomes the eviction victim
    d = Block.from_data(rng.randbytes(KIB))
    store.put(d.cid, d.data)
    assert store.has(a.cid) and store.has(c.cid) and store.has(d.cid)
    assert not store.has(b.cid)


def test_evict_without_capacity_is_noop():
    store = BlockStore()
    store.put(*block_of(bytes(10 * KIB)))
    assert store.evict() == 0
    assert len(store) == 1


def test_pin_requires_present_manifest():
    store = BlockStore()
    manifest, _ = chunk_data(bytes(KIB), KIB)
    with pytest.raises(NotFound):
        store.pin(manifest.cid())
    b = Block.from_data(b"leaf")
    store.put(b.cid, b.data)
    with pytest.raises(BadManifest):
        store.pin(b.cid)


def test_only_pinned_data_left_overflows_instead_of_evicting():
    store = BlockStore()
    data = random.Random(17).randbytes(4 * KIB)
    root = store_object(store, data, KIB)
    store.pin(root)
    store.capacity_bytes = 2 * KIB  # budget shrinks under the pinned object
    store.evict()
    assert store.size_bytes > store.capacity_bytes
    assert assemble(store, root) == data


# --- on-disk store ---

def test_fs_store_round_trip_and_layout(tmp_path):
    data = random.Random(14).randbytes(5 * KIB)
    store = FsBlockStore(tmp_path, capacity_bytes=None)
    root = store_object(store, data, KIB)
    assert assemble(store, root) == data
    blocks = list((tmp_path / "blocks").iterdir())
    manifests = list((tmp_path / "manifests").iterdir())
    assert len(blocks) == 5 and len(manifests) == 1
    assert all(len(p.name) == 72 for p in blocks + manifests)
    assert manifests[0].name == root.encode().hex()


def test_fs_store_persists_across_reopen(tmp_path):
    data = random.Random(15).randbytes(3 * KIB)
    store = FsBlockStore(tmp_path)
    root = store_object(store, data, KIB)
    store.pin(root)
    del store
    again = FsBlockStore(tmp_path)
    assert assemble(again, root) == data
    assert again.pinned() == [root]


def test_fs_store_detects_on_disk_corruption(tmp_path):
    data = random.Random(16).randbytes(4 * KIB)
    store = FsBlockStore(tmp_path)
    root = store_object(store, data, KIB)
    victim = Manifest.decode(store.get(root)).chunks[2]
    path = tmp_path / "blocks" / victim.encode().hex()
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptBlock):
        assemble(FsBlockStore(tmp_path), root)


def test_fs_store_ignores_foreign_files(tmp_path):
    (tmp_path / "blocks").mkdir()
    (tmp_path / "blocks" / "README").write_text("not a block")
    store = FsBlockStore(tmp_path)
    assert len(store) == 0
