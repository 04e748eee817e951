"""Block exchange: serving wants, multi-provider sessions, failure paths."""

import random

import pytest

from peermesh import wire
from peermesh.content import InvalidChunkSize, chunk_data, store_object
from peermesh.dht import Contact
from peermesh.exchange import WANT_BLOCK, WANT_HAVE, BlockUnavailable, NoProviders
from peermesh.ids import CODEC_MANIFEST, Keypair, compute_cid
from peermesh.simnet import LinkProfile, SimNetwork
from peermesh.traversal import ConnectionManager, TraversalConfig

from .meshes import LIMIT, MeshNode, build_nodes, settle


def probe(net):
    """A bare transport endpoint that records exchange frames verbatim."""
    host = net.add_node()
    cfg = TraversalConfig(sign_hellos=False, auto_renew_reservation=False)
    mgr = ConnectionManager(host, Keypair.generate(host.rng), cfg)
    mgr.start()
    frames = []
    mgr.add_handler(wire.EXCH_WANT_HAVE, wire.EXCH_CANCEL,
                    lambda conn, t, body: frames.append((t, body)))
    return mgr, frames


def dial(net, mgr, node: MeshNode):
    return settle(net, mgr.connect_addr(node.host.address, expect=node.peer_id))


def want_body(cid, priority=0):
    return wire.Writer().raw(cid.encode()).u64(priority).done()


def seed_object(node: MeshNode, data: bytes, chunk_size: int):
    manifest, _ = chunk_data(data, chunk_size)
    store_object(node.store, data, chunk_size)
    return manifest


# ---------------------------------------------------------------- serving


def test_want_have_answered_from_store():
    net = SimNetwork(seed=40)
    server = MeshNode(net)
    block = b"exchange serving smoke block"
    held = compute_cid(block)
    server.store.put(held, block)
    absent = compute_cid(b"never stored")

    mgr, frames = probe(net)
    conn = dial(net, mgr, server)
    conn.send(wire.EXCH_WANT_HAVE, want_body(held, priority=3))
    conn.send(wire.EXCH_WANT_HAVE, want_body(absent))
    net.run(20_000)

    assert [(t, b) for t, b in frames] == [
        (wire.EXCH_HAVE, held.encode()),
        (wire.EXCH_DONT_HAVE, absent.encode()),
    ]
    wants = server.exchange.remote_wants[mgr.peer_id]
    assert wants[held] == (WANT_HAVE, 3)
    assert wants[absent] == (WANT_HAVE, 0)


def test_want_block_served_or_dont_have():
    net = SimNetwork(seed=41)
    server = MeshNode(net)
    block = bytes(range(200))
    held = compute_cid(block)
    server.store.put(held, block)
    absent = compute_cid(b"still absent")

    mgr, frames = probe(net)
    conn = dial(net, mgr, server)
    conn.send(wire.EXCH_WANT_BLOCK, want_body(held))
    conn.send(wire.EXCH_WANT_BLOCK, want_body(absent))
    net.run(20_000)

    t, body = frames[0]
    assert t == wire.EXCH_BLOCK
    r = wire.Reader(body)
    assert r.raw(36) == held.encode()
    assert r.blob() == block
    assert r.at_end()
    assert frames[1] == (wire.EXCH_DONT_HAVE, absent.encode())
    # the served want is satisfied and forgotten; the unserved one stays open
    wants = server.exchange.remote_wants[mgr.peer_id]
    assert held not in wants
    assert wants[absent] == (WANT_BLOCK, 0)


def test_cancel_clears_remote_wantlist():
    net = SimNetwork(seed=42)
    server = MeshNode(net)
    wanted = compute_cid(b"will be cancelled")

    mgr, _ = probe(net)
    conn = dial(net, mgr, server)
    conn.send(wire.EXCH_WANT_BLOCK, want_body(wanted))
    net.run(20_000)
    assert wanted in server.exchange.remote_wants[mgr.peer_id]

    conn.send(wire.EXCH_CANCEL, wire.Writer().raw(wanted.encode()).done())
    net.run(20_000)
    assert wanted not in server.exchange.remote_wants[mgr.peer_id]


def test_malformed_exchange_frame_closes_connection():
    net = SimNetwork(seed=43)
    server = MeshNode(net)

    mgr, _ = probe(net)
    conn = dial(net, mgr, server)
    conn.send(wire.EXCH_WANT_HAVE, b"\x00\x01\x02")  # far too short for an id
    net.run(50_000)
    assert conn.closed

    conn2 = dial(net, mgr, server)
    trailing = want_body(compute_cid(b"x")) + b"junk"
    conn2.send(wire.EXCH_WANT_HAVE, trailing)
    net.run(50_000)
    assert conn2.closed


def test_unsolicited_block_is_dropped():
    net = SimNetwork(seed=44)
    server = MeshNode(net)
    data = b"pushed without a want"
    cid = compute_cid(data)

    mgr, _ = probe(net)
    conn = dial(net, mgr, server)
    conn.send(wire.EXCH_BLOCK, wire.Writer().raw(cid.encode()).blob(data).done())
    net.run(50_000)

    assert not server.store.has(cid)
    assert not conn.closed  # well-formed traffic, just ignored


# ------------------------------------------------------ publish and fetch


def test_publish_stores_pins_announces():
    net = SimNetwork(seed=45)
    node = MeshNode(net)
    data = random.Random(1).randbytes(10_000)

    root = settle(net, node.exchange.publish(data, chunk_size=4096))
    manifest, _ = chunk_data(data, 4096)
    assert root == manifest.cid()
    assert root in node.store.pinned()
    assert all(node.store.has(c) for c in manifest.chunks)

    records = settle(net, node.dht.find_providers(root.key()))
    assert [r.provider for r in records] == [node.peer_id]


def test_publish_rejects_bad_chunk_size():
    net = SimNetwork(seed=46)
    node = MeshNode(net)
    with pytest.raises(InvalidChunkSize):
        node.exchange.publish(b"data", chunk_size=100)


@pytest.mark.parametrize("size", [0, 1, 4096, 4096 * 3 + 7])
def test_fetch_roundtrip_with_hints(size):
    net = SimNetwork(seed=47 + size)
    provider = MeshNode(net)
    fetcher = MeshNode(net)
    data = random.Random(size).randbytes(size)

    root = settle(net, provider.exchange.publish(data, chunk_size=4096))
    got = settle(net, fetcher.exchange.fetch(root, hint_providers=[provider.contact()]))

    assert got == data
    assert fetcher.store.has(root)
    manifest, _ = chunk_data(data, 4096)
    assert all(fetcher.store.has(c) for c in manifest.chunks)


def test_fetch_via_dht_discovery():
    net = SimNetwork(seed=48)
    nodes = build_nodes(net, 6)
    data = random.Random(2).randbytes(30_000)

    root = settle(net, nodes[2].exchange.publish(data, chunk_size=4096))
    got = settle(net, nodes[5].exchange.fetch(root))

    assert got == data
    # every want was either served or cancelled, on both ends
    assert nodes[2].exchange.remote_wants.get(nodes[5].peer_id, {}) == {}


def test_refetch_serves_from_local_store():
    net = SimNetwork(seed=49)
    provider = MeshNode(net)
    fetcher = MeshNode(net)
    data = random.Random(3).randbytes(12_000)

    root = settle(net, provider.exchange.publish(data, chunk_size=4096))
    settle(net, fetcher.exchange.fetch(root, hint_providers=[provider.contact()]))

    before = net.now_us
    again = settle(net, fetcher.exchange.fetch(root, hint_providers=[provider.contact()]))
    assert again == data
    assert net.now_us == before  # no network round trips at all
    assert fetcher.exchange.last_session.served_by == {}


# ----------------------------------------------------------- scheduling


def test_three_providers_share_load():
    net = SimNetwork(seed=50)
    a, b, c = (MeshNode(net) for _ in range(3))
    fetcher = MeshNode(net)
    data = random.Random(4).randbytes(4096 * 12)

    root = settle(net, a.exchange.publish(data, chunk_size=4096))
    for other in (b, c):
        settle(net, other.exchange.fetch(root, hint_providers=[a.contact()]))

    hints = [a.contact(), b.contact(), c.contact()]
    got = settle(net, fetcher.exchange.fetch(root, hint_providers=hints))
    assert got == data

    session = fetcher.exchange.last_session
    # 12 chunks split 4/4/4; the manifest itself came from the first hint
    assert sorted(session.served_by.values()) == [4, 4, 5]


def attach_pump_audit(session, cap):
    """Post-check each assignment pass: nothing eligible left unassigned."""
    orig = session._pump
    violations = []
    peak = [0]

    def audited():
        orig()
        for cid in session.pending:
            if cid in session.assigned:
                continue
            answers = session.have[cid]
            if not all(p in answers for p in session.providers):
                continue  # not yet assignable
            for p in session.providers:
                if (answers.get(p) == 1 and p not in session.tried[cid]
                        and len(session.outstanding[p]) < cap):
                    violations.append(cid)
                    break
        if session.outstanding:
            peak[0] = max(peak[0], max(len(s) for s in session.outstanding.values()))

    session._pump = audited
    return violations, peak


def test_outstanding_cap_and_work_conservation():
    net = SimNetwork(seed=51)
    provider = MeshNode(net)
    fetcher = MeshNode(net)
    data = random.Random(5).randbytes(4096 * 12)

    root = settle(net, provider.exchange.publish(data, chunk_size=4096))
    fut = fetcher.exchange.fetch(root, hint_providers=[provider.contact()])
    session = fetcher.exchange.last_session
    violations, peak = attach_pump_audit(session, fetcher.exchange.cfg.max_outstanding)

    assert settle(net, fut) == data
    assert violations == []
    # 12 wants against one provider must queue at the cap, not beyond it
    assert peak[0] == fetcher.exchange.cfg.max_outstanding


# -------------------------------------------------------------- failures


def test_graceful_provider_death_reassigns_immediately():
    net = SimNetwork(seed=52)
    p1, p2 = MeshNode(net), MeshNode(net)
    fetcher = MeshNode(net)
    data = random.Random(6).randbytes(65536 * 8)
    manifest = seed_object(p1, data, 65536)
    seed_object(p2, data, 65536)
    root = manifest.cid()

    fut = fetcher.exchange.fetch(
        root, hint_providers=[p1.contact(), p2.contact()])
    start = net.now_us
    net.schedule(8_000, p1.mgr.shutdown)  # mid-transfer, after the HAVE wave
    got = settle(net, fut)

    assert got == data
    session = fetcher.exchange.last_session
    assert p1.peer_id not in session.providers
    # the disconnect reassigned instantly; nothing waited out a deadline
    assert net.now_us - start < 1_000_000


def test_unresponsive_provider_times_out_and_reassigns():
    net = SimNetwork(seed=53)
    hung, live = MeshNode(net), MeshNode(net)
    fetcher = MeshNode(net)
    data = random.Random(7).randbytes(65536 * 8)
    root = seed_object(hung, data, 65536).cid()
    seed_object(live, data, 65536)

    # answers HAVE and serves the manifest, then sits on every chunk want
    orig = hung.exchange._serve_want

    def selective(conn, msg_type, cid, priority):
        if msg_type == wire.EXCH_WANT_BLOCK and cid != root:
            return
        orig(conn, msg_type, cid, priority)

    hung.exchange._serve_want = selective

    start = net.now_us
    got = settle(net, fetcher.exchange.fetch(
        root, hint_providers=[hung.contact(), live.contact()]))

    assert got == data
    session = fetcher.exchange.last_session
    stalled = [c for c, tried in session.tried.items() if hung.peer_id in tried]
    assert len(stalled) == 4  # its round-robin share, all reassigned
    deadline = fetcher.exchange.cfg.want_deadline_us
    assert net.now_us - start >= deadline  # recovery waited out the deadline
    assert hung.peer_id in session.providers  # still ranked, never banned


def test_corrupt_provider_demoted_and_bypassed():
    net = SimNetwork(seed=54)
    honest, liar = MeshNode(net), MeshNode(net)
    fetcher = MeshNode(net)
    data = random.Random(8).randbytes(4096 * 6)
    manifest = seed_object(honest, data, 4096)
    seed_object(liar, data, 4096)
    root = manifest.cid()

    # first chunk lands on the first-ranked provider under round-robin
    victim = manifest.chunks[0]
    liar.store._blocks[victim] = b"\x00" * len(liar.store._blocks[victim])

    hints = [liar.contact(), honest.contact()]  # liar ranks first
    got = settle(net, fetcher.exchange.fetch(root, hint_providers=hints))

    assert got == data
    session = fetcher.exchange.last_session
    assert session.demotions >= 1
    assert liar.peer_id in session.providers  # demoted to the back, not banned
    assert fetcher.store.get(victim) != liar.store._blocks[victim]


def test_partial_provider_dont_have_falls_through():
    net = SimNetwork(seed=55)
    partial, full = MeshNode(net), MeshNode(net)
    fetcher = MeshNode(net)
    data = random.Random(9).randbytes(4096 * 8)
    manifest = seed_object(full, data, 4096)
    seed_object(partial, data, 4096)
    root = manifest.cid()
    for cid in manifest.chunks[::2]:
        assert partial.store.delete(cid)

    hints = [partial.contact(), full.contact()]
    got = settle(net, fetcher.exchange.fetch(root, hint_providers=hints))

    assert got == data
    session = fetcher.exchange.last_session
    assert session.served_by[partial.peer_id] >= 1
    assert session.served_by[full.peer_id] >= 4


def test_missing_chunk_everywhere_fails_naming_it():
    net = SimNetwork(seed=56)
    p1, p2 = MeshNode(net), MeshNode(net)
    fetcher = MeshNode(net)
    data = random.Random(10).randbytes(4096 * 4)
    manifest = seed_object(p1, data, 4096)
    seed_object(p2, data, 4096)
    lost = manifest.chunks[2]
    for node in (p1, p2):
        assert node.store.delete(lost)

    fut = fetcher.exchange.fetch(
        manifest.cid(), hint_providers=[p1.contact(), p2.contact()])
    with pytest.raises(BlockUnavailable) as err:
        settle(net, fut)
    assert err.value.cid == lost


def test_unknown_root_fails_after_trying_all_providers():
    net = SimNetwork(seed=57)
    p1, p2 = MeshNode(net), MeshNode(net)
    fetcher = MeshNode(net)
    root = compute_cid(b"advertised nowhere", CODEC_MANIFEST)

    fut = fetcher.exchange.fetch(
        root, hint_providers=[p1.contact(), p2.contact()])
    with pytest.raises(BlockUnavailable) as err:
        settle(net, fut)
    assert err.value.cid == root


def test_no_providers():
    net = SimNetwork(seed=58)
    fetcher = MeshNode(net)
    root = compute_cid(b"unadvertised", CODEC_MANIFEST)

    with pytest.raises(NoProviders):
        settle(net, fetcher.exchange.fetch(root, hint_providers=[]))

    ghost = MeshNode(net)
    net.kill(ghost.host)
    with pytest.raises(NoProviders):
        settle(net, fetcher.exchange.fetch(
            root, hint_providers=[ghost.contact()]))


def test_no_provider_records_in_dht():
    net = SimNetwork(seed=59)
    nodes = build_nodes(net, 4)
    root = compute_cid(b"never published", CODEC_MANIFEST)

    with pytest.raises(NoProviders):
        settle(net, nodes[1].exchange.fetch(root))


def test_late_block_after_reassignment_cancels_new_assignee():
    net = SimNetwork(seed=60)
    # slow enough that the want deadline fires before its block lands,
    # but its block still lands before the reassigned transfer finishes
    slow = MeshNode(net, link=LinkProfile(latency_us=1_000, bytes_per_sec=128_000))
    backup = MeshNode(net, link=LinkProfile(latency_us=1_000, bytes_per_sec=524_288))
    fetcher = MeshNode(net)
    data = random.Random(11).randbytes(256 * 1024)  # exactly one chunk
    manifest = seed_object(slow, data, 256 * 1024)
    seed_object(backup, data, 256 * 1024)
    chunk = manifest.chunks[0]

    # rank the slow provider first: an existing connection settles before
    # any fresh dial, regardless of link speed
    settle(net, fetcher.mgr.connect_addr(slow.host.address, expect=slow.peer_id))
    hints = [slow.contact(), backup.contact()]
    got = settle(net, fetcher.exchange.fetch(manifest.cid(), hint_providers=hints))

    assert got == data
    session = fetcher.exchange.last_session
    # the slow provider's overdue block was still used when it arrived
    assert session.served_by[slow.peer_id] == 2  # manifest + chunk
    assert session.served_by[backup.peer_id] == 0
    assert session.tried[chunk] == {slow.peer_id}
    # the reassigned peer's want was withdrawn once the block landed
    assert backup.exchange.remote_wants.get(fetcher.peer_id, {}) == {}


def test_four_provider_fetch_beats_single_by_a_wide_margin():
    net = SimNetwork(seed=61)
    sources = [MeshNode(net) for _ in range(4)]
    data = random.Random(12).randbytes(65536 * 32)
    root = settle(net, sources[0].exchange.publish(data, chunk_size=65536))
    for node in sources[1:]:
        settle(net, node.exchange.fetch(root, hint_providers=[sources[0].contact()]))

    single = MeshNode(net)
    t0 = net.now_us
    assert settle(net, single.exchange.fetch(
        root, hint_providers=[sources[0].contact()])) == data
    single_time = net.now_us - t0

    spread = MeshNode(net)
    t0 = net.now_us
    assert settle(net, spread.exchange.fetch(
        root, hint_providers=[s.contact() for s in sources])) == data
    spread_time = net.now_us - t0

    assert spread_time <= 0.35 * single_time