"""Unary calls, credit-gated streams, and shard failover."""

import hashlib
import random

import pytest

from peermesh import wire
from peermesh.dht import ProviderRecord
from peermesh.futures import Future
from peermesh.ids import Keypair, PeerId
from peermesh.rpc import (
    CODE_INTERNAL,
    CODE_UNAVAILABLE,
    CODE_UNKNOWN_ROUTE,
    MAX_UNARY_PAYLOAD,
    AllProvidersFailed,
    DuplicateRoute,
    NoProviders,
    PeerGone,
    RemoteError,
    RpcService,
    StreamReset,
    Timeout,
    Unavailable,
    bench_rpc,
    shard_key,
    shard_route,
)
from peermesh.simnet import LinkProfile, SimNetwork
from peermesh.traversal import ConnectionManager, TraversalConfig

from .meshes import build_nodes, settle

WINDOW = 16
FRAME_CAP = 16 * 1024


def rpc_node(net, link=None):
    host = net.add_node(link=link)
    cfg = TraversalConfig(sign_hellos=False, auto_renew_reservation=False)
    mgr = ConnectionManager(host, Keypair.generate(host.rng), cfg)
    mgr.start()
    return mgr, RpcService(mgr)


def rpc_pair(net, link_a=None, link_b=None):
    mgr_a, svc_a = rpc_node(net, link_a)
    mgr_b, svc_b = rpc_node(net, link_b)
    settle(net, mgr_a.connect_addr(mgr_b.host.address, expect=mgr_b.peer_id))
    return (mgr_a, svc_a), (mgr_b, svc_b)


def env(call_id, route=b"", flags=0, payload=b""):
    w = wire.Writer()
    w.u64(call_id)
    w.blob(route)
    w.byte(flags)
    w.raw(payload)
    return w.done()


def envelope_of(body):
    r = wire.Reader(body)
    return r.u64(), r.blob(), r.byte(), r.rest()


def tap_sends(conn):
    rec = []
    orig = conn.send

    def wrapped(msg_type, body):
        rec.append((msg_type, body))
        orig(msg_type, body)

    conn.send = wrapped
    return rec


def ids_of(rec, msg_type):
    return [envelope_of(body)[0] for t, body in rec if t == msg_type]


def tap_inbound(mgr, drop=None, observe=None):
    """Wrap the rpc dispatch registered on this manager.

    ``drop(t, body) -> True`` makes a frame vanish as if lost in flight;
    ``observe(t, body)`` sees every frame that is about to be processed.
    """
    for i, (lo, hi, fn) in enumerate(mgr._handlers):
        if lo == wire.RPC_REQUEST and hi == wire.RPC_ERROR:
            def wrapped(conn, t, body, _fn=fn):
                if drop is not None and drop(t, body):
                    return
                if observe is not None:
                    observe(t, body)
                _fn(conn, t, body)

            mgr._handlers[i] = (lo, hi, wrapped)
            return
    raise AssertionError("no rpc handler on this manager")


def drop_first_requests(mgr, n):
    seen = {"n": 0}

    def drop(t, body):
        if t == wire.RPC_REQUEST and seen["n"] < n:
            seen["n"] += 1
            return True
        return False

    tap_inbound(mgr, drop=drop)
    return seen


def assert_flow_invariant(events, window=WINDOW):
    """Replay a (data sent | credit received) trace against the budget."""
    sent = credited = 0
    for kind, amount in events:
        if kind == "data":
            sent += 1
            assert sent - credited <= window, events
        else:
            credited += amount


def watch_flow(mgr_sender, conn_out):
    """Trace data-frame emissions and credit arrivals on the sending side."""
    events = []
    orig = conn_out.send

    def sending(t, body):
        if t == wire.RPC_STREAM_DATA:
            events.append(("data", 1))
        orig(t, body)

    conn_out.send = sending

    def arriving(t, body):
        if t == wire.RPC_CREDIT:
            payload = envelope_of(body)[3]
            events.append(("credit", wire.Reader(payload).u64()))

    tap_inbound(mgr_sender, observe=arriving)
    return events


def make_sink(net, fin):
    """Stream handler that drains eagerly and resolves fin with the bytes."""
    chunks = []

    def sink(handle):
        def pump(f):
            data = f.result()
            if data == b"":
                fin.set_result(b"".join(chunks))
                return
            chunks.append(data)
            handle.recv().add_done_callback(pump)

        handle.recv().add_done_callback(pump)

    return sink


# --- unary calls --------------------------------------------------------------


def test_echo_returns_identical_bytes():
    net = SimNetwork(seed=901)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    svc_b.register_handler("echo", lambda payload, conn: payload)
    payload = hashlib.sha256(b"echo-payload").digest() * 4  # 128 bytes
    got = settle(net, svc_a.call_unary(mgr_b.peer_id, "echo", payload))
    assert got == payload


def test_unknown_route_answers_with_error_code():
    net = SimNetwork(seed=902)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    with pytest.raises(RemoteError) as ei:
        settle(net, svc_a.call_unary(mgr_b.peer_id, "missing", b"q"))
    assert ei.value.code == CODE_UNKNOWN_ROUTE


def test_handler_exception_answers_internal_and_keeps_connection():
    net = SimNetwork(seed=903)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)

    def boom(payload, conn):
        raise ValueError("oops")

    svc_b.register_handler("boom", boom)
    svc_b.register_handler("echo", lambda payload, conn: payload)
    conn_before = mgr_a.conns[mgr_b.peer_id]
    with pytest.raises(RemoteError) as ei:
        settle(net, svc_a.call_unary(mgr_b.peer_id, "boom", b""))
    assert ei.value.code == CODE_INTERNAL
    assert "ValueError" in ei.value.msg
    assert settle(net, svc_a.call_unary(mgr_b.peer_id, "echo", b"still up")) == b"still up"
    assert mgr_a.conns[mgr_b.peer_id] is conn_before
    assert not conn_before.closed


def test_handler_fault_picks_the_error_code():
    from peermesh.rpc import RpcFault

    net = SimNetwork(seed=904)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)

    def busy(payload, conn):
        raise RpcFault(40, "busy")

    svc_b.register_handler("busy", busy)
    with pytest.raises(RemoteError) as ei:
        settle(net, svc_a.call_unary(mgr_b.peer_id, "busy", b""))
    assert (ei.value.code, ei.value.msg) == (40, "busy")


def test_handler_may_answer_through_a_future():
    net = SimNetwork(seed=905)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)

    def slow(payload, conn):
        fut = Future()
        mgr_b.host.call_later(300_000, lambda: fut.set_result(b"later:" + payload))
        return fut

    svc_b.register_handler("slow", slow)
    assert settle(net, svc_a.call_unary(mgr_b.peer_id, "slow", b"x")) == b"later:x"


def test_idempotent_call_retries_after_lost_request():
    net = SimNetwork(seed=906)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    svc_b.register_handler("echo", lambda payload, conn: payload, idempotent=True)
    rec = tap_sends(mgr_a.conns[mgr_b.peer_id])
    drops = drop_first_requests(mgr_b, 1)
    t0 = net.now_us
    got = settle(net, svc_a.call_unary(mgr_b.peer_id, "echo", b"hi", idempotent=True))
    assert got == b"hi"
    assert drops["n"] == 1
    # one full attempt timeout plus the first backoff must have passed
    assert net.now_us - t0 >= 2_100_000
    ids = ids_of(rec, wire.RPC_REQUEST)
    assert len(ids) == 2
    assert ids[0] != ids[1]  # the retry is a fresh call id


def test_non_idempotent_call_sends_exactly_one_request_ever():
    net = SimNetwork(seed=907)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    svc_b.register_handler("echo", lambda payload, conn: payload)
    rec = tap_sends(mgr_a.conns[mgr_b.peer_id])
    drop_first_requests(mgr_b, 99)
    with pytest.raises(Timeout):
        settle(net, svc_a.call_unary(mgr_b.peer_id, "echo", b"once"))
    net.run(10_000_000)  # nothing may be re-sent later either
    assert len(ids_of(rec, wire.RPC_REQUEST)) == 1


def test_retries_stop_after_max_attempts():
    net = SimNetwork(seed=908)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    svc_b.register_handler("echo", lambda payload, conn: payload)
    rec = tap_sends(mgr_a.conns[mgr_b.peer_id])
    drop_first_requests(mgr_b, 99)
    t0 = net.now_us
    with pytest.raises(Timeout):
        settle(net, svc_a.call_unary(mgr_b.peer_id, "echo", b"x", idempotent=True))
    # three timeouts and two backoffs: 2s + 0.1s + 2s + 0.2s + 2s
    assert net.now_us - t0 >= 6_300_000
    assert len(ids_of(rec, wire.RPC_REQUEST)) == 3


def test_unavailable_fault_retries_quickly_when_idempotent():
    from peermesh.rpc import RpcFault

    net = SimNetwork(seed=909)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    calls = {"n": 0}

    def flaky(payload, conn):
        calls["n"] += 1
        if calls["n"] == 1:
            raise RpcFault(CODE_UNAVAILABLE, "warming up")
        return payload

    svc_b.register_handler("flaky", flaky)
    t0 = net.now_us
    got = settle(net, svc_a.call_unary(mgr_b.peer_id, "flaky", b"q", idempotent=True))
    assert got == b"q"
    assert calls["n"] == 2
    # driven by the error answer and backoff, not by a 2 s timeout
    assert net.now_us - t0 < 1_000_000

    calls["n"] = 0
    with pytest.raises(Unavailable):
        settle(net, svc_a.call_unary(mgr_b.peer_id, "flaky", b"q"))
    assert calls["n"] == 1


def test_call_ids_split_by_dialer_parity():
    net = SimNetwork(seed=910)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    svc_a.register_handler("who", lambda payload, conn: b"a")
    svc_b.register_handler("who", lambda payload, conn: b"b")
    conn_ab = mgr_a.conns[mgr_b.peer_id]
    conn_ba = mgr_b.conns[mgr_a.peer_id]
    assert conn_ab.initiator and not conn_ba.initiator
    rec_a = tap_sends(conn_ab)
    rec_b = tap_sends(conn_ba)
    futs = [
        svc_a.call_unary(mgr_b.peer_id, "who", b""),
        svc_b.call_unary(mgr_a.peer_id, "who", b""),
        svc_a.call_unary(mgr_b.peer_id, "who", b""),
        svc_b.call_unary(mgr_a.peer_id, "who", b""),
    ]
    net.run(1_000_000)
    assert [f.result() for f in futs] == [b"b", b"a", b"b", b"a"]
    assert ids_of(rec_a, wire.RPC_REQUEST) == [1, 3]
    assert ids_of(rec_b, wire.RPC_REQUEST) == [2, 4]


def test_route_and_payload_limits_are_checked_upfront():
    net = SimNetwork(seed=911)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    with pytest.raises(ValueError):
        svc_a.call_unary(mgr_b.peer_id, "r" * 129, b"")
    with pytest.raises(ValueError):
        svc_a.call_unary(mgr_b.peer_id, "ok", bytes(MAX_UNARY_PAYLOAD + 1))
    with pytest.raises(ValueError):
        svc_a.register_handler("r" * 129, lambda p, c: p)


def test_duplicate_routes_rejected_per_registry():
    net = SimNetwork(seed=912)
    _, svc = rpc_node(net)
    svc.register_handler("r", lambda p, c: p)
    with pytest.raises(DuplicateRoute):
        svc.register_handler("r", lambda p, c: p)
    svc.register_stream("r", lambda h: None)  # separate namespace
    with pytest.raises(DuplicateRoute):
        svc.register_stream("r", lambda h: None)


def test_oversized_or_nonbytes_handler_answers_become_internal_errors():
    net = SimNetwork(seed=913)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    svc_b.register_handler("big", lambda p, c: bytes(MAX_UNARY_PAYLOAD + 1))
    svc_b.register_handler("wrong", lambda p, c: 42)
    with pytest.raises(RemoteError) as ei:
        settle(net, svc_a.call_unary(mgr_b.peer_id, "big", b""))
    assert ei.value.code == CODE_INTERNAL
    with pytest.raises(RemoteError) as ei:
        settle(net, svc_a.call_unary(mgr_b.peer_id, "wrong", b""))
    assert ei.value.code == CODE_INTERNAL
    assert "int" in ei.value.msg


def test_malformed_rpc_frame_closes_the_connection():
    net = SimNetwork(seed=914)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    mgr_a.conns[mgr_b.peer_id].send(wire.RPC_REQUEST, b"\x80")  # cut varint
    net.run(1_000_000)
    assert mgr_b.peer_id not in mgr_a.conns
    assert mgr_a.peer_id not in mgr_b.conns


def test_stale_response_is_ignored():
    net = SimNetwork(seed=915)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    svc_b.register_handler("echo", lambda payload, conn: payload)
    mgr_b.conns[mgr_a.peer_id].send(wire.RPC_RESPONSE, env(99, payload=b"ghost"))
    net.run(500_000)
    assert not mgr_a.conns[mgr_b.peer_id].closed
    assert settle(net, svc_a.call_unary(mgr_b.peer_id, "echo", b"ok")) == b"ok"


# --- streams --------------------------------------------------------------


def test_stream_carries_4mib_in_order_under_frame_cap():
    net = SimNetwork(seed=916)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    fin = Future()
    svc_b.register_stream("sink", make_sink(net, fin))
    rec = tap_sends(mgr_a.conns[mgr_b.peer_id])
    data = random.Random(916).randbytes(4 * 1024 * 1024)
    h = svc_a.open_stream(mgr_b.peer_id, "sink")
    for i in range(0, len(data), 256 * 1024):
        h.send(data[i:i + 256 * 1024])
    h.end()
    assert settle(net, fin) == data
    frames = [envelope_of(body)[3] for t, body in rec if t == wire.RPC_STREAM_DATA]
    assert len(frames) == len(data) // FRAME_CAP
    assert all(len(p) <= FRAME_CAP for p in frames)


def test_stalled_consumer_stops_the_sender_at_the_window():
    net = SimNetwork(seed=917)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    handles = []
    svc_b.register_stream("blackhole", handles.append)
    events = watch_flow(mgr_a, mgr_a.conns[mgr_b.peer_id])
    h = svc_a.open_stream(mgr_b.peer_id, "blackhole")
    h.send(bytes(1024 * 1024))  # 64 frames queued, window only allows 16
    net.run(5_000_000)
    assert len([e for e in events if e[0] == "data"]) == WINDOW
    assert h.window == 0
    # draining one grant batch releases exactly that much more
    for _ in range(8):
        handles[0].recv()
    net.run(5_000_000)
    assert len([e for e in events if e[0] == "data"]) == WINDOW + 8
    assert_flow_invariant(events)


def test_receiver_close_resets_the_sender():
    net = SimNetwork(seed=918)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)

    def refuse(handle):
        handle.recv().add_done_callback(lambda f: handle.close(code=9, msg="full"))

    svc_b.register_stream("refuse", refuse)
    h = svc_a.open_stream(mgr_b.peer_id, "refuse")
    h.send(bytes(40_000))
    pending = h.recv()
    net.run(5_000_000)
    assert isinstance(h.error, StreamReset)
    assert h.error.code == 9 and "full" in h.error.msg
    assert isinstance(pending.exception(), StreamReset)
    with pytest.raises(StreamReset):
        h.send(b"more")


def test_stalled_stream_does_not_delay_unary_calls():
    net = SimNetwork(seed=919)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    svc_b.register_stream("blackhole", lambda handle: None)
    svc_b.register_handler("echo", lambda payload, conn: payload)
    h = svc_a.open_stream(mgr_b.peer_id, "blackhole")
    h.send(bytes(1024 * 1024))
    net.run(1_000_000)
    assert h.window == 0  # stream is fully stalled
    t0 = net.now_us
    assert settle(net, svc_a.call_unary(mgr_b.peer_id, "echo", b"fast")) == b"fast"
    assert net.now_us - t0 < 100_000


def test_streams_on_one_connection_are_independent():
    net = SimNetwork(seed=920)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    svc_b.register_stream("blackhole", lambda handle: None)
    fin = Future()
    svc_b.register_stream("sink", make_sink(net, fin))
    rec = tap_sends(mgr_a.conns[mgr_b.peer_id])
    stalled = svc_a.open_stream(mgr_b.peer_id, "blackhole")
    stalled.send(bytes(1024 * 1024))
    data = random.Random(920).randbytes(100_000)
    live = svc_a.open_stream(mgr_b.peer_id, "sink")
    live.send(data)
    live.end()
    assert settle(net, fin) == data
    per_stream = {}
    for t, body in rec:
        if t == wire.RPC_STREAM_DATA:
            call_id = envelope_of(body)[0]
            per_stream[call_id] = per_stream.get(call_id, 0) + 1
    assert per_stream[stalled.call_id] == WINDOW
    assert per_stream[live.call_id] == 7  # ceil(100000 / 16384)


def test_bidirectional_stream_echoes_and_cleans_up():
    net = SimNetwork(seed=921)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)

    def mirror(handle):
        def pump(f):
            data = f.result()
            if data == b"":
                handle.end()
                return
            handle.send(data)
            handle.recv().add_done_callback(pump)

        handle.recv().add_done_callback(pump)

    svc_b.register_stream("mirror", mirror)
    fin = Future()
    echoed = []
    h = svc_a.open_stream(mgr_b.peer_id, "mirror")

    def pump(f):
        data = f.result()
        if data == b"":
            fin.set_result(b"".join(echoed))
            return
        echoed.append(data)
        h.recv().add_done_callback(pump)

    h.recv().add_done_callback(pump)
    sent = [bytes([i]) * 1000 for i in range(5)]
    for piece in sent:
        h.send(piece)
    h.end()
    assert settle(net, fin) == b"".join(sent)
    # both ends finished cleanly, so neither side tracks the stream anymore
    assert svc_a._conn_states[mgr_a.conns[mgr_b.peer_id]].streams == {}
    assert svc_b._conn_states[mgr_b.conns[mgr_a.peer_id]].streams == {}


def test_stream_to_unknown_route_resets_the_handle():
    net = SimNetwork(seed=922)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    h = svc_a.open_stream(mgr_b.peer_id, "nope")
    net.run(1_000_000)
    assert isinstance(h.error, StreamReset)
    assert h.error.code == CODE_UNKNOWN_ROUTE
    with pytest.raises(StreamReset):
        h.send(b"x")
    assert isinstance(h.recv().exception(), StreamReset)


def test_open_stream_needs_an_existing_connection():
    net = SimNetwork(seed=923)
    _, svc = rpc_node(net)
    stranger = PeerId(hashlib.sha256(b"whoever").digest())
    with pytest.raises(PeerGone):
        svc.open_stream(stranger, "sink")


def test_disconnect_fails_calls_and_streams():
    net = SimNetwork(seed=924)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    svc_b.register_stream("blackhole", lambda handle: None)
    svc_b.register_handler("never", lambda payload, conn: Future())
    h = svc_a.open_stream(mgr_b.peer_id, "blackhole")
    call = svc_a.call_unary(mgr_b.peer_id, "never", b"q")
    pending = h.recv()
    net.run(100_000)
    mgr_b.conns[mgr_a.peer_id].close()
    net.run(1_000_000)
    assert isinstance(call.exception(), Unavailable)
    assert isinstance(h.error, PeerGone)
    assert isinstance(pending.exception(), PeerGone)


def test_granted_credit_is_clamped_to_the_window_ceiling():
    net = SimNetwork(seed=925)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    svc_b.register_stream("blackhole", lambda handle: None)
    h = svc_a.open_stream(mgr_b.peer_id, "blackhole")
    net.run(100_000)
    grant = wire.Writer()
    grant.u64(1_000_000)
    mgr_b.conns[mgr_a.peer_id].send(wire.RPC_CREDIT, env(h.call_id, payload=grant.done()))
    net.run(100_000)
    assert h.window == 1024


@pytest.mark.parametrize("seed", range(8))
def test_random_stream_traffic_conserves_bytes_and_window(seed):
    net = SimNetwork(seed=5000 + seed)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    rng = random.Random(seed)
    pace = random.Random(seed * 7 + 1)
    fin = Future()
    chunks = []

    def lazy_sink(handle):
        def take(f):
            data = f.result()
            if data == b"":
                fin.set_result(b"".join(chunks))
                return
            chunks.append(data)
            mgr_b.host.call_later(pace.randrange(0, 30_000),
                                  lambda: handle.recv().add_done_callback(take))

        handle.recv().add_done_callback(take)

    svc_b.register_stream("lazy", lazy_sink)
    events = watch_flow(mgr_a, mgr_a.conns[mgr_b.peer_id])
    h = svc_a.open_stream(mgr_b.peer_id, "lazy")
    pieces = [rng.randbytes(rng.randrange(1, 50_001))
              for _ in range(rng.randrange(5, 25))]
    t = 0
    for piece in pieces:
        t += rng.randrange(0, 20_000)
        mgr_a.host.call_later(t, lambda p=piece: h.send(p))
    mgr_a.host.call_later(t + 1, h.end)
    assert settle(net, fin) == b"".join(pieces)
    assert_flow_invariant(events)


# --- shard calls --------------------------------------------------------------


def shard_mesh(net, count=3):
    nodes = build_nodes(net, count)
    svcs = [RpcService(n.mgr, dht=n.dht) for n in nodes]
    return nodes, svcs


def prefer_provider(net, caller, preferred, other):
    """Give ``preferred`` a measured rtt and make ``other`` an unknown.

    Bootstrap may have left an inbound connection, whose rtt is unmeasured,
    so dialing alone would not pin the order.
    """
    conn = caller.mgr.conns.get(preferred.peer_id)
    if conn is None:
        conn = settle(net, caller.mgr.connect_addr(preferred.host.address,
                                                   expect=preferred.peer_id))
    conn.rtt_us = 500
    other_conn = caller.mgr.conns.get(other.peer_id)
    if other_conn is not None:
        other_conn.close()
        net.run(100_000)


def test_shard_key_is_stable_text_hash():
    assert shard_route("bert", 3) == "rpc:bert/3"
    expected = hashlib.sha256(b"rpc:bert/3").digest()
    assert shard_key("bert", 3).raw == expected


def test_shard_call_reaches_the_single_provider():
    net = SimNetwork(seed=926)
    nodes, svcs = shard_mesh(net)
    settle(net, svcs[1].serve_shard("bert", 0, lambda p, c: b"shard0:" + p))
    # force the dial-on-demand path through the provider record
    conn = nodes[0].mgr.conns.get(nodes[1].peer_id)
    if conn is not None:
        conn.close()
        net.run(100_000)
    out, provider = settle(net, svcs[0].shard_call("bert", 0, b"hello"))
    assert out == b"shard0:hello"
    assert provider == nodes[1].peer_id


def test_shard_call_with_no_providers_sends_no_rpc_traffic():
    net = SimNetwork(seed=927)
    nodes, svcs = shard_mesh(net)
    with pytest.raises(NoProviders):
        settle(net, svcs[0].shard_call("bert", 7, b"q"))
    assert svcs[0]._conn_states == {}


def test_shard_call_fails_over_when_the_preferred_provider_dies():
    net = SimNetwork(seed=928)
    nodes, svcs = shard_mesh(net)
    settle(net, svcs[1].serve_shard("gpt", 3, lambda p, c: b"one"))
    settle(net, svcs[2].serve_shard("gpt", 3, lambda p, c: b"two"))
    prefer_provider(net, nodes[0], nodes[1], nodes[2])
    net.kill(nodes[1].host)
    t0 = net.now_us
    out, provider = settle(net, svcs[0].shard_call("gpt", 3, b"q"))
    assert (out, provider) == (b"two", nodes[2].peer_id)
    assert net.now_us - t0 >= 2_000_000  # a full attempt timeout preceded failover


def test_shard_call_never_takes_a_failed_providers_late_answer():
    net = SimNetwork(seed=929)
    nodes, svcs = shard_mesh(net)
    calls = {"slow": 0, "fast": 0}

    def slow(payload, conn):
        calls["slow"] += 1
        fut = Future()
        nodes[1].mgr.host.call_later(3_000_000, lambda: fut.set_result(b"slow"))
        return fut

    def fast(payload, conn):
        calls["fast"] += 1
        return b"fast"

    settle(net, svcs[1].serve_shard("llama", 1, slow))
    settle(net, svcs[2].serve_shard("llama", 1, fast))
    prefer_provider(net, nodes[0], nodes[1], nodes[2])
    fut = svcs[0].shard_call("llama", 1, b"q")
    out, provider = settle(net, fut)
    assert (out, provider) == (b"fast", nodes[2].peer_id)
    assert calls == {"slow": 1, "fast": 1}
    net.run(5_000_000)  # the late answer lands on a forgotten call id
    assert fut.result() == (b"fast", nodes[2].peer_id)
    assert not nodes[0].mgr.conns[nodes[1].peer_id].closed


def test_shard_call_exhausting_every_provider_reports_it():
    net = SimNetwork(seed=930)
    nodes, svcs = shard_mesh(net)
    settle(net, svcs[1].serve_shard("solo", 0, lambda p, c: b"x"))
    net.kill(nodes[1].host)
    with pytest.raises(AllProvidersFailed) as ei:
        settle(net, svcs[0].shard_call("solo", 0, b"q"))
    assert isinstance(ei.value.__cause__, (Timeout, Unavailable))


def test_provider_ordering_prefers_measured_rtt_and_rotates_ties():
    net = SimNetwork(seed=931)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net)
    known = mgr_b.peer_id
    u1 = PeerId(hashlib.sha256(b"u1").digest())
    u2 = PeerId(hashlib.sha256(b"u2").digest())
    key = shard_key("m", 0)

    def record(pid):
        return ProviderRecord(key, pid, [], 10 ** 12)

    records = [record(u1), record(known), record(u2)]
    assert mgr_a.conns[known].rtt_us is not None
    o1 = [r.provider for r in svc_a._order_providers(records, 1)]
    assert o1 == [known, u2, u1]  # measured rtt first, tie group rotated
    o2 = [r.provider for r in svc_a._order_providers(records, 2)]
    assert o2 == [known, u1, u2]


# --- throughput ---------------------------------------------------------------


PROFILES = [
    LinkProfile(latency_us=50, bytes_per_sec=1_250_000_000),
    LinkProfile(latency_us=500, bytes_per_sec=125_000_000),
    LinkProfile(latency_us=15_000, bytes_per_sec=12_500_000),
    LinkProfile(latency_us=40_000, bytes_per_sec=6_250_000),
]


def bench_once(seed, link, size, concurrency=32, max_calls=300):
    net = SimNetwork(seed=seed)
    (mgr_a, svc_a), (mgr_b, svc_b) = rpc_pair(net, link_a=link, link_b=link)
    fut = bench_rpc(svc_a, svc_b, size, concurrency, 600_000_000,
                    max_calls=max_calls)
    return settle(net, fut)


def test_bench_qps_drops_as_links_get_worse():
    reports = [bench_once(940 + i, link, 128) for i, link in enumerate(PROFILES)]
    qps = [r["qps"] for r in reports]
    assert all(q > 0 for q in qps)
    assert qps[0] > qps[1] > qps[2] > qps[3]
    for r in reports:
        assert 0 < r["p50"] <= r["p99"]


def test_bench_large_payloads_are_slower_on_any_link():
    for i, link in enumerate((PROFILES[0], PROFILES[3])):
        small = bench_once(950 + i, link, 128)
        big = bench_once(960 + i, link, 256 * 1024, max_calls=120)
        assert big["qps"] < small["qps"]


def test_bench_single_call_report_is_sane():
    report = bench_once(970, PROFILES[0], 128, concurrency=1, max_calls=1)
    assert report["qps"] > 0
    assert report["p50"] == report["p99"] > 0
