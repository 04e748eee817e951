"""Connectivity: identified connections, relays, hole punching, reachability.

A Connection is a frame pipe to an authenticated peer. Both ends of any new
stream exchange signed HELLOs carrying their public key, listen address, and
the remote's address as they observed it; the observed address is how a NATed
node learns its external mapping.

connect() climbs a ladder:

  1. direct     dial each advertised address
  2. relayed    open a circuit through the callee's relay reservation
  3. upgrade    coordinate over the circuit: if either side is publicly
                dialable the private side simply dials it (Direct); otherwise
                both fire simultaneous datagrams at each other's observed
                endpoints (two attempts, 250 ms apart) and the initiator dials
                through the hole on the first datagram that lands

Punch feasibility falls out of the NAT bindings alone: it works unless both
sides are symmetric, or one is symmetric and the other port-restricted (a
fresh unpredictable source port cannot pass an exact-endpoint filter).

When an upgrade succeeds, each side sends a drain marker on the old path
before switching, and holds frames arriving on the new path until the peer's
marker shows up, so bytes are never lost or reordered across the migration.
Failed upgrades keep the relay circuit; there is no automatic re-attempt.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from . import wire
from .errors import PeermeshError
from .futures import Future
from .ids import Keypair, PeerId, verify_signature

HELLO_CONTEXT = b"PMHELLO1"
PUNCH_MAGIC = b"PM1"
PUNCH_KIND_PUNCH = 0x01
PUNCH_KIND_ACK = 0x02

RELAY_ERR_NOT_A_RELAY = 1
RELAY_ERR_BUSY = 2
RELAY_ERR_UNKNOWN_CIRCUIT = 3


class TraversalError(PeermeshError):
    pass


class Unreachable(TraversalError):
    pass


class HelloTimeout(TraversalError):
    pass


class HelloRejected(TraversalError):
    """Bad signature, key/id mismatch, or malformed HELLO."""


class InsufficientProbes(TraversalError):
    pass


class RelayBusy(TraversalError):
    pass


class NotARelay(TraversalError):
    pass


class UnknownCircuit(TraversalError):
    pass


class NoObservedAddr(TraversalError):
    pass


class PunchFailed(TraversalError):
    pass


class NoRouteToPeer(TraversalError):
    pass


class PeerGone(TraversalError):
    pass


@dataclass
class TraversalConfig:
    """Every traversal timeout in one place, all in virtual microseconds."""

    dial_timeout_us: int = 3_000_000
    hello_timeout_us: int = 3_000_000
    punch_attempts: int = 2
    punch_spacing_us: int = 250_000
    punch_lead_us: int = 500_000
    punch_grace_us: int = 800_000
    reservation_ttl_us: int = 120_000_000
    relay_capacity: int = 64
    probe_quorum: int = 2
    dialback_timeout_us: int = 8_000_000
    sign_hellos: bool = True  # experiments may trade signatures for speed
    auto_renew_reservation: bool = True


class PathKind(Enum):
    DIRECT = "direct"
    HOLE_PUNCHED = "punched"
    RELAYED = "relayed"


# preference order when several paths could exist
_PATH_RANK = {PathKind.DIRECT: 0, PathKind.HOLE_PUNCHED: 1, PathKind.RELAYED: 2}


@dataclass
class ConnectionPath:
    kind: PathKind
    peer: PeerId
    endpoint: tuple | None  # remote address, or None for a relayed circuit


@dataclass
class PeerContact:
    """Everything a dialer may know about how to reach a peer."""

    peer_id: PeerId
    direct: list = field(default_factory=list)  # [(host, port), ...]
    relay: tuple | None = None  # (relay PeerId, relay addr, circuit_id)


@dataclass
class RelayReservation:
    relay: PeerId
    client: PeerId
    circuit_id: int
    expires_at_us: int


class ReachStatus(Enum):
    UNKNOWN = "unknown"
    PUBLIC = "public"
    PRIVATE = "private"


@dataclass
class Reachability:
    status: ReachStatus
    observed: tuple | None = None


@dataclass
class ConnectResult:
    path: ConnectionPath
    conn: "Connection"
    attempts: list = field(default_factory=list)  # [(rung, outcome), ...]


def addr_text(addr: tuple | None) -> str:
    if addr is None:
        return "-"
    return "%s:%d" % (addr[0], addr[1])


def parse_addr(text: str) -> tuple | None:
    if text == "-":
        return None
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise wire.MalformedFrame("bad address %r" % text)
    try:
        host_val: object = int(host)
    except ValueError:
        host_val = host
    return (host_val, int(port))


class RelayedStream:
    """Client-side facade for one circuit: frames ride CIRCUIT_DATA envelopes
    on the client's control connection to the relay."""

    def __init__(self, mgr: "ConnectionManager", relay_conn: "Connection", conn_id: int):
        self.mgr = mgr
        self.relay_conn = relay_conn
        self.conn_id = conn_id
        self.peer_addr = None  # a circuit has no meaningful remote address
        self.closed = False
        self._on_frame = None
        self._on_close = None
        self._pending: list = []

    def on_frame(self, cb):
        self._on_frame = cb
        while self._pending and self._on_frame is cb:
            t, b = self._pending.pop(0)
            cb(t, b)

    def on_close(self, cb):
        self._on_close = cb

    def send_frame(self, msg_type: int, body: bytes) -> None:
        if self.closed:
            return
        inner = wire.encode_frame(msg_type, body)
        self.relay_conn.send(wire.CIRCUIT_DATA, wire.Writer().u64(self.conn_id).raw(inner).done())

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.mgr._drop_circuit(self.relay_conn, self.conn_id, notify_relay=True)

    # network-side entry points
    def _deliver(self, msg_type: int, body: bytes):
        if self.closed:
            return
        if self._on_frame is None:
            self._pending.append((msg_type, body))
        else:
            self._on_frame(msg_type, body)

    def _peer_closed(self):
        if self.closed:
            return
        self.closed = True
        if self._on_close is not None:
            self._on_close()


class Connection:
    """Authenticated frame pipe with transparent path migration."""

    def __init__(self, mgr: "ConnectionManager", stream, peer_id: PeerId,
                 peer_pubkey: bytes, path: ConnectionPath, initiator: bool = False):
        self.mgr = mgr
        self.stream = stream
        self.peer_id = peer_id
        self.peer_pubkey = peer_pubkey
        self.path = path
        # True on the side that dialed; exactly one end of any connection has
        # it, and it survives path migration. Upper layers key id parity on it.
        self.initiator = initiator
        self.peer_is_relay = False
        self.peer_listen: tuple | None = None
        self.punch_attempted = False
        self.closed = False
        self.rtt_us: int | None = None
        self._old_stream = None
        self._old_drained = True
        self._held: list = []
        self._attach(stream)

    def _attach(self, stream):
        stream.on_frame(lambda t, b, s=stream: self._recv(s, t, b))
        stream.on_close(lambda s=stream: self._stream_closed(s))

    def send(self, msg_type: int, body: bytes) -> None:
        if self.closed:
            return
        self.stream.send_frame(msg_type, body)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self._old_stream is not None:
            self._old_stream.close()
        self.stream.close()
        self.mgr._conn_closed(self)

    def migrate(self, new_stream, kind: PathKind, endpoint: tuple | None) -> None:
        """Switch to a better path without losing or reordering frames."""
        self.stream.send_frame(wire.DRAIN_MARK, b"")
        self._old_stream = self.stream
        self._old_drained = False
        self.stream = new_stream
        self.path = ConnectionPath(kind=kind, peer=self.peer_id, endpoint=endpoint)
        self._attach(new_stream)

    def _recv(self, from_stream, msg_type: int, body: bytes):
        if self.closed:
            return
        if msg_type == wire.DRAIN_MARK:
            if from_stream is self._old_stream:
                self._old_drained = True
                old, self._old_stream = self._old_stream, None
                old.close()
                held, self._held = self._held, []
                for t, b in held:
                    self.mgr._dispatch(self, t, b)
            return
        if from_stream is self.stream and not self._old_drained:
            self._held.append((msg_type, body))
            return
        self.mgr._dispatch(self, msg_type, body)

    def _stream_closed(self, stream):
        if stream is self._old_stream:
            # old path died before its drain marker: release held frames
            self._old_stream = None
            self._old_drained = True
            held, self._held = self._held, []
            for t, b in held:
                self.mgr._dispatch(self, t, b)
            return
        if stream is self.stream and not self.closed:
            self.closed = True
            self.mgr._conn_closed(self)


@dataclass
class _Reservation:
    circuit_id: int
    client_conn: Connection
    expires_at_us: int


@dataclass
class _Circuit:
    conn_id: int
    client_conn: Connection
    dialer_stream: object


class _PunchState:
    def __init__(self, peer_id, conn, nonce, initiator):
        self.peer_id = peer_id
        self.conn = conn
        self.nonce = nonce
        self.initiator = initiator
        self.future = Future() if initiator else None
        self.reverse = False  # true when one side is public: plain dial
        self.peer_obs = None
        self.dial_started = False
        self.resolved = False
        self.timers: list = []


class ConnectionManager:
    """Owns every connection of one node plus relay and punch machinery."""

    def __init__(self, host, keypair: Keypair, config: TraversalConfig | None = None,
                 relay_role: bool = False):
        self.host = host
        self.keypair = keypair
        self.peer_id = keypair.peer_id
        self.config = config or TraversalConfig()
        self.relay_role = relay_role
        self.conns: dict[PeerId, Connection] = {}
        self.observed: tuple | None = None  # own external addr per latest HELLO
        self.reachability = Reachability(ReachStatus.UNKNOWN)
        self.reservation: RelayReservation | None = None
        self._renew_timer = None
        self._handlers: list = []  # (lo, hi, fn)
        self._on_connection: list = []
        self._on_disconnect: list = []
        # relay-server state
        self._reservations: dict[int, _Reservation] = {}
        self._circuits: dict[int, _Circuit] = {}
        self._next_conn_id = 0
        # client-side circuit streams: (relay_conn id, conn_id) -> RelayedStream
        self._circuit_streams: dict[tuple, RelayedStream] = {}
        self._punches_by_nonce: dict[int, _PunchState] = {}
        self._punches_by_peer: dict[PeerId, _PunchState] = {}
        self._pending_reserve: dict[int, Future] = {}
        self._pending_dialback: dict[int, Future] = {}
        self._pending_connects: dict[PeerId, Future] = {}
        self._shut = False

    # --- lifecycle ---

    def start(self) -> None:
        self.host.listen(self._on_inbound_stream)
        self.host.on_datagram(self._on_datagram)

    def shutdown(self) -> None:
        self._shut = True
        if self._renew_timer is not None:
            self._renew_timer.cancel()
        for state in list(self._punches_by_nonce.values()):
            self._punch_finish(state, PunchFailed("shutting down"))
        for conn in list(self.conns.values()):
            conn.close()
        self.host.unlisten()

    def add_handler(self, lo: int, hi: int, fn) -> None:
        """Route inbound frames with lo <= msg_type <= hi to fn(conn, t, body)."""
        self._handlers.append((lo, hi, fn))

    def on_connection(self, cb) -> None:
        self._on_connection.append(cb)

    def on_disconnect(self, cb) -> None:
        self._on_disconnect.append(cb)

    def _dispatch(self, conn: Connection, msg_type: int, body: bytes):
        if wire.RESERVE_REQ <= msg_type <= wire.PUNCH_SYNC_ACK:
            self._traversal_frame(conn, msg_type, body)
            return
        if msg_type == wire.DIALBACK_REQ:
            self._serve_dialback(conn, body)
            return
        if msg_type == wire.DIALBACK_RESP:
            fut = self._pending_dialback.pop(id(conn), None)
            if fut is not None:
                r = wire.Reader(body)
                ok = r.byte()
                reached = parse_addr(r.text())
                fut.set_result((bool(ok), reached))
            return
        for lo, hi, fn in self._handlers:
            if lo <= msg_type <= hi:
                fn(conn, msg_type, body)
                return
        # unknown frames are ignored; forward compatibility over strictness

    # --- HELLO handshake ---

    def _hello_body(self, stream) -> bytes:
        flags = 0x01 if self.relay_role else 0x00
        listen = addr_text(self.host.address)
        seen = addr_text(getattr(stream, "peer_addr", None))
        core = (
            wire.Writer()
            .blob(self.keypair.public)
            .byte(flags)
            .text(listen)
            .text(seen)
            .done()
        )
        if self.config.sign_hellos:
            sig = self.keypair.sign(HELLO_CONTEXT + core)
        else:
            sig = b""
        return core + wire.Writer().blob(sig).done()

    def _parse_hello(self, body: bytes):
        r = wire.Reader(body)
        pubkey = r.blob()
        flags = r.byte()
        listen = parse_addr(r.text())
        my_addr_seen = parse_addr(r.text())
        sig = r.blob()
        core_len = len(body) - wire.varint_len(len(sig)) - len(sig)
        if self.config.sign_hellos:
            if not verify_signature(pubkey, HELLO_CONTEXT + body[:core_len], sig):
                raise HelloRejected("hello signature check failed")
        peer_id = PeerId.from_public_key(pubkey)
        return peer_id, pubkey, flags, listen, my_addr_seen

    def _on_inbound_stream(self, stream):
        """First frame decides: HELLO (peer connection) or RELAY_CONNECT (circuit)."""
        state = {"done": False}
        timer = self.host.call_later(self.config.hello_timeout_us, lambda: _expire())

        def _expire():
            if not state["done"]:
                state["done"] = True
                stream.close()

        def first_frame(msg_type, body):
            if state["done"]:
                return
            state["done"] = True
            timer.cancel()
            if msg_type == wire.HELLO:
                self._finish_hello(stream, body, purpose="inbound", expect=None, on_done=None)
            elif msg_type == wire.RELAY_CONNECT:
                self._serve_relay_connect(stream, body)
            else:
                stream.close()

        stream.on_frame(first_frame)
        stream.on_close(lambda: state.update(done=True))

    def _start_hello(self, stream, purpose: str, expect: PeerId | None, on_done, t0_us: int | None = None):
        """Send our HELLO and wait for the peer's on a fresh stream."""
        stream.send_frame(wire.HELLO, self._hello_body(stream))
        state = {"done": False}
        timer = self.host.call_later(self.config.hello_timeout_us, lambda: _expire())

        def _expire():
            if not state["done"]:
                state["done"] = True
                stream.close()
                if on_done:
                    on_done(None, HelloTimeout("no hello from %r" % (stream.peer_addr,)))

        def got(msg_type, body):
            if state["done"]:
                return
            state["done"] = True
            timer.cancel()
            if msg_type != wire.HELLO:
                stream.close()
                if on_done:
                    on_done(None, HelloRejected("expected hello, got 0x%02x" % msg_type))
                return
            self._finish_hello(stream, body, purpose, expect, on_done, t0_us)

        stream.on_frame(got)
        stream.on_close(lambda: (_expire()))

    def _finish_hello(self, stream, body: bytes, purpose: str, expect: PeerId | None,
                      on_done, t0_us: int | None = None):
        try:
            peer_id, pubkey, flags, listen, my_seen = self._parse_hello(body)
        except (wire.WireError, HelloRejected) as err:
            stream.close()
            if on_done:
                on_done(None, err if isinstance(err, HelloRejected) else HelloRejected(str(err)))
            return
        if peer_id == self.peer_id or (expect is not None and peer_id != expect):
            stream.close()
            if on_done:
                on_done(None, HelloRejected("unexpected peer %r" % peer_id))
            return
        if purpose == "inbound":
            # answer with our own HELLO (it echoes their observed address)
            stream.send_frame(wire.HELLO, self._hello_body(stream))
        if my_seen is not None and getattr(stream, "peer_addr", None) is not None:
            # only direct streams tell us anything about our own mapping
            self.observed = my_seen

        punch = self._punches_by_peer.get(peer_id)
        if punch is not None and not punch.resolved and purpose in ("inbound", "punch-dial"):
            # a dial while we are openly reachable can only be the peer coming
            # straight at our listener, so it counts as direct either way
            if punch.reverse or self.reachability.status is ReachStatus.PUBLIC:
                kind = PathKind.DIRECT
            else:
                kind = PathKind.HOLE_PUNCHED
            conn = punch.conn
            conn.migrate(stream, kind, getattr(stream, "peer_addr", None))
            self._punch_finish(punch, None)
            if on_done:
                on_done(conn, None)
            return

        existing = self.conns.get(peer_id)
        if existing is not None and not existing.closed:
            # crossed dials: both sides keep the one dialed by the lower peer
            # id, otherwise each would close the other's pick forever
            if purpose == "inbound":
                new_wins = peer_id < self.peer_id
            else:
                new_wins = self.peer_id < peer_id
            if not new_wins:
                stream.close()
                if on_done:
                    on_done(existing, None)
                return
            existing.close()

        if purpose == "circuit-dial" or isinstance(stream, RelayedStream):
            kind = PathKind.RELAYED
        else:
            kind = PathKind.DIRECT
        path = ConnectionPath(kind=kind, peer=peer_id, endpoint=getattr(stream, "peer_addr", None))
        conn = Connection(self, stream, peer_id, pubkey, path,
                          initiator=purpose != "inbound")
        conn.peer_is_relay = bool(flags & 0x01)
        conn.peer_listen = listen
        if t0_us is not None:
            conn.rtt_us = self.host.now_us() - t0_us
        self.conns[peer_id] = conn
        for cb in self._on_connection:
            cb(conn)
        if on_done:
            on_done(conn, None)

    def _conn_closed(self, conn: Connection):
        if self.conns.get(conn.peer_id) is conn:
            del self.conns[conn.peer_id]
        # relay server: drop reservations and circuits riding this connection
        for cid, res in list(self._reservations.items()):
            if res.client_conn is conn:
                del self._reservations[cid]
        for conn_id, circuit in list(self._circuits.items()):
            if circuit.client_conn is conn:
                circuit.dialer_stream.close()
                del self._circuits[conn_id]
        # relay client: circuits through this relay die with it
        for key, rstream in list(self._circuit_streams.items()):
            if key[0] == id(conn):
                del self._circuit_streams[key]
                rstream._peer_closed()
        rfut = self._pending_reserve.pop(id(conn), None)
        if rfut is not None and not rfut.done():
            rfut.set_exception(PeerGone("relay connection closed"))
        fut = self._pending_dialback.pop(id(conn), None)
        if fut is not None and not fut.done():
            fut.set_exception(PeerGone("probe connection closed"))
        for cb in self._on_disconnect:
            cb(conn)

    # --- plain dialing ---

    def connect_addr(self, addr: tuple, expect: PeerId | None = None) -> Future:
        """Dial an address and complete the HELLO exchange."""
        fut = Future()
        t0 = self.host.now_us()

        def dialed(stream, err):
            if err is not None:
                fut.set_exception(Unreachable(str(err)))
                return
            self._start_hello(stream, "dial", expect, _done, t0_us=t0)

        def _done(conn, err):
            if err is not None:
                fut.set_exception(err)
            else:
                fut.set_result(conn)

        self.host.dial(addr, dialed, timeout_us=self.config.dial_timeout_us)
        return fut

    # --- the connect ladder ---

    def connect(self, peer_id: PeerId, contact: PeerContact | None = None,
                try_upgrade: bool = True) -> Future:
        """Best-path connection to a peer; resolves to a ConnectResult."""
        existing = self.conns.get(peer_id)
        if existing is not None and not existing.closed:
            fut = Future()
            fut.set_result(ConnectResult(existing.path, existing, [("existing", "ok")]))
            return fut
        pending = self._pending_connects.get(peer_id)
        if pending is not None:
            return pending
        fut = Future()
        if contact is None or (not contact.direct and contact.relay is None):
            fut.set_exception(NoRouteToPeer("no addresses or relay reservation for %r" % peer_id))
            return fut
        self._pending_connects[peer_id] = fut
        fut.add_done_callback(lambda f: self._pending_connects.pop(peer_id, None))
        attempts: list = []
        addrs = list(contact.direct)

        def try_direct():
            if not addrs:
                try_relay()
                return
            addr = addrs.pop(0)
            sub = self.connect_addr(addr, expect=peer_id)

            def done(f):
                if f.exception() is None:
                    conn = f.result()
                    attempts.append(("direct", "ok"))
                    fut.set_result(ConnectResult(conn.path, conn, attempts))
                else:
                    attempts.append(("direct", str(f.exception())))
                    try_direct()

            sub.add_done_callback(done)

        def try_relay():
            if contact.relay is None:
                fut.set_exception(Unreachable("all of %r failed: %r" % (peer_id, attempts)))
                return
            relay_peer, relay_addr, circuit_id = contact.relay
            sub = self.open_circuit(relay_peer, relay_addr, circuit_id, expect=peer_id)

            def done(f):
                if f.exception() is not None:
                    attempts.append(("relay", str(f.exception())))
                    fut.set_exception(Unreachable("all of %r failed: %r" % (peer_id, attempts)))
                    return
                conn = f.result()
                attempts.append(("relay", "ok"))
                if not try_upgrade or conn.punch_attempted:
                    fut.set_result(ConnectResult(conn.path, conn, attempts))
                    return
                up = self.initiate_punch(conn)

                def upgraded(uf):
                    if uf.exception() is None:
                        attempts.append(("upgrade", "ok"))
                    else:
                        attempts.append(("upgrade", str(uf.exception())))
                    fut.set_result(ConnectResult(conn.path, conn, attempts))

                up.add_done_callback(upgraded)

            sub.add_done_callback(done)

        try_direct()
        return fut

    # --- relay client ---

    def reserve(self, relay_peer: PeerId, relay_addr: tuple) -> Future:
        """Obtain (or renew) a reservation; resolves to a RelayReservation."""
        fut = Future()

        def with_conn(f):
            if f.exception() is not None:
                fut.set_exception(f.exception())
                return
            conn = f.result()
            renew_id = 0
            if self.reservation is not None and self.reservation.relay == relay_peer:
                renew_id = self.reservation.circuit_id
            self._pending_reserve[id(conn)] = fut
            conn.send(wire.RESERVE_REQ, wire.Writer().u64(renew_id).done())

            def completed(rf):
                if rf.exception() is not None:
                    return
                res = rf.result()
                self.reservation = res
                if self.config.auto_renew_reservation:
                    self._schedule_renewal(relay_peer, relay_addr, res)

            fut.add_done_callback(completed)

        existing = self.conns.get(relay_peer)
        if existing is not None and not existing.closed:
            done = Future()
            done.set_result(existing)
            with_conn(done)
        else:
            self.connect_addr(relay_addr, expect=relay_peer).add_done_callback(with_conn)
        return fut

    def _schedule_renewal(self, relay_peer, relay_addr, res: RelayReservation):
        if self._renew_timer is not None:
            self._renew_timer.cancel()
        delay = max(1, (res.expires_at_us - self.host.now_us()) // 2)
        self._renew_timer = self.host.call_later(
            delay, lambda: None if self._shut else self.reserve(relay_peer, relay_addr))

    def cancel_reservation(self) -> None:
        res, self.reservation = self.reservation, None
        if self._renew_timer is not None:
            self._renew_timer.cancel()
            self._renew_timer = None
        if res is None:
            return
        conn = self.conns.get(res.relay)
        if conn is not None and not conn.closed:
            conn.send(wire.RESERVE_CANCEL, wire.Writer().u64(res.circuit_id).done())

    def open_circuit(self, relay_peer: PeerId, relay_addr: tuple, circuit_id: int,
                     expect: PeerId | None) -> Future:
        """Connect to a reserved peer through its relay; resolves to a Connection."""
        fut = Future()

        def dialed(stream, err):
            if err is not None:
                fut.set_exception(Unreachable("relay %r: %s" % (relay_addr, err)))
                return
            state = {"stage": "connect"}
            timer = self.host.call_later(self.config.hello_timeout_us * 2, lambda: _expire())

            def _expire():
                if state["stage"] == "connect":
                    state["stage"] = "dead"
                    stream.close()
                    fut.set_exception(Unreachable("relay did not answer circuit request"))

            def first(msg_type, body):
                if state["stage"] != "connect":
                    return
                if msg_type != wire.RELAY_CONNECT_RESP:
                    return
                state["stage"] = "hello"
                timer.cancel()
                r = wire.Reader(body)
                ok = r.byte()
                code = r.u64()
                r.u64()  # circuit-local conn id; the dialer leg never needs it
                seen = parse_addr(r.text())
                if ok and seen is not None:
                    self.observed = seen
                if not ok:
                    stream.close()
                    err_map = {
                        RELAY_ERR_NOT_A_RELAY: NotARelay("peer does not relay"),
                        RELAY_ERR_BUSY: RelayBusy("relay at reservation capacity"),
                        RELAY_ERR_UNKNOWN_CIRCUIT: UnknownCircuit("circuit %d unknown or expired" % circuit_id),
                    }
                    fut.set_exception(err_map.get(code, Unreachable("relay refused: %d" % code)))
                    return
                self._start_hello(stream, "circuit-dial", expect, _done)

            def _done(conn, err):
                if err is not None:
                    fut.set_exception(err)
                else:
                    fut.set_result(conn)

            stream.on_frame(first)
            stream.send_frame(wire.RELAY_CONNECT, wire.Writer().u64(circuit_id).done())

        self.host.dial(relay_addr, dialed, timeout_us=self.config.dial_timeout_us)
        return fut

    # --- relay server ---

    def _prune_reservations(self):
        now = self.host.now_us()
        for cid, res in list(self._reservations.items()):
            if res.expires_at_us <= now:
                del self._reservations[cid]

    def _traversal_frame(self, conn: Connection, msg_type: int, body: bytes):
        if msg_type == wire.RESERVE_REQ:
            self._serve_reserve(conn, body)
        elif msg_type == wire.RESERVE_RESP:
            self._client_reserve_resp(conn, body)
        elif msg_type == wire.RESERVE_CANCEL:
            cid = wire.Reader(body).u64()
            res = self._reservations.get(cid)
            if res is not None and res.client_conn is conn:
                del self._reservations[cid]
        elif msg_type == wire.CIRCUIT_OPEN:
            self._client_circuit_open(conn, body)
        elif msg_type == wire.CIRCUIT_DATA:
            self._circuit_data(conn, body)
        elif msg_type == wire.CIRCUIT_CLOSE:
            self._circuit_close(conn, body)
        elif msg_type == wire.PUNCH_SYNC:
            self._punch_sync(conn, body, ack=False)
        elif msg_type == wire.PUNCH_SYNC_ACK:
            self._punch_sync(conn, body, ack=True)

    def _serve_reserve(self, conn: Connection, body: bytes):
        renew_id = wire.Reader(body).u64()
        if not self.relay_role:
            conn.send(wire.RESERVE_RESP,
                      wire.Writer().byte(0).u64(RELAY_ERR_NOT_A_RELAY).u64(0).u64(0).done())
            return
        self._prune_reservations()
        now = self.host.now_us()
        expiry = now + self.config.reservation_ttl_us
        existing = self._reservations.get(renew_id)
        if renew_id and existing is not None and existing.client_conn is conn:
            existing.expires_at_us = expiry
            cid = renew_id
        else:
            if len(self._reservations) >= self.config.relay_capacity:
                conn.send(wire.RESERVE_RESP,
                          wire.Writer().byte(0).u64(RELAY_ERR_BUSY).u64(0).u64(0).done())
                return
            while True:
                cid = self.host.rng.getrandbits(63) | 1
                if cid not in self._reservations:
                    break
            self._reservations[cid] = _Reservation(cid, conn, expiry)
        conn.send(wire.RESERVE_RESP,
                  wire.Writer().byte(1).u64(0).u64(cid).u64(expiry).done())

    def _client_reserve_resp(self, conn: Connection, body: bytes):
        fut = self._pending_reserve.pop(id(conn), None)
        if fut is None:
            return
        r = wire.Reader(body)
        ok = r.byte()
        code = r.u64()
        cid = r.u64()
        expiry = r.u64()
        if not ok:
            fut.set_exception(NotARelay("not a relay") if code == RELAY_ERR_NOT_A_RELAY
                              else RelayBusy("relay at capacity"))
            return
        fut.set_result(RelayReservation(relay=conn.peer_id, client=self.peer_id,
                                        circuit_id=cid, expires_at_us=expiry))

    def _serve_relay_connect(self, stream, body: bytes):
        try:
            circuit_id = wire.Reader(body).u64()
        except wire.WireError:
            stream.close()
            return
        self._prune_reservations()
        res = self._reservations.get(circuit_id)
        if not self.relay_role or res is None:
            code = RELAY_ERR_UNKNOWN_CIRCUIT if self.relay_role else RELAY_ERR_NOT_A_RELAY
            stream.send_frame(wire.RELAY_CONNECT_RESP,
                              wire.Writer().byte(0).u64(code).u64(0).text("-").done())
            stream.close()
            return
        self._next_conn_id += 1
        conn_id = self._next_conn_id
        self._circuits[conn_id] = _Circuit(conn_id, res.client_conn, stream)
        res.client_conn.send(wire.CIRCUIT_OPEN,
                             wire.Writer().u64(circuit_id).u64(conn_id).done())
        # echo the dialer's source so it learns its own external mapping
        stream.send_frame(wire.RELAY_CONNECT_RESP,
                          wire.Writer().byte(1).u64(0).u64(conn_id)
                          .text(addr_text(getattr(stream, "peer_addr", None))).done())

        def forward(msg_type, body2):
            circuit = self._circuits.get(conn_id)
            if circuit is None:
                return
            inner = wire.encode_frame(msg_type, body2)
            circuit.client_conn.send(wire.CIRCUIT_DATA,
                                     wire.Writer().u64(conn_id).raw(inner).done())

        def dialer_gone():
            circuit = self._circuits.pop(conn_id, None)
            if circuit is not None:
                circuit.client_conn.send(wire.CIRCUIT_CLOSE, wire.Writer().u64(conn_id).done())

        stream.on_frame(forward)
        stream.on_close(dialer_gone)

    def _circuit_data(self, conn: Connection, body: bytes):
        r = wire.Reader(body)
        conn_id = r.u64()
        inner = r.rest()
        circuit = self._circuits.get(conn_id)
        if circuit is not None and circuit.client_conn is conn:
            # relay role: unwrap toward the dialer's dedicated stream
            offset = 0
            while offset < len(inner):
                try:
                    t, b, offset = wire.decode_frame(inner, offset)
                except wire.WireError:
                    return
                circuit.dialer_stream.send_frame(t, b)
            return
        # client role: hand the inner frame to the circuit stream
        rstream = self._circuit_streams.get((id(conn), conn_id))
        if rstream is None:
            return
        offset = 0
        while offset < len(inner):
            try:
                t, b, offset = wire.decode_frame(inner, offset)
            except wire.WireError:
                return
            rstream._deliver(t, b)

    def _circuit_close(self, conn: Connection, body: bytes):
        conn_id = wire.Reader(body).u64()
        circuit = self._circuits.pop(conn_id, None)
        if circuit is not None and circuit.client_conn is conn:
            circuit.dialer_stream.close()
            return
        rstream = self._circuit_streams.pop((id(conn), conn_id), None)
        if rstream is not None:
            rstream._peer_closed()

    def _client_circuit_open(self, conn: Connection, body: bytes):
        r = wire.Reader(body)
        r.u64()  # circuit id; one reservation per client keeps this implicit
        conn_id = r.u64()
        rstream = RelayedStream(self, conn, conn_id)
        self._circuit_streams[(id(conn), conn_id)] = rstream
        # the dialer speaks first; treat like any inbound stream
        self._on_inbound_stream(rstream)

    def _drop_circuit(self, relay_conn: Connection, conn_id: int, notify_relay: bool):
        self._circuit_streams.pop((id(relay_conn), conn_id), None)
        if notify_relay and not relay_conn.closed:
            relay_conn.send(wire.CIRCUIT_CLOSE, wire.Writer().u64(conn_id).done())

    # --- hole punching ---

    def initiate_punch(self, conn: Connection) -> Future:
        """Upgrade a relayed connection; resolves to the new ConnectionPath."""
        fut = Future()
        if conn.path.kind is not PathKind.RELAYED:
            fut.set_result(conn.path)
            return fut
        conn.punch_attempted = True
        if self.observed is None and self.reachability.status is not ReachStatus.PUBLIC:
            fut.set_exception(NoObservedAddr("own external address unknown; keep the relay path"))
            return fut
        nonce = self.host.rng.getrandbits(63) | 1
        state = _PunchState(conn.peer_id, conn, nonce, initiator=True)
        state.future = fut
        self._punches_by_nonce[nonce] = state
        self._punches_by_peer[conn.peer_id] = state
        t_punch = self.host.now_us() + self.config.punch_lead_us
        state.t_punch = t_punch
        i_am_public = self.reachability.status is ReachStatus.PUBLIC
        conn.send(wire.PUNCH_SYNC, wire.Writer()
                  .u64(nonce).u64(t_punch).byte(1 if i_am_public else 0)
                  .text(addr_text(self.observed)).text(addr_text(self.host.address)).done())
        deadline = (self.config.punch_lead_us
                    + self.config.punch_attempts * self.config.punch_spacing_us
                    + self.config.punch_grace_us)
        state.timers.append(self.host.call_later(deadline, lambda: self._punch_deadline(state)))
        return fut

    def _punch_sync(self, conn: Connection, body: bytes, ack: bool):
        r = wire.Reader(body)
        nonce = r.u64()
        t_punch = r.u64()
        peer_public = bool(r.byte())
        peer_obs = parse_addr(r.text())
        peer_listen = parse_addr(r.text())
        if not ack:
            # responder side: mirror the state and answer
            state = self._punches_by_nonce.get(nonce)
            if state is None:
                state = _PunchState(conn.peer_id, conn, nonce, initiator=False)
                self._punches_by_nonce[nonce] = state
                self._punches_by_peer[conn.peer_id] = state
                deadline = (max(0, t_punch - self.host.now_us())
                            + self.config.punch_attempts * self.config.punch_spacing_us
                            + self.config.punch_grace_us
                            + self.config.dial_timeout_us + self.config.hello_timeout_us)
                state.timers.append(self.host.call_later(deadline, lambda: self._punch_deadline(state)))
            state.t_punch = t_punch
            i_am_public = self.reachability.status is ReachStatus.PUBLIC
            conn.send(wire.PUNCH_SYNC_ACK, wire.Writer()
                      .u64(nonce).u64(t_punch).byte(1 if i_am_public else 0)
                      .text(addr_text(self.observed)).text(addr_text(self.host.address)).done())
            self._punch_engage(state, peer_public, peer_obs, peer_listen)
        else:
            state = self._punches_by_nonce.get(nonce)
            if state is None or state.resolved:
                return
            self._punch_engage(state, peer_public, peer_obs, peer_listen)

    def _punch_engage(self, state: _PunchState, peer_public: bool,
                      peer_obs: tuple | None, peer_listen: tuple | None):
        """Common logic once a side knows the peer's punch parameters."""
        if state.resolved:
            return
        state.peer_obs = peer_obs
        if peer_public and peer_listen is not None:
            # the peer is openly dialable: no punching, just dial it
            state.reverse = True
            self._punch_dial(state, peer_listen)
            return
        if self.reachability.status is ReachStatus.PUBLIC:
            # we are dialable: wait for the peer to dial our listener instead;
            # give it a whole dial plus handshake before giving up
            state.reverse = True
            for t in state.timers:
                t.cancel()
            state.timers = [self.host.call_later(
                self.config.dial_timeout_us + self.config.hello_timeout_us
                + self.config.punch_grace_us,
                lambda: self._punch_deadline(state))]
            return
        if peer_obs is None:
            if state.initiator:
                self._punch_finish(state, PunchFailed("peer has no observed address"))
            return
        delay = max(0, state.t_punch - self.host.now_us())
        for i in range(self.config.punch_attempts):
            state.timers.append(self.host.call_later(
                delay + i * self.config.punch_spacing_us,
                lambda: self._punch_send(state)))

    def _punch_send(self, state: _PunchState):
        if state.resolved or state.peer_obs is None:
            return
        payload = PUNCH_MAGIC + bytes([PUNCH_KIND_PUNCH]) + state.nonce.to_bytes(8, "big")
        self.host.send_datagram(state.peer_obs, payload)

    def _on_datagram(self, payload: bytes, src: tuple):
        if len(payload) != len(PUNCH_MAGIC) + 1 + 8 or not payload.startswith(PUNCH_MAGIC):
            return
        kind = payload[len(PUNCH_MAGIC)]
        nonce = int.from_bytes(payload[-8:], "big")
        state = self._punches_by_nonce.get(nonce)
        if state is None:
            return
        if kind == PUNCH_KIND_PUNCH:
            ack = PUNCH_MAGIC + bytes([PUNCH_KIND_ACK]) + nonce.to_bytes(8, "big")
            self.host.send_datagram(src, ack)
        if state.resolved:
            return
        if state.initiator:
            # any datagram that lands proves the path; dial through the hole
            self._punch_dial(state, src)

    def _punch_dial(self, state: _PunchState, addr: tuple):
        if state.dial_started or state.resolved:
            return
        state.dial_started = True

        def dialed(stream, err):
            if err is not None:
                self._punch_finish(state, PunchFailed("dial through hole failed: %s" % err))
                return
            self._start_hello(stream, "punch-dial", state.peer_id, lambda conn, e: (
                self._punch_finish(state, PunchFailed(str(e))) if e is not None else None))

        self.host.dial(addr, dialed, timeout_us=self.config.dial_timeout_us)

    def _punch_deadline(self, state: _PunchState):
        if not state.resolved and not state.dial_started:
            self._punch_finish(state, PunchFailed("no punch datagram arrived"))

    def _punch_finish(self, state: _PunchState, error):
        if state.resolved:
            return
        state.resolved = True
        for t in state.timers:
            t.cancel()
        self._punches_by_nonce.pop(state.nonce, None)
        if self._punches_by_peer.get(state.peer_id) is state:
            del self._punches_by_peer[state.peer_id]
        if state.future is not None:
            if error is None:
                state.future.set_result(state.conn.path)
            else:
                state.future.set_exception(error)

    # --- reachability probing ---

    def _serve_dialback(self, conn: Connection, body: bytes):
        r = wire.Reader(body)
        count = r.u64()
        addrs = [parse_addr(r.text()) for _ in range(count)]
        addrs = [a for a in addrs if a is not None]

        def attempt(idx: int):
            if idx >= len(addrs):
                conn.send(wire.DIALBACK_RESP, wire.Writer().byte(0).text("-").done())
                return
            addr = addrs[idx]

            def dialed(stream, err):
                if err is not None:
                    attempt(idx + 1)
                    return
                stream.close()
                conn.send(wire.DIALBACK_RESP,
                          wire.Writer().byte(1).text(addr_text(addr)).done())

            # dial from the alternate identity so address-restricted filters
            # cannot be fooled by a permitted prober address
            try:
                self.host.dial(addr, dialed, timeout_us=self.config.dial_timeout_us, from_alt=True)
            except TypeError:
                self.host.dial(addr, dialed, timeout_us=self.config.dial_timeout_us)

        attempt(0)

    def probe_reachability(self, probe_peers: list[PeerId]) -> Future:
        """Ask connected public peers to dial us back; >=2 verdicts decide."""
        fut = Future()
        conns = [self.conns[p] for p in probe_peers
                 if p in self.conns and not self.conns[p].closed]
        if len(conns) < self.config.probe_quorum:
            fut.set_exception(InsufficientProbes(
                "%d connected probe peers, need %d" % (len(conns), self.config.probe_quorum)))
            return fut
        # only the advertised listen address counts: a reachable cone mapping
        # still leaves the node undialable once its bindings expire
        candidates = [self.host.address]
        body = wire.Writer().u64(len(candidates))
        for addr in candidates:
            body.text(addr_text(addr))
        votes = {"ok": 0, "fail": 0, "reached": None, "pending": len(conns)}

        def verdict():
            if fut.done():
                return
            if votes["ok"] >= self.config.probe_quorum:
                self.reachability = Reachability(ReachStatus.PUBLIC, votes["reached"])
                fut.set_result(self.reachability)
            elif votes["fail"] >= self.config.probe_quorum:
                self.reachability = Reachability(ReachStatus.PRIVATE, self.observed)
                fut.set_result(self.reachability)
            elif votes["pending"] == 0:
                fut.set_exception(InsufficientProbes("probes disagreed or vanished"))

        for conn in conns:
            sub = Future()
            self._pending_dialback[id(conn)] = sub
            timer = self.host.call_later(
                self.config.dialback_timeout_us,
                lambda s=sub: None if s.done() else s.set_exception(HelloTimeout("dialback timed out")))

            def done(f, timer=timer):
                timer.cancel()
                votes["pending"] -= 1
                if f.exception() is None:
                    ok, reached = f.result()
                    if ok:
                        votes["ok"] += 1
                        if votes["reached"] is None:
                            votes["reached"] = reached
                    else:
                        votes["fail"] += 1
                else:
                    votes["fail"] += 1
                verdict()

            sub.add_done_callback(done)
            conn.send(wire.DIALBACK_REQ, body.done())
        return fut


def best_path_kind(a: PathKind, b: PathKind) -> PathKind:
    return a if _PATH_RANK[a] <= _PATH_RANK[b] else b


def traversal_experiment(population: dict, pairs: int, seed: int = 0) -> dict:
    """Measure which path kinds fresh peer pairs end up on.

    Each episode draws two NAT profiles from the population, brings up two
    nodes plus a shared public relay, lets the callee reserve a circuit, and
    runs the full connect ladder from the dialer. Episodes are sequential and
    independent; the report is deterministic for a given seed.
    """
    from .simnet import NatKind, SimNetwork

    net = SimNetwork(seed=seed, trace_enabled=False)
    cfg = TraversalConfig(sign_hellos=False, auto_renew_reservation=False)
    relay_host = net.add_node(nat=NatKind.PUBLIC)
    relay = ConnectionManager(relay_host, Keypair.generate(relay_host.rng),
                              cfg, relay_role=True)
    relay.start()
    kinds = sorted(population)
    weights = [population[k] for k in kinds]
    counts = {"direct": 0, "punched": 0, "relayed": 0, "unreachable": 0}

    for _ in range(pairs):
        kind_a, kind_b = net.rng.choices(kinds, weights=weights, k=2)
        host_a = net.add_node(nat=NatKind(kind_a))
        host_b = net.add_node(nat=NatKind(kind_b))
        mgr_a = ConnectionManager(host_a, Keypair.generate(host_a.rng), cfg)
        mgr_b = ConnectionManager(host_b, Keypair.generate(host_b.rng), cfg)
        mgr_a.start()
        mgr_b.start()
        res_fut = mgr_b.reserve(relay.peer_id, relay_host.address)
        net.run_until_done(res_fut, limit_us=net.now_us + 30_000_000)
        reservation = res_fut.result()
        direct = [host_b.address] if kind_b == "public" else []
        contact = PeerContact(mgr_b.peer_id, direct=direct,
                              relay=(relay.peer_id, relay_host.address,
                                     reservation.circuit_id))
        fut = mgr_a.connect(mgr_b.peer_id, contact)
        net.run_until_done(fut, limit_us=net.now_us + 30_000_000)
        if not fut.done():
            raise RuntimeError("connect attempt stuck; simulation bug")
        if fut.exception() is not None:
            counts["unreachable"] += 1
        else:
            counts[fut.result().path.kind.value] += 1
        mgr_b.cancel_reservation()
        mgr_a.shutdown()
        mgr_b.shutdown()
        net.run_until_idle(limit_us=net.now_us + 10_000_000)
        net.remove_node(host_a)
        net.remove_node(host_b)

    reached = counts["direct"] + counts["punched"]
    report = {
        "pairs": pairs,
        "seed": seed,
        "population": {k: population[k] for k in kinds},
        **counts,
        "direct_or_punched_rate": reached / pairs if pairs else 0.0,
        "summary": "pairs=%d direct=%d punched=%d relayed=%d unreachable=%d" % (
            pairs, counts["direct"], counts["punched"], counts["relayed"],
            counts["unreachable"]),
    }
    return report
