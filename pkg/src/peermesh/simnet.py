"""Deterministic discrete-event network simulator.

Virtual time is an integer count of microseconds. All behavior derives from
one seed: the event queue pops by (time, insertion sequence), every random
draw comes from the seeded generator, and callbacks run single-threaded, so
two runs with the same seed produce identical traces.

The address space is flat: an address is (node-id, port). NAT behavior is
modeled per node with explicit bindings:

  public           no translation, every open port is dialable
  full_cone        one external port per internal port; inbound from anyone
  addr_restricted  inbound only from node-ids this port has sent to
  port_restricted  inbound only from exact (node-id, port) pairs sent to
  symmetric        a fresh external port per (internal port, remote endpoint);
                   inbound only from that exact remote

Bindings expire after 60 virtual seconds idle. Outbound sends create or
refresh them; inbound packets are filtered at delivery time.

Datagrams are unreliable (Bernoulli loss per the sender's link) and NAT
filtered. Streams are reliable ordered frame pipes established by a SYN/ACK
handshake that is itself NAT filtered; data on an established stream is never
dropped (an ideal retransmission layer is assumed) but still pays latency
and bandwidth. A message's delivery time is

    depart = max(now, sender egress-busy)
    arrive = depart + size / min(src bw, dst bw) + src latency + dst latency

so concurrent transfers on one access link queue behind each other.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from enum import Enum

from . import wire
from .errors import PeermeshError

NAT_IDLE_TIMEOUT_US = 60_000_000
HANDSHAKE_TIMEOUT_US = 3_000_000
HANDSHAKE_PACKET_SIZE = 64
MAX_DATAGRAM = 65_536
EPHEMERAL_PORT_BASE = 50_000


class SimError(PeermeshError):
    pass


class DatagramTooLarge(SimError):
    pass


class HandshakeTimeout(SimError):
    """Stream dial got no answer within the handshake window."""


class BindFailed(SimError):
    pass


class CausalityError(SimError):
    """An event was scheduled in the past."""


class NatKind(Enum):
    PUBLIC = "public"
    FULL_CONE = "full_cone"
    ADDR_RESTRICTED = "addr_restricted"
    PORT_RESTRICTED = "port_restricted"
    SYMMETRIC = "symmetric"


@dataclass
class LinkProfile:
    """Access link of one node; bandwidth is in bytes per second."""

    latency_us: int = 1_000
    bytes_per_sec: int = 12_500_000
    loss: float = 0.0


DEFAULT_LINK = LinkProfile()


@dataclass
class _Binding:
    internal_port: int
    external_port: int
    remote: tuple | None  # symmetric only: the one endpoint allowed back in
    permitted_addrs: set = field(default_factory=set)
    permitted_endpoints: set = field(default_factory=set)
    last_used_us: int = 0


class Timer:
    __slots__ = ("fn", "cancelled")

    def __init__(self, fn):
        self.fn = fn
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class SimStream:
    """One endpoint of an established stream; carries whole frames.

    Inbound frames buffer until a handler is attached, so a peer may start
    talking before this side has wired its callbacks.
    """

    def __init__(self, net: "SimNetwork", agent: "SimAgent", local_port: int, peer_addr: tuple):
        self.net = net
        self.agent = agent
        self.local_port = local_port
        self.peer_addr = peer_addr  # remote as this side sees it (post-NAT)
        self.other: SimStream | None = None
        self.closed = False
        self._on_frame = None
        self._on_close = None
        self._pending: list = []

    def on_frame(self, cb):
        self._on_frame = cb
        while self._pending and self._on_frame is cb:
            msg_type, body = self._pending.pop(0)
            cb(msg_type, body)

    def on_close(self, cb):
        self._on_close = cb

    def send_frame(self, msg_type: int, body: bytes) -> None:
        if self.closed:
            return
        if len(body) > wire.MAX_FRAME_BODY:
            raise wire.FrameTooLarge("stream frame body of %d bytes" % len(body))
        self.net._stream_transmit(self, msg_type, body)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.net._stream_close(self)

    # called by the network
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


class SimAgent:
    """A simulated node: address, link, NAT state, sockets, and timers.

    Doubles as the host interface the protocol stack runs against:
    now_us / call_later / rng / listen / dial / send_datagram.
    """

    LISTEN_PORT = 1

    def __init__(self, net: "SimNetwork", node_id: int, alt_id: int | None,
                 nat: NatKind, link: LinkProfile):
        self.net = net
        self.node_id = node_id
        self.alt_id = alt_id
        self.nat = nat
        self.link = link
        self.alive = True
        self.rng = random.Random(net.rng.getrandbits(64))
        self.egress_busy_us = 0
        self._listeners: dict[int, object] = {}
        self._dgram_handlers: dict[int, object] = {}
        self._next_port = EPHEMERAL_PORT_BASE
        # NAT state
        self._bindings: dict = {}          # key -> _Binding
        self._by_external: dict = {}       # external port -> key
        self._next_external = 40_000

    # --- host interface ---

    def now_us(self) -> int:
        return self.net.now_us

    def call_later(self, delay_us: int, fn) -> Timer:
        return self.net.schedule(delay_us, fn)

    @property
    def address(self) -> tuple:
        return (self.node_id, self.LISTEN_PORT)

    @property
    def alt_address(self) -> tuple:
        if self.alt_id is None:
            raise SimError("node %d has no alternate address" % self.node_id)
        return (self.alt_id, self.LISTEN_PORT)

    def listen(self, on_stream, port: int = LISTEN_PORT) -> None:
        if port in self._listeners:
            raise BindFailed("port %d already bound on node %d" % (port, self.node_id))
        self._listeners[port] = on_stream

    def unlisten(self, port: int = LISTEN_PORT) -> None:
        self._listeners.pop(port, None)

    def dial(self, addr: tuple, on_result, timeout_us: int = HANDSHAKE_TIMEOUT_US,
             src_port: int = LISTEN_PORT, from_alt: bool = False) -> None:
        """Open a stream to addr; on_result(stream, error) exactly once."""
        self.net._dial(self, src_port, addr, on_result, timeout_us, from_alt)

    def on_datagram(self, cb, port: int = LISTEN_PORT) -> None:
        self._dgram_handlers[port] = cb

    def send_datagram(self, addr: tuple, payload: bytes, src_port: int = LISTEN_PORT) -> None:
        if len(payload) > MAX_DATAGRAM:
            raise DatagramTooLarge("%d > %d bytes" % (len(payload), MAX_DATAGRAM))
        self.net._send_datagram(self, src_port, addr, payload)

    def alloc_port(self) -> int:
        self._next_port += 1
        return self._next_port

    # --- NAT mechanics ---

    def _nat_out(self, src_port: int, dst: tuple, now: int) -> tuple:
        """Translate an outbound packet's source; returns the external view."""
        if self.nat is NatKind.PUBLIC:
            return (self.node_id, src_port)
        key = (src_port, dst) if self.nat is NatKind.SYMMETRIC else src_port
        binding = self._bindings.get(key)
        if binding is not None and now - binding.last_used_us > NAT_IDLE_TIMEOUT_US:
            del self._bindings[key]
            del self._by_external[binding.external_port]
            binding = None
        if binding is None:
            self._next_external += 1
            binding = _Binding(
                internal_port=src_port,
                external_port=self._next_external,
                remote=dst if self.nat is NatKind.SYMMETRIC else None,
            )
            self._bindings[key] = binding
            self._by_external[binding.external_port] = key
        binding.permitted_addrs.add(dst[0])
        binding.permitted_endpoints.add(dst)
        binding.last_used_us = now
        return (self.node_id, binding.external_port)

    def _nat_in(self, dst_port: int, src_seen: tuple, now: int) -> int | None:
        """Inbound filter; returns the internal port or None to drop."""
        if self.nat is NatKind.PUBLIC:
            return dst_port
        key = self._by_external.get(dst_port)
        if key is None:
            return None
        binding = self._bindings[key]
        if now - binding.last_used_us > NAT_IDLE_TIMEOUT_US:
            del self._bindings[key]
            del self._by_external[dst_port]
            return None
        if self.nat is NatKind.FULL_CONE:
            allowed = True
        elif self.nat is NatKind.ADDR_RESTRICTED:
            allowed = src_seen[0] in binding.permitted_addrs
        elif self.nat is NatKind.PORT_RESTRICTED:
            allowed = src_seen in binding.permitted_endpoints
        else:  # symmetric
            allowed = src_seen == binding.remote
        if not allowed:
            return None
        binding.last_used_us = now
        return binding.internal_port


class SimNetwork:
    """The event loop plus the registry of agents, streams, and traces."""

    def __init__(self, seed: int = 0, trace_enabled: bool = True):
        self.rng = random.Random(seed)
        self.now_us = 0
        self._queue: list = []
        self._seq = 0
        self._agents: dict[int, SimAgent] = {}
        self._next_id = 0
        self.trace_enabled = trace_enabled
        self.trace: list[tuple] = []
        self._blocked: set = set()

    # --- topology ---

    def add_node(self, nat: NatKind = NatKind.PUBLIC, link: LinkProfile | None = None) -> SimAgent:
        link = link or DEFAULT_LINK
        self._next_id += 1
        node_id = self._next_id
        alt_id = None
        if nat is NatKind.PUBLIC:
            # second identity used by reachability probes to dial back from an
            # address the probed node has never contacted
            self._next_id += 1
            alt_id = self._next_id
        agent = SimAgent(self, node_id, alt_id, nat, link)
        self._agents[node_id] = agent
        if alt_id is not None:
            self._agents[alt_id] = agent
        return agent

    def remove_node(self, agent: SimAgent) -> None:
        agent.alive = False
        self._agents.pop(agent.node_id, None)
        if agent.alt_id is not None:
            self._agents.pop(agent.alt_id, None)

    def kill(self, agent: SimAgent) -> None:
        """Abrupt death: the node goes silent; peers see only timeouts."""
        agent.alive = False

    def block(self, a: SimAgent, b: SimAgent) -> None:
        self._blocked.add(frozenset((a.node_id, b.node_id)))

    def unblock(self, a: SimAgent, b: SimAgent) -> None:
        self._blocked.discard(frozenset((a.node_id, b.node_id)))

    # --- event loop ---

    def schedule(self, delay_us: int, fn) -> Timer:
        if delay_us < 0:
            raise CausalityError("negative delay %d" % delay_us)
        timer = Timer(fn)
        self._seq += 1
        heapq.heappush(self._queue, (self.now_us + delay_us, self._seq, timer))
        return timer

    def _schedule_at(self, t_us: int, fn) -> Timer:
        if t_us < self.now_us:
            raise CausalityError("event at %d before now %d" % (t_us, self.now_us))
        timer = Timer(fn)
        self._seq += 1
        heapq.heappush(self._queue, (t_us, self._seq, timer))
        return timer

    def run_until(self, t_us: int) -> list[tuple]:
        """Run events with time <= t_us; returns trace records of this run."""
        mark = len(self.trace)
        while self._queue and self._queue[0][0] <= t_us:
            when, _, timer = heapq.heappop(self._queue)
            self.now_us = when
            if not timer.cancelled:
                timer.fn()
        self.now_us = max(self.now_us, t_us)
        return self.trace[mark:]

    def run(self, duration_us: int) -> list[tuple]:
        return self.run_until(self.now_us + duration_us)

    def run_until_idle(self, limit_us: int | None = None) -> list[tuple]:
        mark = len(self.trace)
        while self._queue:
            when = self._queue[0][0]
            if limit_us is not None and when > limit_us:
                break
            _, _, timer = heapq.heappop(self._queue)
            self.now_us = when
            if not timer.cancelled:
                timer.fn()
        return self.trace[mark:]

    def run_until_done(self, future, limit_us: int | None = None):
        """Drive the loop until a future completes; returns its result."""
        while self._queue and not future.done():
            when = self._queue[0][0]
            if limit_us is not None and when > limit_us:
                break
            _, _, timer = heapq.heappop(self._queue)
            self.now_us = when
            if not timer.cancelled:
                timer.fn()
        if not future.done():
            raise SimError("network went idle before the future completed")
        return future.result()

    def _record(self, kind: str, src: tuple, dst: tuple, size: int):
        if self.trace_enabled:
            self.trace.append((self.now_us, kind, src, dst, size))

    def format_trace(self, records: list[tuple] | None = None) -> str:
        """Line-oriented rendering: time us | event-kind | src | dst | size."""
        out = []
        for t, kind, src, dst, size in (self.trace if records is None else records):
            out.append("%d us | %s | %d:%d | %d:%d | %d" % (t, kind, src[0], src[1], dst[0], dst[1], size))
        return "\n".join(out)

    # --- transmission core ---

    def _delivery_time(self, src: SimAgent, dst: SimAgent, size: int) -> int:
        bw = min(src.link.bytes_per_sec, dst.link.bytes_per_sec)
        serialization = (size * 1_000_000 + bw - 1) // bw
        depart = max(self.now_us, src.egress_busy_us)
        src.egress_busy_us = depart + serialization
        return depart + serialization + src.link.latency_us + dst.link.latency_us

    def _send_datagram(self, src: SimAgent, src_port: int, dst_addr: tuple, payload: bytes):
        if not src.alive:
            return
        src_seen = src._nat_out(src_port, dst_addr, self.now_us)
        if frozenset((src.node_id, dst_addr[0])) in self._blocked:
            self._record("dgram-drop-block", src_seen, dst_addr, len(payload))
            return
        if src.link.loss > 0 and self.rng.random() < src.link.loss:
            self._record("dgram-drop-loss", src_seen, dst_addr, len(payload))
            return
        dst = self._agents.get(dst_addr[0])
        if dst is None or not dst.alive:
            self._record("dgram-drop-dead", src_seen, dst_addr, len(payload))
            return
        arrive = self._delivery_time(src, dst, len(payload))
        size = len(payload)

        def deliver():
            if not dst.alive:
                return
            port = dst._nat_in(dst_addr[1], src_seen, self.now_us)
            if port is None and dst_addr[0] == dst.alt_id:
                port = dst_addr[1] if dst.nat is NatKind.PUBLIC else None
            if port is None:
                self._record("dgram-drop-nat", src_seen, dst_addr, size)
                return
            handler = dst._dgram_handlers.get(port)
            if handler is None:
                self._record("dgram-drop-noport", src_seen, dst_addr, size)
                return
            self._record("dgram", src_seen, dst_addr, size)
            handler(payload, src_seen)

        self._schedule_at(arrive, deliver)

    def _dial(self, src: SimAgent, src_port: int, dst_addr: tuple, on_result,
              timeout_us: int, from_alt: bool):
        if not src.alive:
            raise SimError("dialing from a dead node")
        state = {"done": False}

        def finish(stream, error):
            if state["done"]:
                return
            state["done"] = True
            timer.cancel()
            on_result(stream, error)

        timer = self.schedule(timeout_us, lambda: finish(None, HandshakeTimeout(
            "no answer from %r after %d us" % (dst_addr, timeout_us))))

        if from_alt:
            if src.alt_id is None:
                raise SimError("node %d has no alternate identity" % src.node_id)
            src_seen = (src.alt_id, src_port)
        else:
            src_seen = src._nat_out(src_port, dst_addr, self.now_us)
        if frozenset((src.node_id, dst_addr[0])) in self._blocked:
            return  # silent; the timeout fires
        dst = self._agents.get(dst_addr[0])
        if dst is None or not dst.alive:
            return
        arrive = self._delivery_time(src, dst, HANDSHAKE_PACKET_SIZE)

        def syn_arrives():
            if not dst.alive:
                return
            port = dst._nat_in(dst_addr[1], src_seen, self.now_us)
            if port is None and dst_addr[0] == dst.alt_id and dst.nat is NatKind.PUBLIC:
                port = dst_addr[1]
            if port is None:
                self._record("syn-drop-nat", src_seen, dst_addr, HANDSHAKE_PACKET_SIZE)
                return
            listener = dst._listeners.get(port)
            if listener is None:
                self._record("syn-drop-noport", src_seen, dst_addr, HANDSHAKE_PACKET_SIZE)
                return
            self._record("accept", src_seen, dst_addr, HANDSHAKE_PACKET_SIZE)
            # build the stream pair; acceptor sees the dialer's external view
            accept_side = SimStream(self, dst, port, src_seen)
            dial_side = SimStream(self, src, src_port, dst_addr)
            accept_side.other = dial_side
            dial_side.other = accept_side
            # the ACK travels back through both NATs
            ack_src = dst._nat_out(port, src_seen, self.now_us)
            ack_arrive = self._delivery_time(dst, src, HANDSHAKE_PACKET_SIZE)

            def ack_arrives():
                if not src.alive:
                    return
                if not from_alt:
                    back = src._nat_in(src_seen[1], ack_src, self.now_us)
                    if back is None and src.nat is not NatKind.PUBLIC:
                        self._record("ack-drop-nat", ack_src, src_seen, HANDSHAKE_PACKET_SIZE)
                        return
                finish(dial_side, None)

            self._schedule_at(ack_arrive, ack_arrives)
            listener(accept_side)

        self._schedule_at(arrive, syn_arrives)

    def _stream_transmit(self, side: SimStream, msg_type: int, body: bytes):
        src, other = side.agent, side.other
        if not src.alive or other is None:
            return
        dst = other.agent
        size = wire.frame_wire_len(len(body))
        if not dst.alive:
            self._record("frame-drop-dead", (src.node_id, side.local_port), other.peer_addr, size)
            return
        if frozenset((src.node_id, dst.node_id)) in self._blocked:
            # A mid-path partition: the stream stays up at both ends,
            # the bytes just never arrive.
            self._record("frame-drop-block", (src.node_id, side.local_port), other.peer_addr, size)
            return
        arrive = self._delivery_time(src, dst, size)

        def deliver():
            if not dst.alive or other.closed:
                return
            self._record("frame", other.peer_addr, (dst.node_id, other.local_port), size)
            other._deliver(msg_type, body)

        self._schedule_at(arrive, deliver)

    def _stream_close(self, side: SimStream):
        other = side.other
        if other is None or not side.agent.alive:
            return
        dst = other.agent
        if not dst.alive:
            return
        if frozenset((side.agent.node_id, dst.node_id)) in self._blocked:
            return
        arrive = self._delivery_time(side.agent, dst, HANDSHAKE_PACKET_SIZE)

        def deliver():
            if dst.alive:
                self._record("close", other.peer_addr, (dst.node_id, other.local_port), 0)
                other._peer_closed()

        self._schedule_at(arrive, deliver)
