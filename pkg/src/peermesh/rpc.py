"""Request-response and streaming RPC over authenticated connections.

Two interaction shapes share one frame family and one call-id space per
connection. Unary calls carry small control messages: a Request names a
route and gets back exactly one Response or Error. Streams carry bulk
flows: an opener names a route, then either end ships data frames under
credit-based backpressure until it signals a clean end or resets.

Call ids cannot collide because each side of a connection draws from its
own parity: the dialer uses odd ids, the acceptor even ones, both
counting upward. A retry is a fresh call id, so the answer to a timed
out attempt is recognizably stale and silently dropped instead of being
mistaken for the retry's answer.

Flow control is a frame budget. A data frame may only leave while the
sender holds window; the receiver replenishes window as its consumer
actually drains frames, so an idle consumer stalls the sender after
``initial_window`` frames without any timers or probing.

Retries respect at-most-once semantics: only calls the caller declares
idempotent are retried, everything else surfaces its first failure.
Shard calls sit on top of unary calls: resolve providers through the
DHT, order them by observed round-trip time, and walk the list until
one answers, never reusing a provider that already failed the call.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

from . import wire
from .errors import PeermeshError
from .futures import Future
from .ids import Key256, PeerId

# Error frame codes. Codes above RESET are free for application faults.
CODE_UNKNOWN_ROUTE = 1
CODE_INTERNAL = 2
CODE_UNAVAILABLE = 3
CODE_RESET = 4

FLAG_IDEMPOTENT = 0x01

# A unary payload must fit one frame together with the envelope header
# (call id varint, route blob, flags byte), so the cap sits a little
# under the raw frame body limit.
MAX_UNARY_PAYLOAD = wire.MAX_FRAME_BODY - 160

BENCH_ROUTE = "bench.echo"


class RpcError(PeermeshError):
    pass


class Timeout(RpcError):
    """No answer arrived within the per-attempt budget."""


class Unavailable(RpcError):
    """No usable connection, or the peer reported itself unavailable."""


class RemoteError(RpcError):
    """The peer answered with an Error frame."""

    def __init__(self, code: int, msg: str = ""):
        super().__init__("remote error %d: %s" % (code, msg))
        self.code = code
        self.msg = msg


class StreamReset(RpcError):
    """The stream was torn down instead of ending cleanly."""

    def __init__(self, code: int, msg: str = ""):
        super().__init__("stream reset %d: %s" % (code, msg))
        self.code = code
        self.msg = msg


class PeerGone(RpcError):
    """The underlying connection does not exist or died."""


class DuplicateRoute(RpcError):
    pass


class NoProviders(RpcError):
    """Provider discovery returned nobody to call."""


class AllProvidersFailed(RpcError):
    """Every provider attempted for a shard call failed."""


class RpcFault(RpcError):
    """Raised by a handler to answer with a chosen error code."""

    def __init__(self, code: int, msg: str = ""):
        super().__init__("fault %d: %s" % (code, msg))
        self.code = code
        self.msg = msg


@dataclass
class RpcConfig:
    attempt_timeout_us: int = 2_000_000
    frame_cap: int = 16 * 1024    # payload bytes per stream data frame
    initial_window: int = 16      # frames a sender may emit unprompted
    max_window: int = 1024        # ceiling on accumulated credit
    grant_batch: int = 8          # credit returned per batch drained
    max_route_len: int = 128      # encoded route bytes
    max_providers: int = 8        # provider records fetched per shard call


@dataclass(frozen=True)
class RetryPolicy:
    """When and how often a failed unary attempt is repeated.

    Retries happen only for calls declared idempotent, and only for the
    failure categories named in ``retry_on``; anything else surfaces
    immediately. Backoff doubles per failed attempt from the base.
    """

    max_attempts: int = 3
    base_backoff_us: int = 100_000
    multiplier: int = 2
    retry_on: frozenset = frozenset({"timeout", "connection-lost", "unavailable"})

    def backoff_us(self, failed_attempts: int) -> int:
        return self.base_backoff_us * self.multiplier ** (failed_attempts - 1)


def _envelope(call_id: int, route: bytes, flags: int, payload: bytes) -> bytes:
    w = wire.Writer()
    w.u64(call_id)
    w.blob(route)
    w.byte(flags)
    w.raw(payload)
    return w.done()


def shard_route(model_id: str, shard_index: int) -> str:
    """Route string for one shard; doubles as the provider key text."""
    return "rpc:%s/%d" % (model_id, shard_index)


def shard_key(model_id: str, shard_index: int) -> Key256:
    return Key256.of_text(shard_route(model_id, shard_index))


class StreamHandle:
    """One endpoint of a bidirectional, credit-gated frame stream.

    ``send`` queues bytes (sliced to the frame cap) and ships as much as
    the current window allows; ``end`` marks a clean local finish that
    goes out after the queue drains. ``recv`` resolves to the next frame
    from the peer, or b"" once the peer has ended. ``close`` aborts both
    directions and tells the peer to reset.

    A handle may move between logical tasks, but two tasks must not
    send through it concurrently.
    """

    def __init__(self, svc: "RpcService", conn, call_id: int, route: str):
        self._svc = svc
        self._conn = conn
        self.call_id = call_id
        self.route = route
        self.peer = conn.peer_id
        self.error: RpcError | None = None
        self._window = svc.cfg.initial_window
        self._outbox: deque[bytes] = deque()
        self._end_queued = False
        self._end_sent = False
        self._inbox: deque[bytes] = deque()
        self._waiters: deque[Future] = deque()
        self._remote_ended = False
        self._drained_since_grant = 0

    @property
    def window(self) -> int:
        """Frames this end may still send before new credit arrives."""
        return self._window

    def send(self, data: bytes) -> None:
        if self.error is not None:
            raise self.error
        if self._end_queued:
            raise RpcError("send after end on stream %d" % self.call_id)
        if not data:
            # an empty data frame would read as end-of-stream on the far side
            return
        cap = self._svc.cfg.frame_cap
        for i in range(0, len(data), cap):
            self._outbox.append(bytes(data[i:i + cap]))
        self._pump()

    def end(self) -> None:
        """Finish the sending direction once everything queued is out."""
        if self.error is not None or self._end_queued:
            return
        self._end_queued = True
        self._pump()

    def close(self, code: int = CODE_RESET, msg: str = "") -> None:
        """Abort the stream in both directions and notify the peer."""
        if self.error is not None:
            return
        self._svc._abort_stream(self, code, msg, notify_peer=True)

    def recv(self) -> Future:
        """Next frame from the peer; resolves to b"" after their end."""
        fut: Future = Future()
        if self._inbox:
            fut.set_result(self._take())
        elif self.error is not None:
            fut.set_exception(self.error)
        elif self._remote_ended:
            fut.set_result(b"")
        else:
            self._waiters.append(fut)
        return fut

    # Consumption is what earns the peer new credit: a frame counts when
    # the application takes it, not when it arrives.
    def _take(self) -> bytes:
        data = self._inbox.popleft()
        self._drained_since_grant += 1
        batch = self._svc.cfg.grant_batch
        if self._drained_since_grant >= batch and not self._remote_ended:
            self._drained_since_grant -= batch
            self._svc._send_credit(self, batch)
        return data

    def _pump(self) -> None:
        while self._window > 0 and self._outbox:
            self._window -= 1
            chunk = self._outbox.popleft()
            self._conn.send(wire.RPC_STREAM_DATA,
                            _envelope(self.call_id, b"", 0, chunk))
        if self._end_queued and not self._outbox and not self._end_sent:
            self._end_sent = True
            self._conn.send(wire.RPC_STREAM_END,
                            _envelope(self.call_id, b"", 0, b""))
            self._svc._stream_maybe_done(self)


class _PendingCall:
    __slots__ = ("timer", "ok", "fail")


class _ConnState:
    """Per-connection id allocator plus live calls and streams."""

    __slots__ = ("next_id", "pending", "streams")

    def __init__(self, initiator: bool):
        self.next_id = 1 if initiator else 2
        self.pending: dict[int, _PendingCall] = {}
        self.streams: dict[int, StreamHandle] = {}


class RpcService:
    """Routes, calls, streams, and shard-aware failover for one node."""

    def __init__(self, mgr, dht=None, cfg: RpcConfig | None = None):
        self.mgr = mgr
        self.dht = dht
        self.cfg = cfg or RpcConfig()
        self._unary: dict[str, tuple] = {}       # route -> (fn, idempotent)
        self._stream_routes: dict[str, object] = {}
        self._conn_states: dict = {}              # Connection -> _ConnState
        self._shard_rr = 0
        mgr.add_handler(wire.RPC_REQUEST, wire.RPC_ERROR, self._on_frame)
        mgr.on_disconnect(self._on_disconnect)

    @property
    def host(self):
        return self.mgr.host

    # --- registration ---

    def register_handler(self, route: str, fn, idempotent: bool = False) -> None:
        """Serve unary Requests on ``route`` with fn(payload, conn).

        The handler returns response bytes, or a Future of them for
        answers produced later. Raising RpcFault answers with that
        fault's code; any other exception answers INTERNAL. The
        ``idempotent`` flag is declarative: callers decide retries, the
        flag records what this route can tolerate.
        """
        self._check_route(route)
        if route in self._unary:
            raise DuplicateRoute(route)
        self._unary[route] = (fn, idempotent)

    def register_stream(self, route: str, fn) -> None:
        """Accept inbound streams on ``route`` with fn(handle)."""
        self._check_route(route)
        if route in self._stream_routes:
            raise DuplicateRoute(route)
        self._stream_routes[route] = fn

    def _check_route(self, route: str) -> None:
        if len(route.encode("utf-8")) > self.cfg.max_route_len:
            raise ValueError("route of %d bytes exceeds %d"
                             % (len(route.encode("utf-8")), self.cfg.max_route_len))

    # --- unary calls ---

    def call_unary(self, peer: PeerId, route: str, payload: bytes,
                   policy: RetryPolicy | None = None, idempotent: bool = False,
                   addr: tuple | None = None,
                   timeout_us: int | None = None) -> Future:
        """One request, one answer; resolves to the response bytes.

        Fails with Timeout, Unavailable, or RemoteError. With
        ``idempotent`` the policy's retryable failures are retried under
        exponential backoff, each retry a fresh attempt with a fresh
        call id; without it the first failure is final and at most one
        Request frame ever leaves this node. ``addr`` allows dialing the
        peer on demand when no connection exists yet.
        """
        route_b = route.encode("utf-8")
        if len(route_b) > self.cfg.max_route_len:
            raise ValueError("route of %d bytes exceeds %d"
                             % (len(route_b), self.cfg.max_route_len))
        if len(payload) > MAX_UNARY_PAYLOAD:
            raise ValueError("payload of %d bytes exceeds %d"
                             % (len(payload), MAX_UNARY_PAYLOAD))
        fut: Future = Future()
        pol = policy or RetryPolicy()
        deadline = timeout_us if timeout_us is not None else self.cfg.attempt_timeout_us
        attempts = {"n": 0}

        def start_attempt():
            if fut.done():
                return
            attempts["n"] += 1
            conn = self.mgr.conns.get(peer)
            if conn is not None and not conn.closed:
                fire(conn)
                return
            if addr is None:
                flunk("connection-lost", Unavailable("no connection to %r" % peer))
                return
            dial = self.mgr.connect_addr(addr, expect=peer)

            def dialed(f):
                if f.exception() is not None:
                    flunk("connection-lost",
                          Unavailable("dial failed: %s" % f.exception()))
                else:
                    fire(f.result())

            dial.add_done_callback(dialed)

        def fire(conn):
            if fut.done():
                return  # a dial can land after the caller already gave up
            st = self._state(conn)
            call_id = st.next_id
            st.next_id += 2
            rec = _PendingCall()

            def timed_out():
                st.pending.pop(call_id, None)
                flunk("timeout",
                      Timeout("no answer on %r within %d us" % (route, deadline)))

            rec.timer = self.host.call_later(deadline, timed_out)
            rec.ok = fut.set_result
            rec.fail = flunk
            st.pending[call_id] = rec
            flags = FLAG_IDEMPOTENT if idempotent else 0
            conn.send(wire.RPC_REQUEST, _envelope(call_id, route_b, flags, payload))

        def flunk(category, exc):
            if fut.done():
                return
            if idempotent and category in pol.retry_on and attempts["n"] < pol.max_attempts:
                self.host.call_later(pol.backoff_us(attempts["n"]), start_attempt)
            else:
                fut.set_exception(exc)

        start_attempt()
        return fut

    # --- streams ---

    def open_stream(self, peer: PeerId, route: str) -> StreamHandle:
        """Open a stream on an existing connection to ``peer``.

        The handle is usable immediately; the peer rejecting the route
        surfaces later as a StreamReset on the handle.
        """
        self._check_route(route)
        conn = self.mgr.conns.get(peer)
        if conn is None or conn.closed:
            raise PeerGone("no connection to %r" % peer)
        st = self._state(conn)
        call_id = st.next_id
        st.next_id += 2
        handle = StreamHandle(self, conn, call_id, route)
        st.streams[call_id] = handle
        conn.send(wire.RPC_STREAM_OPEN,
                  _envelope(call_id, route.encode("utf-8"), 0, b""))
        return handle

    # --- shard calls ---

    def serve_shard(self, model_id: str, shard_index: int, fn,
                    idempotent: bool = True) -> Future:
        """Serve one shard and announce it; resolves when announced."""
        if self.dht is None:
            raise RpcError("serving a shard needs a discovery service")
        self.register_handler(shard_route(model_id, shard_index), fn,
                              idempotent=idempotent)
        return self.dht.provide(shard_key(model_id, shard_index))

    def shard_call(self, model_id: str, shard_index: int, request: bytes,
                   policy: RetryPolicy | None = None) -> Future:
        """Call whichever provider of the shard answers first.

        Resolves to ``(response_bytes, provider_peer_id)``. Providers
        come from the DHT, are preferred by observed round-trip time
        with a round-robin rotation among unknowns and ties, and a
        provider that fails is excluded for the rest of this call.
        """
        if self.dht is None:
            raise RpcError("shard calls need a discovery service")
        fut: Future = Future()
        pol = policy or RetryPolicy()
        route = shard_route(model_id, shard_index)
        self._shard_rr += 1
        rr = self._shard_rr

        def found(f):
            if f.exception() is not None:
                fut.set_exception(f.exception())
                return
            recs, seen = [], set()
            for rec in f.result():
                # own records are unreachable through the dialer
                if rec.provider == self.mgr.peer_id or rec.provider in seen:
                    continue
                seen.add(rec.provider)
                recs.append(rec)
            if not recs:
                fut.set_exception(NoProviders("nobody provides %r" % route))
                return
            self._walk_providers(self._order_providers(recs, rr),
                                 route, request, pol, fut)

        self.dht.find_providers(shard_key(model_id, shard_index),
                                max_records=self.cfg.max_providers).add_done_callback(found)
        return fut

    def _order_providers(self, recs: list, rr: int) -> list:
        groups: dict = {}
        for rec in recs:
            conn = self.mgr.conns.get(rec.provider)
            rtt = conn.rtt_us if conn is not None and not conn.closed else None
            groups.setdefault(rtt if rtt is not None else math.inf, []).append(rec)
        ordered = []
        for rtt in sorted(groups):
            group = groups[rtt]
            k = rr % len(group)
            ordered.extend(group[k:] + group[:k])
        return ordered

    def _walk_providers(self, order: list, route: str, request: bytes,
                        pol: RetryPolicy, fut: Future) -> None:
        state = {"i": 0, "attempts": 0, "last": None}
        single = RetryPolicy(max_attempts=1, base_backoff_us=pol.base_backoff_us,
                             multiplier=pol.multiplier, retry_on=pol.retry_on)

        def next_attempt():
            if fut.done():
                return
            if state["i"] >= len(order) or state["attempts"] >= pol.max_attempts:
                exc = AllProvidersFailed(
                    "%d provider(s) failed for %r" % (state["attempts"], route))
                exc.__cause__ = state["last"]
                fut.set_exception(exc)
                return
            rec = order[state["i"]]
            state["i"] += 1
            state["attempts"] += 1
            dial_addr = tuple(rec.addresses[0]) if rec.addresses else None
            call = self.call_unary(rec.provider, route, request, policy=single,
                                   idempotent=True, addr=dial_addr)

            def finished(f, provider=rec.provider):
                if fut.done():
                    return
                if f.exception() is None:
                    fut.set_result((f.result(), provider))
                    return
                state["last"] = f.exception()
                more = state["i"] < len(order) and state["attempts"] < pol.max_attempts
                if more:
                    self.host.call_later(pol.backoff_us(state["attempts"]),
                                         next_attempt)
                else:
                    next_attempt()

            call.add_done_callback(finished)

        next_attempt()

    # --- frame handling ---

    def _state(self, conn) -> _ConnState:
        st = self._conn_states.get(conn)
        if st is None:
            st = _ConnState(conn.initiator)
            self._conn_states[conn] = st
        return st

    def _on_frame(self, conn, msg_type: int, body: bytes) -> None:
        try:
            r = wire.Reader(body)
            call_id = r.u64()
            route_b = r.blob()
            r.byte()  # flags: informational on Request, zero elsewhere
            payload = r.rest()
        except wire.MalformedFrame:
            conn.close()
            return
        st = self._state(conn)
        if msg_type == wire.RPC_REQUEST:
            self._serve_request(conn, st, call_id, route_b, payload)
        elif msg_type == wire.RPC_RESPONSE:
            rec = st.pending.pop(call_id, None)
            if rec is None:
                return  # stale answer to a timed out attempt
            rec.timer.cancel()
            rec.ok(payload)
        elif msg_type == wire.RPC_ERROR:
            self._on_error_frame(conn, st, call_id, payload)
        elif msg_type == wire.RPC_STREAM_OPEN:
            self._serve_open(conn, st, call_id, route_b)
        elif msg_type == wire.RPC_STREAM_DATA:
            self._on_stream_data(conn, st, call_id, payload)
        elif msg_type == wire.RPC_STREAM_END:
            self._on_stream_end(st, call_id)
        elif msg_type == wire.RPC_CREDIT:
            self._on_credit(conn, st, call_id, payload)

    def _serve_request(self, conn, st, call_id, route_b, payload) -> None:
        try:
            route = route_b.decode("utf-8")
        except UnicodeDecodeError:
            route = None
        entry = self._unary.get(route) if route is not None else None
        if entry is None:
            self._send_error(conn, call_id, CODE_UNKNOWN_ROUTE, route or "")
            return
        fn = entry[0]
        try:
            result = fn(payload, conn)
        except RpcFault as fault:
            self._send_error(conn, call_id, fault.code, fault.msg)
            return
        except Exception as exc:  # handler bug: answer, keep the connection
            self._send_error(conn, call_id, CODE_INTERNAL, repr(exc)[:200])
            return
        if isinstance(result, Future):
            def finished(f):
                if conn.closed:
                    return
                err = f.exception()
                if err is None:
                    self._send_response(conn, call_id, f.result())
                elif isinstance(err, RpcFault):
                    self._send_error(conn, call_id, err.code, err.msg)
                else:
                    self._send_error(conn, call_id, CODE_INTERNAL, repr(err)[:200])
            result.add_done_callback(finished)
        else:
            self._send_response(conn, call_id, result)

    def _send_response(self, conn, call_id, result) -> None:
        if not isinstance(result, (bytes, bytearray, memoryview)):
            self._send_error(conn, call_id, CODE_INTERNAL,
                             "handler returned %s" % type(result).__name__)
            return
        data = bytes(result)
        if len(data) > MAX_UNARY_PAYLOAD:
            self._send_error(conn, call_id, CODE_INTERNAL, "response too large")
            return
        conn.send(wire.RPC_RESPONSE, _envelope(call_id, b"", 0, data))

    def _send_error(self, conn, call_id, code: int, msg: str) -> None:
        w = wire.Writer()
        w.u64(code)
        w.raw(msg.encode("utf-8")[:200])
        conn.send(wire.RPC_ERROR, _envelope(call_id, b"", 0, w.done()))

    def _on_error_frame(self, conn, st, call_id, payload) -> None:
        try:
            r = wire.Reader(payload)
            code = r.u64()
            msg = r.rest().decode("utf-8", "replace")
        except wire.MalformedFrame:
            conn.close()
            return
        rec = st.pending.pop(call_id, None)
        if rec is not None:
            rec.timer.cancel()
            if code == CODE_UNAVAILABLE:
                rec.fail("unavailable", Unavailable(msg or "peer unavailable"))
            else:
                rec.fail("remote", RemoteError(code, msg))
            return
        handle = st.streams.pop(call_id, None)
        if handle is not None:
            handle.error = StreamReset(code, msg)
            handle._outbox.clear()
            while handle._waiters:
                handle._waiters.popleft().set_exception(handle.error)
        # otherwise: an error about a call we already forgot

    def _serve_open(self, conn, st, call_id, route_b) -> None:
        try:
            route = route_b.decode("utf-8")
        except UnicodeDecodeError:
            route = None
        fn = self._stream_routes.get(route) if route is not None else None
        if fn is None:
            self._send_error(conn, call_id, CODE_UNKNOWN_ROUTE, route or "")
            return
        if call_id in st.streams:
            conn.close()  # id reuse is a protocol violation
            return
        handle = StreamHandle(self, conn, call_id, route)
        st.streams[call_id] = handle
        try:
            fn(handle)
        except Exception as exc:
            self._abort_stream(handle, CODE_INTERNAL, repr(exc)[:200],
                               notify_peer=True)

    def _on_stream_data(self, conn, st, call_id, payload) -> None:
        handle = st.streams.get(call_id)
        if handle is None:
            # tail frames of a stream we already reset: remind the peer
            self._send_error(conn, call_id, CODE_RESET, "no such stream")
            return
        if handle._remote_ended:
            conn.close()  # data after end is a protocol violation
            return
        handle._inbox.append(payload)
        if handle._waiters:
            handle._waiters.popleft().set_result(handle._take())

    def _on_stream_end(self, st, call_id) -> None:
        handle = st.streams.get(call_id)
        if handle is None:
            return
        handle._remote_ended = True
        while handle._waiters:
            handle._waiters.popleft().set_result(b"")
        self._stream_maybe_done(handle)

    def _on_credit(self, conn, st, call_id, payload) -> None:
        try:
            amount = wire.Reader(payload).u64()
        except wire.MalformedFrame:
            conn.close()
            return
        handle = st.streams.get(call_id)
        if handle is None:
            return
        handle._window = min(handle._window + amount, self.cfg.max_window)
        handle._pump()

    def _send_credit(self, handle: StreamHandle, amount: int) -> None:
        if handle.error is not None or handle._conn.closed:
            return
        w = wire.Writer()
        w.u64(amount)
        handle._conn.send(wire.RPC_CREDIT,
                          _envelope(handle.call_id, b"", 0, w.done()))

    def _stream_maybe_done(self, handle: StreamHandle) -> None:
        if handle._end_sent and handle._remote_ended:
            st = self._conn_states.get(handle._conn)
            if st is not None:
                st.streams.pop(handle.call_id, None)

    def _abort_stream(self, handle: StreamHandle, code: int, msg: str = "",
                      notify_peer: bool = True) -> None:
        st = self._conn_states.get(handle._conn)
        if st is not None:
            st.streams.pop(handle.call_id, None)
        if handle.error is None:
            handle.error = StreamReset(code, msg)
        handle._outbox.clear()
        while handle._waiters:
            handle._waiters.popleft().set_exception(handle.error)
        if notify_peer and not handle._conn.closed:
            self._send_error(handle._conn, handle.call_id, code, msg)

    def _on_disconnect(self, conn) -> None:
        st = self._conn_states.pop(conn, None)
        if st is None:
            return
        gone = PeerGone("connection to %r lost" % conn.peer_id)
        for rec in list(st.pending.values()):
            rec.timer.cancel()
            rec.fail("connection-lost", Unavailable("connection lost mid-call"))
        st.pending.clear()
        for handle in list(st.streams.values()):
            handle.error = gone
            handle._outbox.clear()
            while handle._waiters:
                handle._waiters.popleft().set_exception(gone)
        st.streams.clear()


def bench_rpc(client: RpcService, server: RpcService, payload_size: int,
              concurrency: int, duration_us: int,
              max_calls: int | None = None) -> Future:
    """Closed-loop unary load between a connected pair.

    Keeps ``concurrency`` echo calls of ``payload_size`` bytes in flight
    until the duration elapses (or ``max_calls`` have completed, when
    given, which bounds the work independently of link speed). Resolves
    to {"qps", "p50", "p99"} with latencies in virtual microseconds.
    Only calls completing inside the window are counted; none are
    retried or timed out, so the numbers reflect transport behavior.
    """
    if BENCH_ROUTE not in server._unary:
        server.register_handler(BENCH_ROUTE, lambda payload, conn: payload,
                                idempotent=True)
    host = client.mgr.host
    peer = server.mgr.peer_id
    payload = bytes(payload_size)
    fut: Future = Future()
    lat: list[int] = []
    t0 = host.now_us()
    t_end = t0 + duration_us
    state = {"launched": 0, "inflight": 0, "t_last": t0}

    def may_launch() -> bool:
        if host.now_us() >= t_end:
            return False
        return max_calls is None or state["launched"] < max_calls

    def launch():
        state["launched"] += 1
        state["inflight"] += 1
        started = host.now_us()
        call = client.call_unary(peer, BENCH_ROUTE, payload,
                                 timeout_us=duration_us + 1)
        call.add_done_callback(lambda f, t=started: complete(f, t))

    def complete(f, started):
        now = host.now_us()
        if f.exception() is not None:
            # a dead pair must drain, not respawn in a tight loop
            state["inflight"] -= 1
            if state["inflight"] == 0:
                finish()
            return
        if now <= t_end:
            lat.append(now - started)
            state["t_last"] = now
        state["inflight"] -= 1
        if may_launch():
            launch()
        elif state["inflight"] == 0:
            finish()

    def finish():
        ordered = sorted(lat)
        # fixed-work runs are scored over the span they actually used
        window = (state["t_last"] - t0) if max_calls is not None else duration_us
        qps = len(ordered) * 1_000_000.0 / window if ordered and window > 0 else 0.0
        fut.set_result({"qps": qps,
                        "p50": _percentile(ordered, 50),
                        "p99": _percentile(ordered, 99)})

    for _ in range(concurrency):
        if may_launch():
            launch()
    if state["inflight"] == 0:
        finish()
    return fut


def _percentile(ordered: list, pct: int) -> int:
    if not ordered:
        return 0
    idx = max(0, math.ceil(pct * len(ordered) / 100) - 1)
    return ordered[min(idx, len(ordered) - 1)]
