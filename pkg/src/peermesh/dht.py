"""Peer and provider discovery over the XOR keyspace.

Every node keeps a routing table of contacts bucketed by shared key
prefix, so the table holds many nearby peers and exponentially fewer
distant ones.  Lookups walk the keyspace iteratively: query the alpha
closest known contacts, merge whatever closer peers they return, and
repeat until the k best responders stop changing.  Each hop roughly
halves the remaining distance, which keeps lookups logarithmic in the
population size.

Content is announced with provider records.  ``provide`` places a
record on the k nodes whose ids are closest to the key (including
ourselves when we qualify) and republishes it every fifteen minutes
for as long as the key stays pinned.  Records carry an absolute
expiry thirty minutes out, so a provider that stops republishing
vanishes from the mesh within one TTL.  ``find_providers`` runs the
same iterative walk but asks each hop for records as well as closer
peers, stopping early once enough distinct providers are in hand.

Tables are maintained opportunistically.  Any authenticated request
teaches the server about the requester; respondents get refreshed on
every reply.  A full bucket never drops a live peer for an unproven
newcomer: the least recently seen contact is pinged first and only
replaced if it stays silent.  Peers that time out on a query are
removed immediately, so dead contacts do not linger.

Only reachability the transport can prove ends up mattering here:
contacts carry the listen address from the peer's hello, and peers
whose address stops answering fall out of the table through the
ping check.  There is no defense against adversarial ids and records
are not signed; this layer trusts the connection's identity check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import wire
from .errors import PeermeshError
from .futures import Future
from .ids import Key256, PeerId, distance_int, shared_prefix_len
from .traversal import Connection, ConnectionManager, addr_text, parse_addr

DEFAULT_K = 20
DEFAULT_ALPHA = 3

KEY_BITS = 256


class DhtError(PeermeshError):
    pass


class SelfInsert(DhtError):
    """The routing table never holds the node's own id."""


class QueryTimeout(DhtError):
    pass


class QueryFailed(DhtError):
    pass


class AllQueriesFailed(DhtError):
    """Every candidate in an iterative lookup failed or timed out."""


@dataclass
class DhtConfig:
    k: int = DEFAULT_K
    alpha: int = DEFAULT_ALPHA
    query_timeout_us: int = 2_000_000
    provider_ttl_us: int = 1_800_000_000
    republish_interval_us: int = 900_000_000


@dataclass
class Contact:
    """A peer we could dial: identity plus its self-reported listen address."""

    peer_id: PeerId
    addr: tuple | None

    def key(self) -> Key256:
        return self.peer_id.key()


@dataclass
class ProviderRecord:
    """One peer's claim that it can serve the blocks behind ``key``."""

    key: Key256
    provider: PeerId
    addresses: list
    expiry_us: int


@dataclass
class LookupResult:
    peers: list  # k closest responsive contacts, ascending distance
    rounds: int
    queried: int
    records: list = field(default_factory=list)


class RoutingTable:
    """Fixed array of 256 LRU buckets, one per shared-prefix length.

    Buckets order contacts least recently seen first.  ``insert`` never
    evicts on its own: a full bucket yields the LRS contact and leaves
    the table untouched until the caller delivers a ping verdict.
    """

    def __init__(self, self_id: PeerId, k: int = DEFAULT_K):
        self.self_id = self_id
        self.self_key = self_id.key()
        self.k = k
        self.buckets: list[list[Contact]] = [[] for _ in range(KEY_BITS)]
        self._index: dict[PeerId, int] = {}

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, peer_id: PeerId) -> bool:
        return peer_id in self._index

    def bucket_index(self, peer_id: PeerId) -> int:
        if peer_id == self.self_id:
            raise SelfInsert("own id has no bucket")
        return shared_prefix_len(self.self_key, peer_id.key())

    def insert(self, peer_id: PeerId, addr: tuple | None):
        """Returns ("inserted"|"already", None) or ("full", lrs_contact)."""
        idx = self.bucket_index(peer_id)
        bucket = self.buckets[idx]
        if peer_id in self._index:
            for pos, c in enumerate(bucket):
                if c.peer_id == peer_id:
                    if addr is not None:
                        c.addr = addr
                    bucket.append(bucket.pop(pos))
                    return "already", None
        if len(bucket) < self.k:
            bucket.append(Contact(peer_id, addr))
            self._index[peer_id] = idx
            return "inserted", None
        return "full", bucket[0]

    def remove(self, peer_id: PeerId) -> bool:
        idx = self._index.pop(peer_id, None)
        if idx is None:
            return False
        self.buckets[idx] = [c for c in self.buckets[idx] if c.peer_id != peer_id]
        return True

    def touch(self, peer_id: PeerId) -> None:
        """Move a contact to the most recently seen end of its bucket."""
        idx = self._index.get(peer_id)
        if idx is None:
            return
        bucket = self.buckets[idx]
        for pos, c in enumerate(bucket):
            if c.peer_id == peer_id:
                bucket.append(bucket.pop(pos))
                return

    def get(self, peer_id: PeerId) -> Contact | None:
        idx = self._index.get(peer_id)
        if idx is None:
            return None
        for c in self.buckets[idx]:
            if c.peer_id == peer_id:
                return c
        return None

    def contacts(self) -> list[Contact]:
        out = []
        for bucket in self.buckets:
            out.extend(bucket)
        return out

    def closest(self, target: Key256, count: int, exclude=()) -> list[Contact]:
        """The ``count`` known contacts nearest ``target``, ascending.

        Ties cannot occur between distinct ids, but ordering stays
        deterministic regardless: distance first, then raw id bytes.
        """
        pool = [c for c in self.contacts() if c.peer_id not in exclude]
        pool.sort(key=lambda c: (distance_int(target, c.key()), c.peer_id.digest))
        return pool[:count]


class _PendingQuery:
    __slots__ = ("future", "timer", "conn", "msg_type", "peer_id", "subject")

    def __init__(self, future, timer, conn, msg_type, peer_id, subject):
        self.future = future
        self.timer = timer
        self.conn = conn
        self.msg_type = msg_type
        self.peer_id = peer_id
        self.subject = subject


class _Lookup:
    """One iterative walk toward a target key.

    Queries go out in strict waves of at most alpha, and the next wave
    starts only after every query in the current one has resolved.
    That caps in-flight queries at alpha by construction, makes the
    round count well defined, and keeps replay deterministic.  No peer
    is ever queried twice: membership in ``queried`` is permanent.

    The walk converges on twice as many responders as it returns.  A
    key's neighborhood can straddle a prefix split, leaving its outer
    members known only to their own neighbors; querying one extra ring
    of peers pulls those stragglers in before the top k is read off.
    """

    def __init__(self, svc: "DhtService", target: Key256,
                 want_records: bool = False, max_records: int = 0):
        self.svc = svc
        self.target = target
        self.want_records = want_records
        self.max_records = max_records
        self.k = svc.cfg.k
        self.alpha = svc.cfg.alpha
        self.cover = self.k * 2
        self.future: Future = Future()
        self.rounds = 0
        self.queried: set[PeerId] = set()
        self.responded: set[PeerId] = set()
        self.contacts: dict[PeerId, Contact] = {}
        self.records: dict[PeerId, ProviderRecord] = {}
        self._dist: dict[PeerId, int] = {}
        self.finished = False

    def start(self) -> Future:
        if self.want_records:
            for rec in self.svc.local_records(self.target):
                self.records[rec.provider] = rec
        for c in self.svc.table.closest(self.target, self.k):
            self._absorb(c)
        self._next_wave()
        return self.future

    def _absorb(self, contact: Contact) -> None:
        pid = contact.peer_id
        if pid == self.svc.self_id or pid in self.contacts:
            return
        self.contacts[pid] = contact
        self._dist[pid] = distance_int(self.target, contact.key())

    def _order(self, pid: PeerId):
        return self._dist[pid], pid.digest

    def _candidates(self) -> list[PeerId]:
        pend = [p for p in self.contacts if p not in self.queried]
        pend.sort(key=self._order)
        return pend

    def _best(self, count: int) -> list[PeerId]:
        alive = sorted(self.responded, key=self._order)
        return alive[:count]

    def _converged(self, cands: list[PeerId]) -> bool:
        if self.want_records and len(self.records) >= self.max_records > 0:
            return True
        if not cands:
            return True
        best = self._best(self.cover)
        if len(best) < self.cover:
            return False
        # Nothing left that could displace the best responders found so far.
        return self._order(cands[0]) > self._order(best[-1])

    def _next_wave(self) -> None:
        if self.finished:
            return
        cands = self._candidates()
        if self._converged(cands):
            self._finish()
            return
        batch = cands[:self.alpha]
        self.rounds += 1
        state = {"left": len(batch)}
        for pid in batch:
            self.queried.add(pid)
            fut = self._query_one(self.contacts[pid])
            fut.add_done_callback(lambda f, pid=pid: self._settled(pid, f, state))

    def _query_one(self, contact: Contact) -> Future:
        if self.want_records:
            payload = (wire.Writer().raw(self.target.raw)
                       .u64(max(self.max_records, self.k)).done())
            return self.svc._request(contact, wire.DHT_GET_PROVIDERS, payload)
        payload = wire.Writer().raw(self.target.raw).done()
        return self.svc._request(contact, wire.DHT_FIND_NODE, payload)

    def _settled(self, pid: PeerId, fut: Future, state: dict) -> None:
        if fut.exception() is None:
            self.responded.add(pid)
            if self.want_records:
                records, closer = fut.result()
                now = self.svc.now_us()
                for rec in records:
                    if rec.expiry_us <= now or rec.provider in self.records:
                        continue
                    self.records[rec.provider] = rec
            else:
                closer = fut.result()
            for c in closer:
                self._absorb(c)
        state["left"] -= 1
        if state["left"] == 0:
            self._next_wave()

    def _finish(self) -> None:
        self.finished = True
        if not self.responded and self.queried and not self.want_records:
            self.future.set_exception(
                AllQueriesFailed("queried %d peers, none answered" % len(self.queried)))
            return
        if not self.contacts and not self.want_records:
            self.future.set_exception(AllQueriesFailed("no known peers to query"))
            return
        peers = [self.contacts[p] for p in self._best(self.k)]
        self.future.set_result(LookupResult(
            peers=peers,
            rounds=self.rounds,
            queried=len(self.queried),
            records=sorted(self.records.values(), key=lambda r: r.provider.digest),
        ))


class DhtService:
    """Discovery endpoint wired onto one connection manager.

    Handles the 0x10..0x17 frame range: answers pings, serves closest
    contacts and provider records out of local state, and runs the
    client side of iterative lookups and announcements.
    """

    def __init__(self, mgr: ConnectionManager, cfg: DhtConfig | None = None):
        self.mgr = mgr
        self.cfg = cfg or DhtConfig()
        self.self_id = mgr.peer_id
        self.table = RoutingTable(self.self_id, self.cfg.k)
        # key raw -> provider id -> record; newest announcement wins
        self.store: dict[bytes, dict[PeerId, ProviderRecord]] = {}
        self.pins: dict[bytes, object] = {}
        self._pin_addrs: dict[bytes, list | None] = {}
        self._pending: dict[int, _PendingQuery] = {}
        self._next_req = 0
        self._evicting: set[int] = set()
        self._closed = False
        mgr.add_handler(wire.DHT_PING, wire.DHT_ACK, self._on_frame)
        mgr.on_disconnect(self._conn_closed)

    def now_us(self) -> int:
        return self.mgr.host.now_us()

    def shutdown(self) -> None:
        self._closed = True
        for raw in list(self.pins):
            self.unprovide(Key256(raw))
        for req in list(self._pending):
            self._fail_pending(req, QueryFailed("service shut down"))

    # ------------------------------------------------------------- client ops

    def ping(self, contact: Contact) -> Future:
        """Round-trip probe; resolves to the elapsed microseconds."""
        sent = self.now_us()
        fut = Future()
        inner = self._request(contact, wire.DHT_PING, b"")
        inner.add_done_callback(
            lambda f: fut.set_exception(f.exception()) if f.exception() is not None
            else fut.set_result(self.now_us() - sent))
        return fut

    def iterative_find_node(self, target: Key256) -> Future:
        """Walk to the k closest live peers; resolves to a LookupResult."""
        return _Lookup(self, target).start()

    def bootstrap(self, contact: Contact) -> Future:
        """Adopt one known peer, then look up our own id to fill buckets."""
        self._learn(contact.peer_id, contact.addr)
        return self.iterative_find_node(self.self_id.key())

    def refresh(self, depth: int = 8) -> Future:
        """Probe the keyspace to keep shallow buckets populated.

        A self-lookup only walks toward our own id, so the subtrees on
        the other side of each early bit stay invisible until someone
        from there talks to us.  Refreshing fixes both directions at
        once: one lookup lands in each shallow bucket's range, and the
        peers serving those lookups learn us in return.  Resolves to
        the number of probes that reached anyone.
        """
        targets = [self.self_id.key()]
        for idx in range(min(depth, KEY_BITS)):
            targets.append(self._bucket_probe_key(idx))
        fut = Future()
        state = {"left": len(targets), "ok": 0}

        def one_done(f):
            if f.exception() is None:
                state["ok"] += 1
            state["left"] -= 1
            if state["left"] == 0:
                fut.set_result(state["ok"])

        # Sequential, not parallel: later probes benefit from what the
        # earlier ones taught the table.
        def launch(i):
            if i >= len(targets):
                return
            walk = self.iterative_find_node(targets[i])
            walk.add_done_callback(lambda f: (one_done(f), launch(i + 1)))

        launch(0)
        return fut

    def _bucket_probe_key(self, idx: int) -> Key256:
        """A random key agreeing with our id on exactly ``idx`` leading bits."""
        probe = bytearray(self.mgr.host.rng.randbytes(32))
        mine = self.self_id.digest
        for i in range(idx):
            byte, bit = divmod(i, 8)
            mask = 1 << (7 - bit)
            probe[byte] = (probe[byte] & ~mask) | (mine[byte] & mask)
        byte, bit = divmod(idx, 8)
        mask = 1 << (7 - bit)
        probe[byte] = (probe[byte] & ~mask) | (~mine[byte] & mask)
        return Key256(bytes(probe))

    def provide(self, key: Key256, addresses: list | None = None) -> Future:
        """Announce this node as a provider and keep the record fresh.

        Stores on the k nodes closest to the key, counting ourselves
        when we rank among them, and republishes every interval until
        ``unprovide``.  Resolves to the number of nodes now holding
        the record.
        """
        raw = key.raw
        self.unprovide(key)
        self.pins[raw] = None
        self._pin_addrs[raw] = addresses
        self._arm_republish(raw)
        return self._publish(key, addresses)

    def unprovide(self, key: Key256) -> None:
        timer = self.pins.pop(key.raw, None)
        self._pin_addrs.pop(key.raw, None)
        if timer is not None:
            timer.cancel()

    def find_providers(self, key: Key256, max_records: int = 20) -> Future:
        """Collect up to ``max_records`` distinct providers for a key.

        An empty result is a valid answer; lookup failures are not
        propagated because local records alone may satisfy the call.
        """
        fut = Future()
        walk = _Lookup(self, key, want_records=True, max_records=max_records).start()

        def done(f):
            if f.exception() is not None:
                fut.set_exception(f.exception())
                return
            records = f.result().records[:max_records]
            fut.set_result(records)

        walk.add_done_callback(done)
        return fut

    def local_records(self, key: Key256) -> list[ProviderRecord]:
        """Unexpired records held for ``key``; prunes the stale ones."""
        per_key = self.store.get(key.raw)
        if not per_key:
            return []
        now = self.now_us()
        stale = [p for p, rec in per_key.items() if rec.expiry_us <= now]
        for p in stale:
            del per_key[p]
        if not per_key:
            del self.store[key.raw]
            return []
        return sorted(per_key.values(), key=lambda r: r.provider.digest)

    # ------------------------------------------------------- provider publish

    def provider_addresses(self) -> list:
        """Addresses advertised in our own provider records."""
        addr = self.mgr.host.address
        return [addr] if addr is not None else []

    def _arm_republish(self, raw: bytes) -> None:
        if self._closed or raw not in self.pins:
            return

        def fire():
            if raw not in self.pins:
                return
            self._publish(Key256(raw), self._pin_addrs.get(raw))
            self._arm_republish(raw)

        self.pins[raw] = self.mgr.host.call_later(self.cfg.republish_interval_us, fire)

    def _publish(self, key: Key256, addresses: list | None) -> Future:
        fut = Future()
        addrs = addresses if addresses is not None else self.provider_addresses()
        if not self.table.contacts():
            # Nobody else to ask: we are trivially among the k closest.
            self._store_local(key, addrs)
            fut.set_result(1)
            return fut
        walk = self.iterative_find_node(key)
        walk.add_done_callback(lambda f: self._place_records(key, addrs, f, fut))
        return fut

    def _place_records(self, key: Key256, addrs: list, walk: Future, fut: Future) -> None:
        if walk.exception() is not None:
            fut.set_exception(walk.exception())
            return
        peers: list[Contact] = walk.result().peers
        self_dist = distance_int(key, self.self_id.key())
        ranked = sorted(
            [(distance_int(key, c.key()), c.peer_id.digest, c) for c in peers]
            + [(self_dist, self.self_id.digest, None)])
        targets = ranked[:self.cfg.k]
        stored = {"n": 0, "left": 0}
        payload = _write_addrs(wire.Writer().raw(key.raw), addrs).done()
        acks: list[Future] = []
        for _, _, contact in targets:
            if contact is None:
                self._store_local(key, addrs)
                stored["n"] += 1
                continue
            acks.append(self._request(contact, wire.DHT_ADD_PROVIDER, payload))
        if not acks:
            fut.set_result(stored["n"])
            return
        stored["left"] = len(acks)

        def one_done(f):
            if f.exception() is None:
                stored["n"] += 1
            stored["left"] -= 1
            if stored["left"] == 0:
                fut.set_result(stored["n"])

        for f in acks:
            f.add_done_callback(one_done)

    def _store_local(self, key: Key256, addrs: list) -> None:
        rec = ProviderRecord(key, self.self_id, list(addrs),
                             self.now_us() + self.cfg.provider_ttl_us)
        self.store.setdefault(key.raw, {})[self.self_id] = rec

    # ------------------------------------------------------------ request i/o

    def _request(self, contact: Contact, msg_type: int, payload: bytes) -> Future:
        fut = Future()
        conn = self.mgr.conns.get(contact.peer_id)
        if conn is not None and not conn.closed:
            self._send_request(conn, msg_type, payload, fut)
            return fut
        if contact.addr is None:
            fut.set_exception(QueryFailed("no address for %r" % contact.peer_id))
            return fut
        dial = self.mgr.connect_addr(contact.addr, expect=contact.peer_id)

        def dialed(f):
            if f.exception() is not None:
                # Undialable is as dead as unresponsive for table purposes.
                self.table.remove(contact.peer_id)
                fut.set_exception(QueryFailed(str(f.exception())))
            else:
                self._send_request(f.result(), msg_type, payload, fut)

        dial.add_done_callback(dialed)
        return fut

    def _send_request(self, conn: Connection, msg_type: int, payload: bytes,
                      fut: Future) -> None:
        self._next_req += 1
        req = self._next_req
        timer = self.mgr.host.call_later(
            self.cfg.query_timeout_us, lambda: self._timed_out(req))
        # Queries about a key carry it in the first 32 payload bytes;
        # replies do not repeat it, so remember the subject here.
        subject = payload[:32] if msg_type == wire.DHT_GET_PROVIDERS else None
        self._pending[req] = _PendingQuery(fut, timer, conn, msg_type,
                                           conn.peer_id, subject)
        conn.send(msg_type, wire.Writer().u64(req).raw(payload).done())

    def _timed_out(self, req: int) -> None:
        pq = self._pending.pop(req, None)
        if pq is None:
            return
        # Silence is the liveness signal here: drop the contact now.
        self.table.remove(pq.peer_id)
        pq.future.set_exception(QueryTimeout("no answer from %r" % pq.peer_id))

    def _fail_pending(self, req: int, err: Exception) -> None:
        pq = self._pending.pop(req, None)
        if pq is None:
            return
        pq.timer.cancel()
        pq.future.set_exception(err)

    def _conn_closed(self, conn: Connection) -> None:
        for req in [r for r, pq in self._pending.items() if pq.conn is conn]:
            self._fail_pending(req, QueryFailed("connection lost"))

    # -------------------------------------------------------------- table upkeep

    def _learn(self, peer_id: PeerId, addr: tuple | None) -> None:
        """Feed one observed peer into the table, pinging before eviction."""
        if peer_id == self.self_id:
            return
        verdict, lrs = self.table.insert(peer_id, addr)
        if verdict != "full":
            return
        idx = self.table.bucket_index(peer_id)
        if idx in self._evicting:
            return
        self._evicting.add(idx)
        probe = self._request(lrs, wire.DHT_PING, b"")

        def verdict_in(f):
            self._evicting.discard(idx)
            if f.exception() is None:
                self.table.touch(lrs.peer_id)
                return
            self.table.remove(lrs.peer_id)
            self.table.insert(peer_id, addr)

        probe.add_done_callback(verdict_in)

    # ------------------------------------------------------------ frame handling

    def _on_frame(self, conn: Connection, msg_type: int, body: bytes) -> None:
        try:
            r = wire.Reader(body)
            req = r.u64()
            if msg_type in (wire.DHT_PING, wire.DHT_FIND_NODE,
                            wire.DHT_GET_PROVIDERS, wire.DHT_ADD_PROVIDER):
                self._learn(conn.peer_id, conn.peer_listen)
                self._serve(conn, msg_type, req, r)
            else:
                self._response(conn, msg_type, req, r)
        except wire.WireError:
            pass  # malformed frame from an authenticated peer, drop it

    def _serve(self, conn: Connection, msg_type: int, req: int, r: wire.Reader) -> None:
        if msg_type == wire.DHT_PING:
            conn.send(wire.DHT_PONG, wire.Writer().u64(req).done())
            return
        if msg_type == wire.DHT_FIND_NODE:
            target = Key256(r.raw(32))
            found = self.table.closest(target, self.cfg.k, exclude=(conn.peer_id,))
            conn.send(wire.DHT_NODES, _write_contacts(
                wire.Writer().u64(req), found).done())
            return
        if msg_type == wire.DHT_GET_PROVIDERS:
            target = Key256(r.raw(32))
            limit = r.u64()
            records = self.local_records(target)[:limit]
            w = wire.Writer().u64(req).u64(len(records))
            for rec in records:
                w.raw(rec.provider.digest).u64(rec.expiry_us)
                _write_addrs(w, rec.addresses)
            found = self.table.closest(target, self.cfg.k, exclude=(conn.peer_id,))
            conn.send(wire.DHT_PROVIDERS, _write_contacts(w, found).done())
            return
        # DHT_ADD_PROVIDER: the sender itself is the provider being recorded.
        key = Key256(r.raw(32))
        addrs = _read_addrs(r)
        rec = ProviderRecord(key, conn.peer_id, addrs,
                             self.now_us() + self.cfg.provider_ttl_us)
        self.store.setdefault(key.raw, {})[conn.peer_id] = rec
        conn.send(wire.DHT_ACK, wire.Writer().u64(req).done())

    def _response(self, conn: Connection, msg_type: int, req: int, r: wire.Reader) -> None:
        pq = self._pending.get(req)
        if pq is None or pq.conn is not conn:
            return
        expected = _RESPONSE_FOR.get(pq.msg_type)
        if msg_type != expected:
            return
        del self._pending[req]
        pq.timer.cancel()
        self._learn(conn.peer_id, conn.peer_listen)
        if msg_type == wire.DHT_NODES:
            pq.future.set_result(_read_contacts(r))
        elif msg_type == wire.DHT_PROVIDERS:
            records = []
            for _ in range(r.u64()):
                provider = PeerId(r.raw(32))
                expiry = r.u64()
                addrs = _read_addrs(r)
                records.append(ProviderRecord(
                    Key256(pq.subject), provider, addrs, expiry))
            pq.future.set_result((records, _read_contacts(r)))
        else:
            pq.future.set_result(None)


_RESPONSE_FOR = {
    wire.DHT_PING: wire.DHT_PONG,
    wire.DHT_FIND_NODE: wire.DHT_NODES,
    wire.DHT_GET_PROVIDERS: wire.DHT_PROVIDERS,
    wire.DHT_ADD_PROVIDER: wire.DHT_ACK,
}


def _write_contacts(w: wire.Writer, contacts: list[Contact]) -> wire.Writer:
    w.u64(len(contacts))
    for c in contacts:
        w.raw(c.peer_id.digest).text(addr_text(c.addr))
    return w


def _read_contacts(r: wire.Reader) -> list[Contact]:
    out = []
    for _ in range(r.u64()):
        pid = PeerId(r.raw(32))
        out.append(Contact(pid, parse_addr(r.text())))
    return out


def _write_addrs(w: wire.Writer, addrs: list) -> wire.Writer:
    w.u64(len(addrs))
    for a in addrs:
        w.text(addr_text(a))
    return w


def _read_addrs(r: wire.Reader) -> list:
    out = []
    for _ in range(r.u64()):
        a = parse_addr(r.text())
        if a is not None:
            out.append(a)
    return out
