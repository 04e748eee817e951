"""Block exchange: wantlists, multi-provider fetch sessions, reassignment.

A fetch session resolves providers for a root id, pulls the manifest
from whichever provider answers first, then fans the chunk wants out.
Interest is announced with WANT_HAVE to every session provider; actual
transfers use WANT_BLOCK, assigned round-robin over the providers that
answered HAVE, with a cap on outstanding transfers per provider and a
deadline per want.  A want whose deadline lapses, or that comes back
DONT_HAVE, moves to the next provider that claims the block; a want
that runs out of willing providers fails the whole session, naming the
block that could not be found.

A chunk becomes assignable once every live session provider has
answered for it, or after the probe deadline for the silent ones;
assigning on first HAVE would hand every want to whichever provider
answers fastest while the rest sit idle, and the transfer would run
no faster than a single-provider fetch.

Every received block is hash-verified before it touches the store.  A
provider that ships bytes not matching their id is demoted to the back
of the session's ranking and the block is re-requested elsewhere;
nobody is banned, since identities are cheap here and the store's own
put check is the real integrity gate.

The serving side is stateless beyond remembering each peer's open
wantlist: WANT_HAVE and WANT_BLOCK are answered synchronously from the
local store, CANCEL forgets the entry.  Priorities travel in the wire
format but the default scheduler ignores them.

One practical bound inherited from the frame format: a manifest must
fit in a single frame, which caps fetchable objects near 32 Ki chunks
(8 GiB at the default chunk size).  Larger objects can still be stored
and assembled locally, just not pulled over this protocol; a want for
a block too large to frame is answered DONT_HAVE.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import wire
from .content import DEFAULT_CHUNK_SIZE, Manifest, assemble, store_object
from .dht import Contact
from .errors import PeermeshError
from .futures import Future
from .ids import Cid, PeerId, compute_cid

WANT_HAVE = "want-have"
WANT_BLOCK = "want-block"

_UNKNOWN = 0
_YES = 1
_NO = 2


class ExchangeError(PeermeshError):
    pass


class NoProviders(ExchangeError):
    pass


class BlockUnavailable(ExchangeError):
    def __init__(self, cid: Cid):
        super().__init__("no reachable provider could serve %s" % cid.text)
        self.cid = cid


@dataclass
class ExchangeConfig:
    max_outstanding: int = 8           # per provider, per session
    want_deadline_us: int = 2_000_000  # from assignment to reassignment
    max_providers: int = 8             # session width


class ExchangeService:
    """Serves local blocks to peers and runs outbound fetch sessions."""

    def __init__(self, mgr, store, dht, cfg: ExchangeConfig | None = None):
        self.mgr = mgr
        self.store = store
        self.dht = dht
        self.cfg = cfg or ExchangeConfig()
        # what each peer currently wants from us: cid -> (kind, priority)
        self.remote_wants: dict[PeerId, dict[Cid, tuple]] = {}
        self.sessions: list[_FetchSession] = []
        self.last_session: _FetchSession | None = None
        mgr.add_handler(wire.EXCH_WANT_HAVE, wire.EXCH_CANCEL, self._on_frame)
        mgr.on_disconnect(self._conn_closed)

    def publish(self, data: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE) -> Future:
        """Store, pin, and announce an object; resolves to its root id."""
        root = store_object(self.store, data, chunk_size)
        self.store.pin(root)
        fut: Future = Future()

        def announced(f):
            if f.exception() is not None:
                fut.set_exception(f.exception())
            else:
                fut.set_result(root)

        self.dht.provide(root.key()).add_done_callback(announced)
        return fut

    def fetch(self, root: Cid, hint_providers: list | None = None) -> Future:
        """Pull the object behind ``root``; resolves to its bytes."""
        session = _FetchSession(self, root, hint_providers)
        self.sessions.append(session)
        self.last_session = session
        session.start()
        return session.future

    # ------------------------------------------------------------- serving

    def _on_frame(self, conn, msg_type: int, body: bytes) -> None:
        priority = 0
        data = b""
        try:
            r = wire.Reader(body)
            cid = Cid.decode(r.raw(36))
            if msg_type in (wire.EXCH_WANT_HAVE, wire.EXCH_WANT_BLOCK):
                priority = r.u64()
            elif msg_type == wire.EXCH_BLOCK:
                data = r.blob()
            if not r.at_end():
                raise wire.MalformedFrame("trailing bytes in exchange frame")
        except PeermeshError:
            conn.close()  # malformed exchange traffic is a protocol breach
            return
        if msg_type in (wire.EXCH_WANT_HAVE, wire.EXCH_WANT_BLOCK):
            self._serve_want(conn, msg_type, cid, priority)
        elif msg_type == wire.EXCH_BLOCK:
            self._block_in(conn, cid, data)
        elif msg_type == wire.EXCH_CANCEL:
            self.remote_wants.get(conn.peer_id, {}).pop(cid, None)
        else:
            self._availability_in(conn, cid, msg_type == wire.EXCH_HAVE)

    def _serve_want(self, conn, msg_type: int, cid: Cid, priority: int) -> None:
        kind = WANT_HAVE if msg_type == wire.EXCH_WANT_HAVE else WANT_BLOCK
        self.remote_wants.setdefault(conn.peer_id, {})[cid] = (kind, priority)
        if kind == WANT_HAVE:
            reply = wire.EXCH_HAVE if self.store.has(cid) else wire.EXCH_DONT_HAVE
            conn.send(reply, wire.Writer().raw(cid.encode()).done())
            return
        if self.store.has(cid):
            data = self.store.get(cid)
            if len(data) + 48 <= wire.MAX_FRAME_BODY:
                conn.send(wire.EXCH_BLOCK,
                          wire.Writer().raw(cid.encode()).blob(data).done())
                # A served want is a satisfied want.
                self.remote_wants.get(conn.peer_id, {}).pop(cid, None)
                return
        conn.send(wire.EXCH_DONT_HAVE, wire.Writer().raw(cid.encode()).done())

    def _block_in(self, conn, cid: Cid, data: bytes) -> None:
        for session in self.sessions:
            if session.wants(cid):
                session.block_arrived(conn.peer_id, cid, data)
                return
        # Unsolicited or stale block: nobody asked, nothing gets stored.

    def _availability_in(self, conn, cid: Cid, have: bool) -> None:
        for session in list(self.sessions):
            if session.wants(cid):
                session.availability(conn.peer_id, cid, have)

    def _conn_closed(self, conn) -> None:
        self.remote_wants.pop(conn.peer_id, None)
        for session in list(self.sessions):
            session.provider_gone(conn.peer_id)

    def _done(self, session) -> None:
        if session in self.sessions:
            self.sessions.remove(session)


class _FetchSession:
    """One root's retrieval: provider ranking, wantlist, scheduler."""

    def __init__(self, svc: ExchangeService, root: Cid, hints: list | None):
        self.svc = svc
        self.root = root
        self.hints = hints
        self.future: Future = Future()
        self.providers: list[PeerId] = []  # rank order; demotion moves to tail
        self.conns: dict[PeerId, object] = {}
        self.have: dict[Cid, dict[PeerId, int]] = {}
        self.tried: dict[Cid, set] = {}
        self.assigned: dict[Cid, tuple] = {}  # cid -> (peer, deadline timer)
        self.outstanding: dict[PeerId, set] = {}
        self.pending: list[Cid] = []
        self.served_by: dict[PeerId, int] = {}
        self.demotions = 0
        self.finished = False
        self._manifest_tried: set = set()
        self._rr = 0
        self._pump_timer = None
        self._probe_timers: list = []

    # ------------------------------------------------------------ lifecycle

    def start(self) -> None:
        if self.svc.store.has(self.root):
            try:
                manifest = Manifest.decode(self.svc.store.get(self.root))
            except PeermeshError as err:
                self._fail(err)
                return
            if all(self.svc.store.has(c) for c in manifest.chunks):
                self._finish()
                return
        if self.hints is not None:
            self._connect_providers(list(self.hints))
        else:
            found = self.svc.dht.find_providers(
                self.root.key(), max_records=self.svc.cfg.max_providers)
            found.add_done_callback(self._providers_found)

    def _providers_found(self, fut: Future) -> None:
        if self.finished:
            return
        if fut.exception() is not None:
            self._fail(NoProviders(str(fut.exception())))
            return
        contacts = []
        for rec in fut.result():
            if rec.provider == self.svc.mgr.peer_id:
                continue
            addr = tuple(rec.addresses[0]) if rec.addresses else None
            contacts.append(Contact(rec.provider, addr))
        self._connect_providers(contacts)

    def _connect_providers(self, contacts: list) -> None:
        contacts = contacts[:self.svc.cfg.max_providers]
        if not contacts:
            self._fail(NoProviders("no provider records for %s" % self.root.text))
            return
        state = {"left": len(contacts)}
        for contact in contacts:
            self._connect_one(contact, state)

    def _connect_one(self, contact: Contact, state: dict) -> None:
        def settled(conn) -> None:
            if self.finished:
                return
            if conn is not None and contact.peer_id not in self.providers:
                self.providers.append(contact.peer_id)
                self.conns[contact.peer_id] = conn
                self.outstanding[contact.peer_id] = set()
                self.served_by.setdefault(contact.peer_id, 0)
            state["left"] -= 1
            if state["left"] == 0:
                self._providers_ready()

        live = self.svc.mgr.conns.get(contact.peer_id)
        if live is not None and not live.closed:
            settled(live)
            return
        if contact.addr is None or contact.peer_id == self.svc.mgr.peer_id:
            settled(None)
            return
        dial = self.svc.mgr.connect_addr(contact.addr, expect=contact.peer_id)
        dial.add_done_callback(
            lambda f: settled(None if f.exception() is not None else f.result()))

    def _providers_ready(self) -> None:
        if not self.providers:
            self._fail(NoProviders(
                "no provider for %s was reachable" % self.root.text))
            return
        if self.svc.store.has(self.root):
            # Manifest already local; only chunks are missing.
            self._expand_manifest(self.svc.store.get(self.root))
        else:
            self._request_manifest()

    # ------------------------------------------------------- manifest phase

    def _request_manifest(self) -> None:
        if self.finished:
            return
        peer = next((p for p in self.providers
                     if p not in self._manifest_tried), None)
        if peer is None:
            self._fail(BlockUnavailable(self.root))
            return
        self._manifest_tried.add(peer)
        timer = self.svc.mgr.host.call_later(
            self.svc.cfg.want_deadline_us, self._manifest_deadline)
        self.assigned[self.root] = (peer, timer)
        self._send_want_block(peer, self.root)

    def _manifest_deadline(self) -> None:
        holder = self.assigned.pop(self.root, None)
        if holder is None or self.finished:
            return
        self._cancel_want(holder[0], self.root)
        self._request_manifest()

    def _manifest_arrived(self, peer: PeerId, data: bytes) -> None:
        holder = self.assigned.pop(self.root, None)
        if holder is not None:
            holder[1].cancel()
            if holder[0] != peer:
                self._cancel_want(holder[0], self.root)
        self.svc.store.put(self.root, data)
        self.served_by[peer] = self.served_by.get(peer, 0) + 1
        try:
            self._expand_manifest(data)
        except PeermeshError as err:
            # Hash-valid bytes that fail to parse: the root id itself names
            # junk, and every provider would return the same bytes.
            self._fail(err)

    def _expand_manifest(self, data: bytes) -> None:
        manifest = Manifest.decode(data)
        missing: list[Cid] = []
        for c in manifest.chunks:
            if c not in missing and not self.svc.store.has(c):
                missing.append(c)
        if not missing:
            self._finish()
            return
        self.pending = missing
        for c in missing:
            self.have[c] = {}
            self.tried[c] = set()
        body_of = {c: wire.Writer().raw(c.encode()).u64(0).done()
                   for c in missing}
        for peer in self.providers:
            conn = self.conns[peer]
            for c in missing:
                conn.send(wire.EXCH_WANT_HAVE, body_of[c])
            # A provider that never answers must not stall the session.
            self._probe_timers.append(self.svc.mgr.host.call_later(
                self.svc.cfg.want_deadline_us,
                lambda p=peer: self._probe_timeout(p)))

    def _probe_timeout(self, peer: PeerId) -> None:
        if self.finished or peer not in self.conns:
            return
        for c in self.pending:
            self.have[c].setdefault(peer, _NO)
        self._pump_soon()

    # ---------------------------------------------------------- scheduling

    def wants(self, cid: Cid) -> bool:
        if self.finished:
            return False
        return (cid == self.root and self.root in self.assigned) or cid in self.have

    def availability(self, peer: PeerId, cid: Cid, has_it: bool) -> None:
        if peer not in self.conns:
            return
        if cid == self.root:
            holder = self.assigned.get(self.root)
            if not has_it and holder is not None and holder[0] == peer:
                self.assigned.pop(self.root)
                holder[1].cancel()
                self._request_manifest()
            return
        if cid not in self.pending:
            return
        self.have[cid][peer] = _YES if has_it else _NO
        if not has_it and self.assigned.get(cid, (None,))[0] == peer:
            self._unassign(cid, peer, count_try=True)
        self._pump_soon()

    def block_arrived(self, peer: PeerId, cid: Cid, data: bytes) -> None:
        if self.finished:
            return
        if compute_cid(data, cid.codec) != cid:
            self._demote(peer)
            if cid == self.root:
                holder = self.assigned.pop(self.root, None)
                if holder is not None:
                    holder[1].cancel()
                self._request_manifest()
            elif self.assigned.get(cid, (None,))[0] == peer:
                self._unassign(cid, peer, count_try=True)
                self._pump_soon()
            return
        if cid == self.root:
            self._manifest_arrived(peer, data)
            return
        if cid not in self.pending:
            return
        self.svc.store.put(cid, data)
        self.pending.remove(cid)
        self.served_by[peer] = self.served_by.get(peer, 0) + 1
        holder = self.assigned.pop(cid, None)
        if holder is not None:
            assignee, timer = holder
            timer.cancel()
            self.outstanding.get(assignee, set()).discard(cid)
        # Retire the want everywhere else, including a slower assignee
        # that is still on the hook for it.
        for other in self.providers:
            if other != peer:
                self._cancel_want(other, cid)
        if not self.pending:
            self._finish()
        else:
            self._pump_soon()

    def provider_gone(self, peer: PeerId) -> None:
        if self.finished or peer not in self.conns:
            return
        self.providers.remove(peer)
        self.conns.pop(peer, None)
        for cid in list(self.outstanding.pop(peer, ())):
            holder = self.assigned.pop(cid, None)
            if holder is not None:
                holder[1].cancel()
        holder = self.assigned.get(self.root)
        if holder is not None and holder[0] == peer:
            self.assigned.pop(self.root)
            holder[1].cancel()
            self._request_manifest()
            return
        if not self.providers:
            self._fail(BlockUnavailable(
                self.pending[0] if self.pending else self.root))
            return
        self._pump_soon()

    def _deadline(self, cid: Cid) -> None:
        holder = self.assigned.get(cid)
        if holder is None or self.finished:
            return
        peer = holder[0]
        self._unassign(cid, peer, count_try=True)
        self._cancel_want(peer, cid)
        self._pump_soon()

    def _unassign(self, cid: Cid, peer: PeerId, count_try: bool) -> None:
        holder = self.assigned.pop(cid, None)
        if holder is not None:
            holder[1].cancel()
        self.outstanding.get(peer, set()).discard(cid)
        if count_try:
            self.tried.setdefault(cid, set()).add(peer)

    def _pump_soon(self) -> None:
        # Coalesced so one burst of answers triggers one assignment pass.
        if self._pump_timer is None and not self.finished:
            self._pump_timer = self.svc.mgr.host.call_later(0, self._pump)

    def _known(self, cid: Cid) -> bool:
        answers = self.have[cid]
        return all(p in answers for p in self.providers)

    def _pump(self) -> None:
        """Assign every assignable want; leaves nothing eligible behind."""
        self._pump_timer = None
        if self.finished:
            return
        for cid in list(self.pending):
            if cid in self.assigned or not self._known(cid):
                continue
            peer = self._pick_provider(cid)
            if peer is not None:
                timer = self.svc.mgr.host.call_later(
                    self.svc.cfg.want_deadline_us,
                    lambda c=cid: self._deadline(c))
                self.assigned[cid] = (peer, timer)
                self.outstanding[peer].add(cid)
                self._send_want_block(peer, cid)
            elif self._exhausted(cid):
                self._fail(BlockUnavailable(cid))
                return

    def _pick_provider(self, cid: Cid) -> PeerId | None:
        n = len(self.providers)
        for i in range(n):
            peer = self.providers[(self._rr + i) % n]
            if (self.have[cid].get(peer) == _YES
                    and peer not in self.tried[cid]
                    and len(self.outstanding[peer]) < self.svc.cfg.max_outstanding):
                self._rr = (self._rr + i + 1) % n
                return peer
        return None

    def _exhausted(self, cid: Cid) -> bool:
        for peer in self.providers:
            if peer in self.tried[cid]:
                continue
            if self.have[cid].get(peer, _UNKNOWN) == _NO:
                continue
            return False  # an answer, a slot, or a retry is still possible
        return True

    def _demote(self, peer: PeerId) -> None:
        if peer in self.providers:
            self.providers.remove(peer)
            self.providers.append(peer)
            self.demotions += 1

    # ------------------------------------------------------------ plumbing

    def _send_want_block(self, peer: PeerId, cid: Cid) -> None:
        conn = self.conns.get(peer)
        if conn is not None:
            conn.send(wire.EXCH_WANT_BLOCK,
                      wire.Writer().raw(cid.encode()).u64(0).done())

    def _cancel_want(self, peer: PeerId, cid: Cid) -> None:
        conn = self.conns.get(peer)
        if conn is not None and not conn.closed:
            conn.send(wire.EXCH_CANCEL, wire.Writer().raw(cid.encode()).done())

    def _cleanup(self) -> None:
        for cid, (peer, timer) in list(self.assigned.items()):
            timer.cancel()
            self._cancel_want(peer, cid)
        self.assigned.clear()
        for cid in self.pending:
            # Abandoned interest: withdraw the announcements too.
            for peer in self.providers:
                self._cancel_want(peer, cid)
        self.pending = []
        if self._pump_timer is not None:
            self._pump_timer.cancel()
            self._pump_timer = None
        for timer in self._probe_timers:
            timer.cancel()
        self._probe_timers.clear()
        self.svc._done(self)

    def _finish(self) -> None:
        if self.finished:
            return
        self.finished = True
        self._cleanup()
        try:
            self.future.set_result(assemble(self.svc.store, self.root))
        except PeermeshError as err:
            self.future.set_exception(err)

    def _fail(self, err: Exception) -> None:
        if self.finished:
            return
        self.finished = True
        self._cleanup()
        self.future.set_exception(err)
