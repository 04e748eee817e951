"""Replicated state that merges without coordination.

Two conflict-free replicated types cover the desk-scale needs: an
observed-remove set for membership facts (device lists, topic
subscriptions) and a last-writer-wins map for small key/value documents
(profile fields, pointers to content roots). Both are delta-state
types: every mutation returns a delta that peers can merge, and whole
states join as a semilattice, so replicas converge no matter how the
updates interleave.

Removal works without tombstones. Every mutation mints a dot, an
(actor, counter) pair unique across the cluster, and the set keeps only
the dots currently observed for each element. The causal context (a
version vector) remembers every dot ever absorbed, which lets a merge
tell "an add you have not seen" apart from "a dot I removed": a dot
missing from one side but covered by that side's context is dead, and
stays dead everywhere once the states meet.

Every delta here is complete: whatever its context covers is either
shipped in the delta or genuinely dead at the sender. Merging reads an
absent-but-covered dot as removed, so an incomplete delta would turn
old news into deletions; completeness is what makes deltas safe to
merge in any order, any number of times. The practical consequence is
that mutation ops return snapshots of the mutated state rather than
just the touched entry, because a contiguous version vector cannot
cover a fresh dot without also covering every older one. Desk-scale
states are small; correctness costs little here.

delta_since is the one trimming exception: map slots whose writes the
receiver has already covered may be dropped, since map merges never
delete and the receiver provably absorbed those writes. That trim is
valid only against the receiver's own version vector, so a delta built
for one peer must not be forwarded to another.

SyncService replicates named topics over the live mesh with periodic
anti-entropy instead of a broadcast layer: every round it offers a
version vector per topic to each connected peer, a lagging peer is sent
a delta, and merged deltas are acknowledged so a converged topic goes
silent. Frames lost to partitions or crashes cost one round; the next
tick re-offers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

from . import wire
from .errors import PeermeshError
from .ids import PeerId

ORSET_KIND = 0x01
LWW_KIND = 0x02

SYNC_INTERVAL_US = 5_000_000


class CrdtError(PeermeshError):
    pass


class IncompatibleState(CrdtError):
    """Merge attempted across different replicated types."""


class MalformedState(CrdtError):
    """Serialized state violates the canonical encoding."""


class UnknownTopic(CrdtError):
    """Operation on a topic this replica does not hold."""


@dataclass(frozen=True, order=True)
class Dot:
    """One mutation event: the minting actor and its op counter."""

    actor: PeerId
    counter: int


class VersionVector:
    """Per-actor high-water marks of absorbed mutations.

    Coverage is contiguous: seeing (A, 5) asserts every dot (A, 1..5)
    has been absorbed. Actors mint their own dots in counter order and
    deltas ship whole suffixes, so contiguity survives every merge.
    """

    __slots__ = ("clock",)

    def __init__(self, clock: Optional[dict] = None):
        self.clock: dict[PeerId, int] = dict(clock) if clock else {}

    def seen(self, dot: Dot) -> bool:
        return self.clock.get(dot.actor, 0) >= dot.counter

    def mint(self, actor: PeerId) -> Dot:
        counter = self.clock.get(actor, 0) + 1
        self.clock[actor] = counter
        return Dot(actor, counter)

    def absorb(self, other: "VersionVector") -> None:
        for actor, counter in other.clock.items():
            if counter > self.clock.get(actor, 0):
                self.clock[actor] = counter

    def dominates(self, other: "VersionVector") -> bool:
        """True when this vector has seen everything the other has."""
        return all(self.clock.get(a, 0) >= c for a, c in other.clock.items())

    def copy(self) -> "VersionVector":
        return VersionVector(self.clock)

    def __eq__(self, other) -> bool:
        return isinstance(other, VersionVector) and self.clock == other.clock

    def __repr__(self):
        inner = ", ".join(
            "%s:%d" % (a.digest.hex()[:6], c) for a, c in sorted(self.clock.items()))
        return "VersionVector(%s)" % inner

    def encode_into(self, w: wire.Writer) -> None:
        w.u64(len(self.clock))
        for actor in sorted(self.clock):
            w.raw(actor.digest)
            w.u64(self.clock[actor])

    @classmethod
    def decode_from(cls, r: wire.Reader) -> "VersionVector":
        count = r.u64()
        clock: dict[PeerId, int] = {}
        last = b""
        for _ in range(count):
            digest = r.raw(32)
            if digest <= last and clock:
                raise MalformedState("version vector actors out of order")
            last = digest
            counter = r.u64()
            if counter == 0:
                raise MalformedState("zero counter in version vector")
            clock[PeerId(digest)] = counter
        return cls(clock)


class OrSetState:
    """Observed-remove set: present while any add dot is still live.

    entries maps element bytes to the set of live dots; an element with
    no live dots has no entry at all. Every live dot is covered by the
    context.
    """

    kind = ORSET_KIND
    __slots__ = ("entries", "context")

    def __init__(self, entries: Optional[dict] = None,
                 context: Optional[VersionVector] = None):
        self.entries: dict[bytes, set[Dot]] = {
            element: set(dots) for element, dots in (entries or {}).items()}
        self.context = context.copy() if context is not None else VersionVector()

    def contains(self, element: bytes) -> bool:
        return element in self.entries

    def elements(self) -> list[bytes]:
        return sorted(self.entries)

    def copy(self) -> "OrSetState":
        return OrSetState(self.entries, self.context)

    def __eq__(self, other) -> bool:
        return (isinstance(other, OrSetState)
                and self.entries == other.entries
                and self.context == other.context)

    def __repr__(self):
        return "OrSetState(%d elements, %r)" % (len(self.entries), self.context)

    def encode(self) -> bytes:
        w = wire.Writer()
        w.byte(self.kind)
        self.context.encode_into(w)
        w.u64(len(self.entries))
        for element in sorted(self.entries):
            w.blob(element)
            dots = sorted(self.entries[element])
            w.u64(len(dots))
            for dot in dots:
                w.raw(dot.actor.digest)
                w.u64(dot.counter)
        return w.done()

    @classmethod
    def _decode_body(cls, r: wire.Reader) -> "OrSetState":
        state = cls()
        state.context = VersionVector.decode_from(r)
        count = r.u64()
        last_element = None
        for _ in range(count):
            element = r.blob()
            if last_element is not None and element <= last_element:
                raise MalformedState("set elements out of order")
            last_element = element
            ndots = r.u64()
            if ndots == 0:
                raise MalformedState("element with no live dots")
            dots = set()
            last_dot = None
            for _ in range(ndots):
                dot = Dot(PeerId(r.raw(32)), r.u64())
                if last_dot is not None and dot <= last_dot:
                    raise MalformedState("dots out of order")
                last_dot = dot
                if not state.context.seen(dot):
                    raise MalformedState("live dot outside its context")
                dots.add(dot)
            state.entries[element] = dots
        return state


@dataclass(frozen=True)
class Slot:
    """One map entry: the value, its stamp, and the write that made it."""

    value: bytes
    lamport: int
    dot: Dot

    def rank(self):
        # The stamp is (lamport, actor bytes). The tail exists because
        # one actor can issue the same stamp from two merge histories;
        # without it, merge order would decide which slot survives.
        return (self.lamport, self.dot.actor.digest, self.value, self.dot.counter)


class LwwMapState:
    """Last-writer-wins map ordered by (lamport, actor bytes) stamps."""

    kind = LWW_KIND
    __slots__ = ("slots", "context")

    def __init__(self, slots: Optional[dict] = None,
                 context: Optional[VersionVector] = None):
        self.slots: dict[bytes, Slot] = dict(slots) if slots else {}
        self.context = context.copy() if context is not None else VersionVector()

    def get(self, key: bytes) -> Optional[bytes]:
        slot = self.slots.get(key)
        return slot.value if slot is not None else None

    def keys(self) -> list[bytes]:
        return sorted(self.slots)

    def lamport_clock(self) -> int:
        """Highest stamp seen; derived so state stays pure data."""
        return max((s.lamport for s in self.slots.values()), default=0)

    def copy(self) -> "LwwMapState":
        return LwwMapState(self.slots, self.context)

    def __eq__(self, other) -> bool:
        return (isinstance(other, LwwMapState)
                and self.slots == other.slots
                and self.context == other.context)

    def __repr__(self):
        return "LwwMapState(%d slots, %r)" % (len(self.slots), self.context)

    def encode(self) -> bytes:
        w = wire.Writer()
        w.byte(self.kind)
        self.context.encode_into(w)
        w.u64(len(self.slots))
        for key in sorted(self.slots):
            slot = self.slots[key]
            w.blob(key)
            w.blob(slot.value)
            w.u64(slot.lamport)
            w.raw(slot.dot.actor.digest)
            w.u64(slot.dot.counter)
        return w.done()

    @classmethod
    def _decode_body(cls, r: wire.Reader) -> "LwwMapState":
        state = cls()
        state.context = VersionVector.decode_from(r)
        count = r.u64()
        last_key = None
        for _ in range(count):
            key = r.blob()
            if last_key is not None and key <= last_key:
                raise MalformedState("map keys out of order")
            last_key = key
            value = r.blob()
            lamport = r.u64()
            dot = Dot(PeerId(r.raw(32)), r.u64())
            if not state.context.seen(dot):
                raise MalformedState("slot write outside its context")
            state.slots[key] = Slot(value, lamport, dot)
        return state


State = Union[OrSetState, LwwMapState]

_KINDS = {ORSET_KIND: OrSetState, LWW_KIND: LwwMapState}


def decode_state(raw: bytes):
    """Parse a canonical serialization back into a state.

    Rejects anything non-canonical, not just anything unreadable:
    out-of-order entries, dots outside the context, trailing bytes.
    Canonical form is unique, so equal states are equal bytes.
    """
    r = wire.Reader(raw)
    kind = r.raw(1)[0]
    cls = _KINDS.get(kind)
    if cls is None:
        raise MalformedState("unknown state kind 0x%02x" % kind)
    state = cls._decode_body(r)
    if not r.at_end():
        raise MalformedState("trailing bytes after state")
    return state


def orset_add(state: OrSetState, actor: PeerId, element: bytes) -> OrSetState:
    """Add an element under a fresh dot; the delta is a snapshot.

    The new dot alone would not make a sound delta: its context entry
    necessarily covers every older dot of this actor, and a merge
    treats covered-but-absent as removed. Shipping the whole (small)
    state keeps the delta safe against reordering and replay.
    """
    dot = state.context.mint(actor)
    state.entries.setdefault(element, set()).add(dot)
    return state.copy()


def orset_remove(state: OrSetState, actor: PeerId, element: bytes) -> OrSetState:
    """Drop every observed dot for an element; unseen adds survive.

    Removal mints a dot even though no entry records it: the context
    advance is what tells an up-to-date peer apart from one that still
    needs the removal, so version vector equality keeps implying state
    equality. The delta is a full snapshot, because "removed" travels
    as coverage-without-a-dot and a trimmed live set would read as more
    removals.
    """
    if element not in state.entries:
        return OrSetState()
    del state.entries[element]
    state.context.mint(actor)
    return state.copy()


def lww_put(state: LwwMapState, actor: PeerId, key: bytes, value: bytes,
            lamport: Optional[int] = None) -> LwwMapState:
    """Write a key; the greater (lamport, actor bytes) stamp wins.

    With lamport omitted the state's derived clock advances past every
    stamp it has absorbed, so a local write after a merge always ranks
    above the writes it saw. An explicit lamport is taken as given and
    may lose to the sitting stamp immediately; the returned delta is a
    snapshot of the state after the attempt.
    """
    if lamport is None:
        lamport = state.lamport_clock() + 1
    dot = state.context.mint(actor)
    slot = Slot(value, lamport, dot)
    existing = state.slots.get(key)
    if existing is None or slot.rank() > existing.rank():
        state.slots[key] = slot
    # A write that lost to the existing stamp leaves only its dot
    # behind; shipping the beaten value would let a lagging peer adopt
    # it while the context already covers the winner it never saw.
    return state.copy()


def _join_orset(a: OrSetState, b: OrSetState) -> OrSetState:
    result = OrSetState()
    for element in set(a.entries) | set(b.entries):
        a_dots = a.entries.get(element, set())
        b_dots = b.entries.get(element, set())
        # A dot survives if both sides hold it, or one side holds it
        # and the other has never seen it. Held by one and covered by
        # the other means the other removed it.
        live = ((a_dots & b_dots)
                | {d for d in a_dots - b_dots if not b.context.seen(d)}
                | {d for d in b_dots - a_dots if not a.context.seen(d)})
        if live:
            result.entries[element] = live
    result.context = a.context.copy()
    result.context.absorb(b.context)
    return result


def _join_lww(a: LwwMapState, b: LwwMapState) -> LwwMapState:
    result = LwwMapState()
    for key in set(a.slots) | set(b.slots):
        sa = a.slots.get(key)
        sb = b.slots.get(key)
        if sa is None or (sb is not None and sb.rank() > sa.rank()):
            sa = sb
        result.slots[key] = sa
    result.context = a.context.copy()
    result.context.absorb(b.context)
    return result


def merge(a: State, b: State) -> State:
    """Join two states (or a state and a delta) into a fresh state.

    Associative, commutative, idempotent; the merged context never
    shrinks. States of different kinds do not meet in any lattice, so
    mixing them raises IncompatibleState.
    """
    if isinstance(a, OrSetState) and isinstance(b, OrSetState):
        return _join_orset(a, b)
    if isinstance(a, LwwMapState) and isinstance(b, LwwMapState):
        return _join_lww(a, b)
    raise IncompatibleState(
        "cannot merge %s with %s" % (type(a).__name__, type(b).__name__))


def delta_since(state: State, remote_vv: VersionVector) -> State:
    """Build the delta that brings a replica at remote_vv up to date.

    Guarantees merge(remote, delta) == merge(remote, state) whenever
    remote_vv is the remote's own context. A dominated context yields
    an empty delta. Otherwise the map ships only slots whose write the
    remote has not covered, and the set ships its whole live dot set
    as explained in the module docstring. The map trim leans on what
    remote_vv implies about the remote's slots, so the delta is for
    that remote alone and must not be forwarded.
    """
    if remote_vv.dominates(state.context):
        return type(state)()
    if isinstance(state, OrSetState):
        return state.copy()
    delta = LwwMapState()
    delta.slots = {key: slot for key, slot in state.slots.items()
                   if not remote_vv.seen(slot.dot)}
    delta.context = state.context.copy()
    return delta


def absorb(state: State, incoming: State) -> None:
    """Merge in place, preserving the identity of the held state."""
    joined = merge(state, incoming)
    if isinstance(state, OrSetState):
        state.entries = joined.entries
    else:
        state.slots = joined.slots
    state.context = joined.context


class SyncService:
    """Anti-entropy replication of named topics over the mesh.

    Each round, for every registered topic, the service offers its
    version vector to every connected peer whose last known vector
    does not already dominate it. A peer holding the topic answers a
    lagging offer with a delta, counters with its own offer when the
    offer reveals news it lacks, and acknowledges merged deltas; the
    vector cache fed by offers and acks is what lets a converged topic
    go silent. Offers for topics a peer does not hold are ignored, so
    replication follows registration, not connectivity.
    """

    def __init__(self, mgr, interval_us: int = SYNC_INTERVAL_US):
        self.mgr = mgr
        self.interval_us = interval_us
        self.topics: dict[str, State] = {}
        self._peer_seen: dict[tuple[PeerId, str], VersionVector] = {}
        self._observers: list[Callable[[str], None]] = []
        mgr.add_handler(wire.CRDT_VV_OFFER, wire.CRDT_DELTA_ACK, self._on_frame)
        mgr.on_disconnect(self._on_disconnect)
        self._timer = mgr.host.call_later(interval_us, self._tick)

    @property
    def actor(self) -> PeerId:
        return self.mgr.peer_id

    def stop(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None

    def replicate(self, topic: str, state: State) -> State:
        """Hold a topic and keep it converging with peers that hold it."""
        self.topics[topic] = state
        return state

    def drop(self, topic: str) -> None:
        self.topics.pop(topic, None)

    def state(self, topic: str) -> State:
        state = self.topics.get(topic)
        if state is None:
            raise UnknownTopic("topic %r is not replicated here" % topic)
        return state

    def on_change(self, fn: Callable[[str], None]) -> None:
        """Call fn with the topic name after a remote delta lands."""
        self._observers.append(fn)

    # Mutation helpers acting as this node. The returned deltas are
    # not pushed eagerly; the next round carries the change.

    def add(self, topic: str, element: bytes) -> None:
        orset_add(self.state(topic), self.actor, element)

    def remove(self, topic: str, element: bytes) -> None:
        orset_remove(self.state(topic), self.actor, element)

    def put(self, topic: str, key: bytes, value: bytes,
            lamport: Optional[int] = None) -> None:
        lww_put(self.state(topic), self.actor, key, value, lamport)

    def _tick(self) -> None:
        self._timer = self.mgr.host.call_later(self.interval_us, self._tick)
        for topic, state in self.topics.items():
            for conn in list(self.mgr.conns.values()):
                seen = self._peer_seen.get((conn.peer_id, topic))
                if seen is None or not seen.dominates(state.context):
                    self._send_offer(conn, topic, state)

    def _send_offer(self, conn, topic: str, state: State) -> None:
        w = wire.Writer()
        w.text(topic)
        w.byte(state.kind)
        state.context.encode_into(w)
        conn.send(wire.CRDT_VV_OFFER, w.done())

    def _send_delta(self, conn, topic: str, delta: State) -> None:
        w = wire.Writer()
        w.text(topic)
        body = w.done() + delta.encode()
        # A state past the frame cap cannot sync; stalling beats
        # crashing the tick, and desk-scale topics stay far below it.
        if len(body) <= wire.MAX_FRAME_BODY:
            conn.send(wire.CRDT_DELTA, body)

    def _note_seen(self, peer: PeerId, topic: str, vv: VersionVector) -> None:
        cached = self._peer_seen.get((peer, topic))
        if cached is None:
            self._peer_seen[(peer, topic)] = vv.copy()
        else:
            cached.absorb(vv)

    def _on_frame(self, conn, msg_type: int, body: bytes) -> None:
        try:
            r = wire.Reader(body)
            topic = r.text()
            if msg_type == wire.CRDT_DELTA:
                incoming = decode_state(r.rest())
                kind = incoming.kind
            else:
                kind = r.byte()
                vv = VersionVector.decode_from(r)
                if not r.at_end():
                    raise MalformedState("trailing bytes after vector")
        except PeermeshError:
            conn.close()
            return
        state = self.topics.get(topic)
        if state is None:
            return
        if kind != state.kind:
            # Both ends hold the topic as different types; no merge
            # can ever succeed, so treat it as a protocol breach.
            conn.close()
            return
        if msg_type == wire.CRDT_VV_OFFER:
            self._note_seen(conn.peer_id, topic, vv)
            if not vv.dominates(state.context):
                self._send_delta(conn, topic, delta_since(state, vv))
            if not state.context.dominates(vv):
                # They know dots we lack; invite their delta. Sending
                # our delta first lets their handler see us as caught
                # up and stop the exchange there.
                self._send_offer(conn, topic, state)
        elif msg_type == wire.CRDT_DELTA:
            before = dict(state.context.clock)
            absorb(state, incoming)
            self._note_seen(conn.peer_id, topic, incoming.context)
            w = wire.Writer()
            w.text(topic)
            w.byte(state.kind)
            state.context.encode_into(w)
            conn.send(wire.CRDT_DELTA_ACK, w.done())
            # Crossing offers can deliver the same delta twice; only a
            # context advance means the topic actually moved.
            if state.context.clock != before:
                for fn in list(self._observers):
                    fn(topic)
        else:
            self._note_seen(conn.peer_id, topic, vv)

    def _on_disconnect(self, conn) -> None:
        gone = conn.peer_id
        for key in [k for k in self._peer_seen if k[0] == gone]:
            del self._peer_seen[key]
