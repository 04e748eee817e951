"""Node assembly: configuration, identity, service wiring, operations.

A Node is the whole stack on one host: connection manager, discovery,
block store, exchange, replication, and rpc, built over either a
simulated agent or a live loopback reactor. The same wiring serves
both; only the host construction differs.

Configuration is one YAML mapping with complete defaults, so an empty
file (or no file) is a valid node. Every validation failure names the
offending field.

Operations are the verbs the control socket and the command line
share: a single table maps an op name and a JSON-safe args mapping to
a Future, and a single table maps exceptions to stable error codes.
Binary values cross the JSON boundary as base64.
"""

import base64
import binascii
import os
import threading
from dataclasses import dataclass, field

import yaml

from . import crdt as crdt_mod
from . import exchange as exchange_mod
from . import rpc as rpc_mod
from .content import (BlockStore, ContentError, MissingBlock, NotFound,
                      assemble)
from .crdt import LwwMapState, OrSetState, SyncService, UnknownTopic
from .dht import Contact, DhtConfig, DhtService
from .errors import PeermeshError
from .exchange import ExchangeService
from .futures import Future, FutureTimeout
from .ids import Cid, IdentityError, Keypair, PeerId
from .live import BindFailed, ControlServer, LiveHost
from .rpc import RpcConfig, RpcService
from .traversal import ConnectionManager, TraversalConfig, addr_text, parse_addr


class NodeError(PeermeshError):
    """Problem at the node assembly layer."""


class BadConfig(NodeError):
    """Configuration rejected; the message names the offending field."""


class BadRequest(NodeError):
    """Operation arguments rejected; nothing was attempted."""


class UnknownOp(NodeError):
    """No such operation in the dispatch table."""


# ------------------------------------------------------------------ config


@dataclass
class NodeConfig:
    """Everything a node needs, with defaults complete enough that the
    zero-argument form (an empty config file) is a working node."""

    keypair_file: str | None = None
    secret_hex: str | None = None
    listen_host: str = "127.0.0.1"
    listen_port: int = 0
    bootstrap: list = field(default_factory=list)  # (PeerId, addr) pairs
    relay: bool = False
    dht_k: int = 20
    dht_alpha: int = 3
    store_capacity: int | None = None
    dial_timeout_ms: int = 3000
    hello_timeout_ms: int = 3000
    dht_query_timeout_ms: int = 2000
    rpc_attempt_timeout_ms: int = 2000
    sync_interval_ms: int = 5000
    control_socket: str | None = None
    seed: int | None = None

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = fh.read()
        except OSError as exc:
            raise BadConfig("cannot read %s: %s" % (path, exc))
        try:
            data = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise BadConfig("%s is not valid yaml: %s" % (path, exc))
        return cls.from_mapping(data if data is not None else {})

    @classmethod
    def from_mapping(cls, data):
        if not isinstance(data, dict):
            raise BadConfig("top level: expected a mapping, got %s"
                            % type(data).__name__)
        data = dict(data)  # sections and fields pop as they parse
        cfg = cls()
        seen = set(data)

        identity = _section(data, "identity", seen)
        cfg.keypair_file = _field(identity, "identity.keypair_file", str,
                                  cfg.keypair_file)
        cfg.secret_hex = _field(identity, "identity.secret_hex", str,
                                cfg.secret_hex)
        _reject_unknown(identity, "identity")
        if cfg.keypair_file and cfg.secret_hex:
            raise BadConfig("identity: give keypair_file or secret_hex, not both")
        if cfg.secret_hex is not None:
            try:
                secret = bytes.fromhex(cfg.secret_hex)
            except ValueError:
                raise BadConfig("identity.secret_hex: not hex")
            if len(secret) != 32:
                raise BadConfig("identity.secret_hex: need 32 bytes, got %d"
                                % len(secret))

        listen = _section(data, "listen", seen)
        cfg.listen_host = _field(listen, "listen.host", str, cfg.listen_host)
        cfg.listen_port = _field(listen, "listen.port", int, cfg.listen_port)
        _reject_unknown(listen, "listen")
        if not 0 <= cfg.listen_port <= 65535:
            raise BadConfig("listen.port: %d out of range" % cfg.listen_port)

        peers = data.get("bootstrap")
        seen.discard("bootstrap")
        if peers is not None:
            if not isinstance(peers, list):
                raise BadConfig("bootstrap: expected a list of peer strings")
            for i, entry in enumerate(peers):
                cfg.bootstrap.append(_parse_bootstrap(entry, i))

        cfg.relay = _field(data, "relay", bool, cfg.relay)
        seen.discard("relay")

        dht = _section(data, "dht", seen)
        cfg.dht_k = _field(dht, "dht.k", int, cfg.dht_k)
        cfg.dht_alpha = _field(dht, "dht.alpha", int, cfg.dht_alpha)
        _reject_unknown(dht, "dht")
        if cfg.dht_k < 1:
            raise BadConfig("dht.k: must be at least 1")
        if cfg.dht_alpha < 1:
            raise BadConfig("dht.alpha: must be at least 1")

        store = _section(data, "store", seen)
        cfg.store_capacity = _field(store, "store.capacity_bytes", int,
                                    cfg.store_capacity)
        _reject_unknown(store, "store")
        if cfg.store_capacity is not None and cfg.store_capacity < 1:
            raise BadConfig("store.capacity_bytes: must be positive")

        timeouts = _section(data, "timeouts_ms", seen)
        for key, attr in (("dial", "dial_timeout_ms"),
                          ("hello", "hello_timeout_ms"),
                          ("dht_query", "dht_query_timeout_ms"),
                          ("rpc_attempt", "rpc_attempt_timeout_ms"),
                          ("sync_interval", "sync_interval_ms")):
            value = _field(timeouts, "timeouts_ms.%s" % key, int,
                           getattr(cfg, attr))
            if value < 1:
                raise BadConfig("timeouts_ms.%s: must be positive" % key)
            setattr(cfg, attr, value)
        _reject_unknown(timeouts, "timeouts_ms")

        control = _section(data, "control", seen)
        cfg.control_socket = _field(control, "control.socket", str,
                                    cfg.control_socket)
        _reject_unknown(control, "control")

        cfg.seed = _field(data, "seed", int, cfg.seed)
        seen.discard("seed")

        if seen:
            raise BadConfig("unknown key %r at top level" % sorted(seen)[0])
        return cfg


def _section(data, name, seen):
    seen.discard(name)
    value = data.get(name)
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise BadConfig("%s: expected a mapping, got %s"
                        % (name, type(value).__name__))
    return dict(value)


def _field(mapping, label, kind, default):
    name = label.rsplit(".", 1)[-1]
    if name not in mapping:
        return default
    value = mapping.pop(name)
    if value is None:
        return default
    # bool passes isinstance(int); keep the two apart for diagnostics
    if kind is int and isinstance(value, bool):
        raise BadConfig("%s: expected integer, got boolean" % label)
    if kind is bool and not isinstance(value, bool):
        raise BadConfig("%s: expected boolean, got %s"
                        % (label, type(value).__name__))
    if not isinstance(value, kind):
        raise BadConfig("%s: expected %s, got %s"
                        % (label, kind.__name__, type(value).__name__))
    return value


def _reject_unknown(section, name):
    if section:
        raise BadConfig("unknown key %r in section %r"
                        % (sorted(section)[0], name))


def _parse_bootstrap(entry, index):
    label = "bootstrap[%d]" % index
    if not isinstance(entry, str):
        raise BadConfig("%s: expected 'lpid:<hex>@host:port' string" % label)
    peer_text, sep, addr_part = entry.partition("@")
    if not sep:
        raise BadConfig("%s: missing '@host:port'" % label)
    try:
        peer_id = PeerId.from_text(peer_text)
    except IdentityError as exc:
        raise BadConfig("%s: %s" % (label, exc))
    try:
        addr = parse_addr(addr_part)
    except PeermeshError:
        raise BadConfig("%s: bad address %r" % (label, addr_part))
    if addr is None:
        raise BadConfig("%s: bad address %r" % (label, addr_part))
    return (peer_id, addr)


def _resolve_keypair(cfg, rng):
    if cfg.secret_hex is not None:
        return Keypair.from_secret(bytes.fromhex(cfg.secret_hex))
    if cfg.keypair_file is not None:
        if os.path.exists(cfg.keypair_file):
            with open(cfg.keypair_file, "r", encoding="ascii") as fh:
                text = fh.read().strip()
            try:
                secret = bytes.fromhex(text)
                return Keypair.from_secret(secret)
            except (ValueError, IdentityError):
                raise BadConfig("identity.keypair_file: %s does not hold a "
                                "64-hex secret" % cfg.keypair_file)
        keypair = Keypair.generate(rng)
        fd = os.open(cfg.keypair_file, os.O_WRONLY | os.O_CREAT | os.O_EXCL,
                     0o600)
        with os.fdopen(fd, "w", encoding="ascii") as fh:
            fh.write(keypair.secret.hex() + "\n")
        return keypair
    return Keypair.generate(rng)


# ------------------------------------------------------------------- node


class Node:
    """One running stack plus its operation table.

    Live mode owns a reactor thread; every operation Future is resolved
    on that thread and callers elsewhere block in Future.wait(). In sim
    mode the caller drives the network, so ops are plain futures to run
    to completion with run_until_done.
    """

    def __init__(self, config=None, net=None):
        self.config = config or NodeConfig()
        cfg = self.config
        self.net = net
        self.live = net is None
        if self.live:
            self.host = LiveHost(bind=(cfg.listen_host, cfg.listen_port),
                                 seed=cfg.seed)
        else:
            self.host = net.add_node()
        try:
            self.keypair = _resolve_keypair(cfg, self.host.rng)
            tcfg = TraversalConfig(
                dial_timeout_us=cfg.dial_timeout_ms * 1000,
                hello_timeout_us=cfg.hello_timeout_ms * 1000)
            self.mgr = ConnectionManager(self.host, self.keypair, tcfg,
                                         relay_role=cfg.relay)
            self.dht = DhtService(self.mgr, DhtConfig(
                k=cfg.dht_k, alpha=cfg.dht_alpha,
                query_timeout_us=cfg.dht_query_timeout_ms * 1000))
            self.store = BlockStore(cfg.store_capacity)
            self.exchange = ExchangeService(self.mgr, self.store, self.dht)
            self.sync = SyncService(self.mgr,
                                    interval_us=cfg.sync_interval_ms * 1000)
            self.rpc = RpcService(self.mgr, dht=self.dht, cfg=RpcConfig(
                attempt_timeout_us=cfg.rpc_attempt_timeout_ms * 1000))
            # built-in reachability probe; also the default rpc demo target
            self.rpc.register_handler("sys.echo", lambda payload, conn: payload,
                                      idempotent=True)
            self.mgr.start()
            self.control = None
            if self.live and cfg.control_socket:
                self.control = ControlServer(self.host, cfg.control_socket,
                                             self.handle_op, describe_error)
        except Exception:
            if self.live:
                self.host.stop()
            raise
        self.bootstrap_errors = []
        self.ready = self._bootstrap_all(cfg.bootstrap)
        self._stopped = False

    @property
    def peer_id(self):
        return self.mgr.peer_id

    def contact(self):
        return Contact(self.peer_id, self.host.address)

    def _bootstrap_all(self, peers):
        ready = Future()
        remaining = [len(peers)]
        if not peers:
            ready.set_result(None)
            return ready

        def settled(f):
            if f.exception() is not None:
                self.bootstrap_errors.append(f.exception())
            remaining[0] -= 1
            if remaining[0] == 0:
                ready.set_result(None)

        def start():
            for peer_id, addr in peers:
                self.dht.bootstrap(Contact(peer_id, addr)).add_done_callback(settled)

        if self.live:
            self.host.post(start)
        else:
            start()
        return ready

    def stop(self):
        if self._stopped:
            return
        self._stopped = True
        if self.control is not None:
            self.control.close()

        def teardown():
            self.sync.stop()
            self.dht.shutdown()
            self.mgr.shutdown()

        if self.live:
            self.host.post(teardown)
            self.host.stop()
        else:
            teardown()

    # ------------------------------------------------------- operations

    def handle_op(self, op, args):
        """Run one named operation; always returns a Future.

        Callers on other threads go through submit() so service state
        is only ever touched by the loop thread.
        """
        fn = _OPS.get(op)
        if fn is None:
            fut = Future()
            fut.set_exception(UnknownOp("no such op %r" % op))
            return fut
        if self.live and not self._on_loop():
            return self.host.submit(lambda: fn(self, args))
        try:
            result = fn(self, args)
        except Exception as exc:
            fut = Future()
            fut.set_exception(exc)
            return fut
        if isinstance(result, Future):
            return result
        fut = Future()
        fut.set_result(result)
        return fut

    def _on_loop(self):
        return threading.current_thread() is getattr(self.host, "_thread", None)

    # individual ops; each returns a JSON-safe dict or a Future of one

    def _op_id(self, args):
        return {"peer_id": self.peer_id.text,
                "addresses": [addr_text(self.host.address)]}

    def _op_publish(self, args):
        data = _bytes_arg(args, "data")
        out = Future()
        self.exchange.publish(data).add_done_callback(
            _map_result(out, lambda root: {"cid": root.text}))
        return out

    def _op_fetch(self, args):
        root = _cid_arg(args, "cid")
        try:
            data = assemble(self.store, root)
            out = Future()
            out.set_result({"cid": root.text, "data": _b64(data)})
            return out
        except ContentError:
            pass  # not complete locally; go to the swarm
        out = Future()
        self.exchange.fetch(root).add_done_callback(
            _map_result(out, lambda data: {"cid": root.text,
                                           "data": _b64(data)}))
        return out

    def _op_provide(self, args):
        root = _cid_arg(args, "cid")
        try:
            assemble(self.store, root)
        except ContentError as exc:
            raise BadRequest("cannot provide %s: %s" % (root.text, exc))
        self.store.pin(root)
        out = Future()
        self.dht.provide(root.key()).add_done_callback(
            _map_result(out, lambda _: {"cid": root.text, "provided": True}))
        return out

    def _op_rpc(self, args):
        peer_text = _str_arg(args, "peer")
        route = _str_arg(args, "route")
        payload = _bytes_arg(args, "payload", b"")
        idempotent = bool(args.get("idempotent", False))
        addr = None
        if "@" in peer_text:
            peer_text, _, addr_part = peer_text.partition("@")
            try:
                addr = parse_addr(addr_part)
            except PeermeshError:
                raise BadRequest("peer: bad address %r" % addr_part)
        try:
            peer_id = PeerId.from_text(peer_text)
        except IdentityError as exc:
            raise BadRequest("peer: %s" % exc)
        out = Future()
        self.rpc.call_unary(peer_id, route, payload, idempotent=idempotent,
                            addr=addr).add_done_callback(
            _map_result(out, lambda answer: {"payload": _b64(answer)}))
        return out

    def _op_crdt(self, args):
        action = _str_arg(args, "action")
        topic = _str_arg(args, "topic")
        if action in ("add", "rm"):
            element = _bytes_arg(args, "element")
            state = self._topic(topic, OrSetState)
            if action == "add":
                self.sync.add(topic, element)
            else:
                self.sync.remove(topic, element)
        elif action == "put":
            key = _bytes_arg(args, "key")
            value = _bytes_arg(args, "value")
            state = self._topic(topic, LwwMapState)
            self.sync.put(topic, key, value)
        elif action == "show":
            kind = args.get("kind")
            if kind is not None:
                if kind not in ("set", "map"):
                    raise BadRequest("kind: expected 'set' or 'map'")
                state = self._topic(
                    topic, OrSetState if kind == "set" else LwwMapState)
            else:
                state = self.sync.state(topic)
        else:
            raise BadRequest("action: expected add, rm, put, or show")
        return _state_view(topic, state)

    def _topic(self, topic, kind_cls):
        state = self.sync.topics.get(topic)
        if state is None:
            return self.sync.replicate(topic, kind_cls())
        if not isinstance(state, kind_cls):
            raise BadRequest("topic %r already holds the other kind" % topic)
        return state

    def _op_connect(self, args):
        peer_text = _str_arg(args, "peer")
        addr_part = _str_arg(args, "addr")
        try:
            peer_id = PeerId.from_text(peer_text)
        except IdentityError as exc:
            raise BadRequest("peer: %s" % exc)
        try:
            addr = parse_addr(addr_part)
        except PeermeshError:
            raise BadRequest("addr: bad address %r" % addr_part)
        out = Future()
        self.dht.bootstrap(Contact(peer_id, addr)).add_done_callback(
            _map_result(out, lambda _: {"peer_id": peer_id.text,
                                        "connected": True}))
        return out

    def _op_stop(self, args):
        # Answer first, then fold the tent; the reply must get out
        # before the loop dies.
        self.host.call_later(10_000, self.stop)
        return {"stopping": True}


_OPS = {
    "id": Node._op_id,
    "publish": Node._op_publish,
    "fetch": Node._op_fetch,
    "provide": Node._op_provide,
    "rpc": Node._op_rpc,
    "crdt": Node._op_crdt,
    "connect": Node._op_connect,
    "stop": Node._op_stop,
}


def node_start(config=None, net=None):
    """Bring up a full node; raises BadConfig or BindFailed, never half-starts."""
    return Node(config, net)


# --------------------------------------------------------------- helpers


def _b64(data):
    return base64.b64encode(data).decode("ascii")


def _bytes_arg(args, name, default=None):
    value = args.get(name)
    if value is None:
        if default is not None:
            return default
        raise BadRequest("missing argument %r" % name)
    if not isinstance(value, str):
        raise BadRequest("%s: expected base64 text" % name)
    try:
        return base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError):
        raise BadRequest("%s: invalid base64" % name)


def _str_arg(args, name):
    value = args.get(name)
    if not isinstance(value, str) or not value:
        raise BadRequest("missing argument %r" % name)
    return value


def _cid_arg(args, name):
    try:
        return Cid.from_text(_str_arg(args, name))
    except IdentityError as exc:
        raise BadRequest("%s: %s" % (name, exc))


def _map_result(out, fn):
    def relay(f):
        if f.exception() is not None:
            out.set_exception(f.exception())
        else:
            out.set_result(fn(f.result()))
    return relay


def _state_view(topic, state):
    """Deterministic JSON view of a replicated state."""
    if isinstance(state, OrSetState):
        return {"topic": topic, "kind": "set",
                "elements": [_b64(e) for e in sorted(state.elements())]}
    entries = {}
    for key in sorted(state.keys()):
        entries[_b64(key)] = _b64(state.get(key))
    return {"topic": topic, "kind": "map", "entries": entries}


_ERROR_CODES = (
    (BadRequest, "bad-request"),
    (UnknownOp, "unknown-op"),
    (BadConfig, "bad-config"),
    (exchange_mod.NoProviders, "no-providers"),
    (rpc_mod.NoProviders, "no-providers"),
    (rpc_mod.AllProvidersFailed, "all-providers-failed"),
    (rpc_mod.Timeout, "timeout"),
    (FutureTimeout, "timeout"),
    (rpc_mod.Unavailable, "unavailable"),
    (rpc_mod.RemoteError, "remote-error"),
    (rpc_mod.PeerGone, "unavailable"),
    (UnknownTopic, "unknown-topic"),
    (NotFound, "not-found"),
    (MissingBlock, "not-found"),
    (BindFailed, "bind-failed"),
)


def describe_error(exc):
    """Stable (code, message) pair for anything an op can raise."""
    for cls, code in _ERROR_CODES:
        if isinstance(exc, cls):
            return (code, str(exc))
    if isinstance(exc, PeermeshError):
        return ("internal", "%s: %s" % (type(exc).__name__, exc))
    return ("internal", "%s: %s" % (type(exc).__name__, exc))
