"""Loopback transport: the simulator's host surface over real sockets.

A LiveHost runs one reactor thread around a selector: TCP streams carry
the same length-prefixed frames the simulator delivers, timers come off
a heap keyed on the monotonic clock, and a socketpair waker lets other
threads hand work to the loop. Because the surface matches SimAgent
(listen / dial / call_later / now_us / rng / address), every service
built against the simulator runs here unmodified.

Scope is deliberately narrow: endpoints bind 127.0.0.1, where dialing
always works, so the hole-punch machinery never engages. Datagram sends
are therefore dropped and the datagram callback is stored but never
fired; anything beyond loopback belongs in the simulator, which is
where NAT behavior is modeled.

ControlServer rides the same loop and exposes node operations over a
Unix socket as newline-delimited JSON, one request object per line.
"""

import errno
import heapq
import json
import os
import random
import selectors
import socket
import threading
import time
import traceback
from collections import deque

from . import wire
from .errors import PeermeshError
from .futures import Future
from .simnet import Timer

READ = selectors.EVENT_READ
WRITE = selectors.EVENT_WRITE

RECV_CHUNK = 65536
DIAL_TIMEOUT_US = 3_000_000
# one control request line; generous because fetched objects ride base64
MAX_CONTROL_LINE = 64 * 1024 * 1024


class LiveError(PeermeshError):
    """Problem with the live transport itself."""


class BindFailed(LiveError):
    """Could not bind the requested listen or control address."""


class DialTimeout(LiveError):
    """No connection within the dial budget."""


class DialRefused(LiveError):
    """The peer actively refused or the connect failed outright."""


class LiveStream(object):
    """One endpoint of a framed TCP connection, owned by the loop thread.

    Mirrors SimStream: whole frames in and out, inbound frames buffered
    until a handler is attached, local close silent and remote close
    surfaced through on_close. Bytes that fail to parse as frames are
    treated as connection loss; a byte stream that produced garbage
    cannot resync.
    """

    def __init__(self, host, sock, peer_addr):
        self._host = host
        self._sock = sock
        self.peer_addr = peer_addr
        self.closed = False
        self._decoder = wire.FrameDecoder()
        self._out = bytearray()
        self._on_frame = None
        self._on_close = None
        self._pending = []
        host._sel.register(sock, READ, self._ready)

    def on_frame(self, cb):
        self._on_frame = cb
        while self._pending and self._on_frame is cb:
            msg_type, body = self._pending.pop(0)
            cb(msg_type, body)

    def on_close(self, cb):
        self._on_close = cb

    def send_frame(self, msg_type, body):
        if self.closed:
            return
        if len(body) > wire.MAX_FRAME_BODY:
            raise wire.FrameTooLarge("stream frame body of %d bytes" % len(body))
        self._out += wire.encode_frame(msg_type, body)
        self._want_write(True)

    def close(self):
        if self.closed:
            return
        self.closed = True
        self._teardown()

    # --- loop-side machinery ---

    def _want_write(self, on):
        if self.closed:
            return
        events = READ | WRITE if (on or self._out) else READ
        self._host._sel.modify(self._sock, events, self._ready)

    def _ready(self, mask):
        if self.closed:
            return
        if mask & WRITE:
            self._flush()
        if mask & READ and not self.closed:
            self._pull()

    def _flush(self):
        try:
            while self._out:
                sent = self._sock.send(self._out)
                del self._out[:sent]
        except (BlockingIOError, InterruptedError):
            pass
        except OSError:
            self._lost()
            return
        if not self._out:
            self._want_write(False)

    def _pull(self):
        try:
            data = self._sock.recv(RECV_CHUNK)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            self._lost()
            return
        if not data:
            self._lost()
            return
        try:
            frames = self._decoder.feed(data)
        except wire.WireError:
            self._lost()
            return
        for msg_type, body in frames:
            if self.closed:
                break
            if self._on_frame is None:
                self._pending.append((msg_type, body))
            else:
                self._on_frame(msg_type, body)

    def _lost(self):
        if self.closed:
            return
        self.closed = True
        self._teardown()
        if self._on_close is not None:
            self._on_close()

    def _teardown(self):
        try:
            self._host._sel.unregister(self._sock)
        except (KeyError, ValueError):
            pass
        try:
            self._sock.close()
        except OSError:
            pass


class LiveHost(object):
    """Reactor-backed stand-in for SimAgent on 127.0.0.1.

    The constructor binds the listen socket (so ``address`` is final
    before anything else runs) and starts the loop thread. Everything
    that touches sockets or service state is marshalled onto that
    thread; other threads interact through post(), call_later(), and
    the futures that node operations hand back.
    """

    def __init__(self, bind=("127.0.0.1", 0), seed=None):
        self._sel = selectors.DefaultSelector()
        self._lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._lsock.bind(bind)
        except OSError as exc:
            self._lsock.close()
            self._sel.close()
            raise BindFailed("cannot bind %s:%d: %s" % (bind[0], bind[1], exc))
        self._lsock.listen(64)
        self._lsock.setblocking(False)
        self._addr = (bind[0], self._lsock.getsockname()[1])
        self.rng = random.Random(seed)

        self._on_stream = None
        self._listening = False
        self._dgram_cb = None

        self._timers = []  # heap of (deadline_us, seq, Timer)
        self._seq = 0
        self._posted = deque()
        self._lock = threading.Lock()
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._wake_w.setblocking(False)
        self._sel.register(self._wake_r, READ, self._drain_waker)

        self._stopping = False
        self._stopped = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name="peermesh-loop-%d" % self._addr[1])
        self._thread.start()

    # --- host surface consumed by the services ---

    @property
    def address(self):
        return self._addr

    def now_us(self):
        return time.monotonic_ns() // 1000

    def call_later(self, delay_us, fn):
        timer = Timer(fn)
        deadline = self.now_us() + max(0, int(delay_us))
        with self._lock:
            self._seq += 1
            heapq.heappush(self._timers, (deadline, self._seq, timer))
        self._wake()
        return timer

    def listen(self, on_stream, port=0):
        if self._listening:
            raise BindFailed("already listening on %s" % (self._addr,))
        self._listening = True
        self._on_stream = on_stream
        self.post(lambda: self._sel.register(self._lsock, READ, self._accept))

    def unlisten(self, port=0):
        if not self._listening:
            return
        self._listening = False
        self.post(self._stop_accepting)

    def dial(self, addr, on_result, timeout_us=DIAL_TIMEOUT_US,
             src_port=0, from_alt=False):
        # from_alt exists for the simulator's second NAT leg; loopback
        # has a single address, so the flag is accepted and ignored.
        self.post(lambda: self._dial(tuple(addr), on_result, timeout_us))

    def on_datagram(self, cb, port=0):
        self._dgram_cb = cb  # kept for surface parity; never fires here

    def send_datagram(self, addr, payload, src_port=0):
        pass  # punch probes are meaningless on loopback; drop silently

    # --- cross-thread entry points ---

    def post(self, fn):
        """Run fn on the loop thread as soon as it is awake."""
        with self._lock:
            self._posted.append(fn)
        self._wake()

    def submit(self, fn):
        """Run fn() on the loop; resolve a Future with its outcome.

        fn may return a plain value or a Future; a returned Future is
        chained so its result carries through.
        """
        out = Future()

        def run():
            try:
                value = fn()
            except Exception as exc:  # isolation: caller sees the error
                out.set_exception(exc)
                return
            if isinstance(value, Future):
                def relay(f):
                    if f.exception() is not None:
                        out.set_exception(f.exception())
                    else:
                        out.set_result(f.result())
                value.add_done_callback(relay)
            else:
                out.set_result(value)

        self.post(run)
        return out

    def stop(self):
        """Shut the loop down and release every socket. Idempotent."""
        def halt():
            self._stopping = True
        self.post(halt)
        if threading.current_thread() is not self._thread:
            self._stopped.wait(timeout=10)

    def join(self, timeout=None):
        """Wait for the loop to finish; True once it has exited."""
        return self._stopped.wait(timeout)

    # --- loop internals ---

    def _wake(self):
        try:
            self._wake_w.send(b"\x00")
        except (BlockingIOError, OSError):
            pass  # a pending wake byte is as good as another one

    def _drain_waker(self, mask):
        try:
            while self._wake_r.recv(4096):
                pass
        except (BlockingIOError, OSError):
            pass

    def _accept(self, mask):
        while True:
            try:
                sock, peer = self._lsock.accept()
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                return
            sock.setblocking(False)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            stream = LiveStream(self, sock, peer)
            if self._on_stream is not None:
                self._safe(lambda: self._on_stream(stream))

    def _stop_accepting(self):
        try:
            self._sel.unregister(self._lsock)
        except (KeyError, ValueError):
            pass

    def _dial(self, addr, on_result, timeout_us):
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setblocking(False)
        state = {"done": False}

        def finish(stream, error):
            if state["done"]:
                return
            state["done"] = True
            timer.cancel()
            self._safe(lambda: on_result(stream, error))

        def connected(mask):
            err = sock.getsockopt(socket.SOL_SOCKET, socket.SO_ERROR)
            try:
                self._sel.unregister(sock)
            except (KeyError, ValueError):
                pass
            if err != 0:
                sock.close()
                finish(None, DialRefused("connect to %s:%d failed: %s"
                                         % (addr[0], addr[1], os.strerror(err))))
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            finish(LiveStream(self, sock, addr), None)

        def expired():
            if state["done"]:
                return
            try:
                self._sel.unregister(sock)
            except (KeyError, ValueError):
                pass
            sock.close()
            finish(None, DialTimeout("no connection to %s:%d within %dus"
                                     % (addr[0], addr[1], timeout_us)))

        timer = self.call_later(timeout_us, expired)
        try:
            rc = sock.connect_ex(addr)
        except OSError as exc:
            sock.close()
            finish(None, DialRefused("connect to %s:%d: %s" % (addr[0], addr[1], exc)))
            return
        if rc not in (0, errno.EINPROGRESS, errno.EWOULDBLOCK):
            sock.close()
            finish(None, DialRefused("connect to %s:%d failed: %s"
                                     % (addr[0], addr[1], os.strerror(rc))))
            return
        self._sel.register(sock, WRITE, connected)

    def _safe(self, fn):
        # A broken callback must not take the reactor down with it; the
        # loop serves every connection, not just the failing one.
        try:
            fn()
        except Exception:
            traceback.print_exc()

    def _run(self):
        while True:
            with self._lock:
                if self._stopping:
                    break
                if self._posted:
                    timeout = 0
                elif self._timers:
                    timeout = max(0, self._timers[0][0] - self.now_us()) / 1e6
                else:
                    timeout = None
            try:
                events = self._sel.select(timeout)
            except OSError:
                events = []
            for key, mask in events:
                self._safe(lambda k=key, m=mask: k.data(m))
            now = self.now_us()
            due = []
            with self._lock:
                while self._timers and self._timers[0][0] <= now:
                    due.append(heapq.heappop(self._timers)[2])
            for timer in due:
                if not timer.cancelled:
                    self._safe(timer.fn)
            while True:
                with self._lock:
                    if not self._posted:
                        break
                    fn = self._posted.popleft()
                self._safe(fn)
        self._cleanup()
        self._stopped.set()

    def _cleanup(self):
        for key in list(self._sel.get_map().values()):
            try:
                self._sel.unregister(key.fileobj)
            except (KeyError, ValueError):
                pass
            try:
                key.fileobj.close()
            except OSError:
                pass
        try:
            self._lsock.close()
        except OSError:
            pass
        self._wake_r.close()
        self._wake_w.close()
        self._sel.close()


def canonical_json(obj):
    """The one serialization both ends of the control socket agree on.

    Sorted keys, no whitespace, ASCII only. Every value crossing the
    socket is built from ASCII-safe pieces (base64, hex, fixed tokens),
    so any compliant JSON encoder configured the same way produces the
    same bytes; that is what makes byte-for-byte output comparisons
    between independent clients meaningful.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("ascii")


class ControlClientGone(LiveError):
    """The control client hung up before its answer was ready."""


class _ControlClient(object):
    """One accepted control connection: line splitter plus write buffer."""

    def __init__(self, server, sock):
        self.server = server
        self.sock = sock
        self.inbuf = bytearray()
        self.out = bytearray()
        self.closed = False
        server.host._sel.register(sock, READ, self._ready)

    def _ready(self, mask):
        if self.closed:
            return
        if mask & WRITE:
            self._flush()
        if mask & READ and not self.closed:
            self._pull()

    def _pull(self):
        try:
            data = self.sock.recv(RECV_CHUNK)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            self.close()
            return
        if not data:
            self.close()
            return
        self.inbuf += data
        if len(self.inbuf) > MAX_CONTROL_LINE:
            self.send_obj({"id": None, "ok": False,
                           "error": {"code": "bad-request",
                                     "message": "request line too long"}})
            self.close()
            return
        while True:
            nl = self.inbuf.find(b"\n")
            if nl < 0:
                break
            line = bytes(self.inbuf[:nl])
            del self.inbuf[:nl + 1]
            if line.strip():
                self.server._serve_line(self, line)

    def send_obj(self, obj):
        if self.closed:
            return
        self.out += canonical_json(obj) + b"\n"
        self._flush()
        if self.out and not self.closed:
            self.server.host._sel.modify(self.sock, READ | WRITE, self._ready)

    def _flush(self):
        try:
            while self.out:
                sent = self.sock.send(self.out)
                del self.out[:sent]
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            self.close()
            return
        if not self.out:
            try:
                self.server.host._sel.modify(self.sock, READ, self._ready)
            except (KeyError, ValueError):
                pass

    def close(self):
        if self.closed:
            return
        self.closed = True
        try:
            self.server.host._sel.unregister(self.sock)
        except (KeyError, ValueError):
            pass
        try:
            self.sock.close()
        except OSError:
            pass
        self.server.clients.discard(self)


class ControlServer(object):
    """Unix-socket request server: one JSON object per line, id-matched.

    Request:  {"id": <any scalar>, "op": <name>, "args": {...}}
    Response: {"id": <echoed>, "ok": true, "result": {...}}
          or  {"id": <echoed>, "ok": false,
               "error": {"code": <token>, "message": <text>}}

    Requests on one connection may finish out of order; clients match
    responses to requests by id. Each request is isolated: a failing
    operation answers with an error object and the connection lives on.

    dispatch(op, args) runs on the loop thread and returns a Future (or
    a plain dict). describe_error(exc) maps an exception to its (code,
    message) pair so the wire vocabulary stays in one place.
    """

    def __init__(self, host, path, dispatch, describe_error=None):
        self.host = host
        self.path = path
        self.dispatch = dispatch
        self.describe_error = describe_error or (
            lambda exc: ("internal", "%s: %s" % (type(exc).__name__, exc)))
        self.clients = set()
        self._closed = False
        if os.path.exists(path):
            os.unlink(path)  # stale socket file from a dead daemon
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            self._sock.bind(path)
        except OSError as exc:
            self._sock.close()
            raise BindFailed("cannot bind control socket %s: %s" % (path, exc))
        self._sock.listen(16)
        self._sock.setblocking(False)
        host.post(lambda: host._sel.register(self._sock, READ, self._accept))

    def _accept(self, mask):
        while True:
            try:
                sock, _ = self._sock.accept()
            except (BlockingIOError, InterruptedError, OSError):
                return
            sock.setblocking(False)
            self.clients.add(_ControlClient(self, sock))

    def _serve_line(self, client, line):
        req_id = None
        try:
            req = json.loads(line)
            if not isinstance(req, dict):
                raise ValueError("request must be a JSON object")
            req_id = req.get("id")
            op = req.get("op")
            if not isinstance(op, str):
                raise ValueError("missing or non-string op")
            args = req.get("args", {})
            if not isinstance(args, dict):
                raise ValueError("args must be an object")
        except ValueError as exc:
            client.send_obj({"id": req_id, "ok": False,
                             "error": {"code": "bad-request",
                                       "message": str(exc)}})
            return
        try:
            outcome = self.dispatch(op, args)
        except Exception as exc:
            self._answer_error(client, req_id, exc)
            return
        if isinstance(outcome, Future):
            outcome.add_done_callback(
                lambda f: self._answer(client, req_id, f))
        else:
            client.send_obj({"id": req_id, "ok": True, "result": outcome})

    def _answer(self, client, req_id, fut):
        exc = fut.exception()
        if exc is not None:
            self._answer_error(client, req_id, exc)
        else:
            client.send_obj({"id": req_id, "ok": True, "result": fut.result()})

    def _answer_error(self, client, req_id, exc):
        code, message = self.describe_error(exc)
        client.send_obj({"id": req_id, "ok": False,
                         "error": {"code": code, "message": message}})

    def close(self):
        if self._closed:
            return
        self._closed = True

        def teardown():
            try:
                self.host._sel.unregister(self._sock)
            except (KeyError, ValueError):
                pass
            self._sock.close()
            for client in list(self.clients):
                client.close()
        self.host.post(teardown)
        try:
            os.unlink(self.path)
        except OSError:
            pass
