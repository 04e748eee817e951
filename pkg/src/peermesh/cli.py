"""Command line: a thin client for a running node, plus self-contained
simulation commands.

Node-facing subcommands (id, put, get, provide, fetch, rpc, crdt) speak
the control socket protocol of a daemon started with ``run --config``;
they hold no protocol logic of their own beyond building the request
and printing the response. ``sim run`` and ``bench rpc`` build their
own simulated networks and need no daemon.

Exit codes: 0 success, 1 operational failure (the command was valid but
the work failed), 2 usage error. With --json every result is one
canonical JSON line on stdout, errors included, so scripts can parse
either outcome.
"""

import argparse
import base64
import json
import signal
import socket
import sys
import threading

from .errors import PeermeshError
from .live import canonical_json
from .node import NodeConfig, node_start
from .scenarios import (PROFILE_ORDER, PROFILES, bench_cell,
                        load_scenario_file, run_scenario)

CLIENT_TIMEOUT_S = 120.0


class CliError(PeermeshError):
    """Operational failure carrying the control-socket error code."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code
        self.message = message


class ControlClient:
    """Blocking client for one control socket: send a line, await its id."""

    def __init__(self, path, timeout=CLIENT_TIMEOUT_S):
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.sock.settimeout(timeout)
        try:
            self.sock.connect(path)
        except OSError as exc:
            self.sock.close()
            raise CliError("no-daemon",
                           "cannot reach control socket %s (%s); is the "
                           "node running?" % (path, exc))
        self._buf = b""
        self._next_id = 0

    def request(self, op, args):
        self._next_id += 1
        req_id = self._next_id
        line = canonical_json({"id": req_id, "op": op, "args": args}) + b"\n"
        try:
            self.sock.sendall(line)
            while True:
                resp = json.loads(self._read_line())
                if resp.get("id") != req_id:
                    continue  # stray answer to an older request
                break
        except OSError as exc:
            raise CliError("io", "control socket failed: %s" % exc)
        except ValueError as exc:
            raise CliError("io", "control socket spoke garbage: %s" % exc)
        if resp.get("ok"):
            return resp.get("result", {})
        err = resp.get("error") or {}
        raise CliError(err.get("code", "internal"),
                       err.get("message", "unknown error"))

    def _read_line(self):
        while True:
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line = self._buf[:nl]
                self._buf = self._buf[nl + 1:]
                return line
            chunk = self.sock.recv(65536)
            if not chunk:
                raise CliError("io", "control socket closed mid-request")
            self._buf += chunk

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


# ----------------------------------------------------------------- output


class _Printer:
    def __init__(self, as_json, out=None):
        self.as_json = as_json
        self.out = out or sys.stdout

    def result(self, result, human_lines):
        if self.as_json:
            self.out.write(canonical_json(result).decode("ascii") + "\n")
        else:
            for line in human_lines:
                self.out.write(line + "\n")
        self.out.flush()

    def error(self, code, message):
        if self.as_json:
            payload = {"error": {"code": code, "message": message}}
            self.out.write(canonical_json(payload).decode("ascii") + "\n")
            self.out.flush()
        else:
            sys.stderr.write("error (%s): %s\n" % (code, message))
            sys.stderr.flush()


def _b64(data):
    return base64.b64encode(data).decode("ascii")


# ------------------------------------------------------------ subcommands


def _cmd_id(client, args, printer):
    result = client.request("id", {})
    printer.result(result, ["peer %s" % result["peer_id"]]
                   + ["addr %s" % a for a in result["addresses"]])
    return 0


def _cmd_stop(client, args, printer):
    result = client.request("stop", {})
    printer.result(result, ["stopping"])
    return 0


def _cmd_put(client, args, printer):
    try:
        with open(args.file, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CliError("io", "cannot read %s: %s" % (args.file, exc))
    result = client.request("publish", {"data": _b64(data)})
    printer.result(result, [result["cid"]])
    return 0


def _cmd_get(client, args, printer):
    result = client.request("fetch", {"cid": args.cid})
    data = base64.b64decode(result["data"])
    try:
        with open(args.out, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise CliError("io", "cannot write %s: %s" % (args.out, exc))
    view = {"cid": result["cid"], "path": args.out, "size": len(data)}
    printer.result(view, ["wrote %d bytes to %s" % (len(data), args.out)])
    return 0


def _cmd_provide(client, args, printer):
    result = client.request("provide", {"cid": args.cid})
    printer.result(result, ["providing %s" % result["cid"]])
    return 0


def _cmd_fetch(client, args, printer):
    result = client.request("fetch", {"cid": args.cid})
    size = len(base64.b64decode(result["data"]))
    printer.result(result, ["fetched %s (%d bytes)" % (result["cid"], size)])
    return 0


def _cmd_rpc(client, args, printer):
    payload = b""
    if args.payload_file is not None:
        try:
            with open(args.payload_file, "rb") as fh:
                payload = fh.read()
        except OSError as exc:
            raise CliError("io", "cannot read %s: %s"
                           % (args.payload_file, exc))
    result = client.request("rpc", {"peer": args.peer, "route": args.route,
                                    "payload": _b64(payload),
                                    "idempotent": args.idempotent})
    printer.result(result, [result["payload"]])
    return 0


def _cmd_crdt(client, args, printer):
    req = {"action": args.crdt_action, "topic": args.topic}
    if args.crdt_action in ("add", "rm"):
        req["element"] = _b64(args.element.encode("utf-8"))
    elif args.crdt_action == "put":
        req["key"] = _b64(args.key.encode("utf-8"))
        req["value"] = _b64(args.value.encode("utf-8"))
    elif args.crdt_action == "show" and args.kind:
        req["kind"] = args.kind
    result = client.request("crdt", req)
    if result["kind"] == "set":
        lines = ["%s" % base64.b64decode(e).decode("utf-8", "replace")
                 for e in result["elements"]]
    else:
        lines = ["%s = %s" % (base64.b64decode(k).decode("utf-8", "replace"),
                              base64.b64decode(v).decode("utf-8", "replace"))
                 for k, v in sorted(result["entries"].items())]
    printer.result(result, lines or ["(empty)"])
    return 0


def _cmd_sim_run(args, printer):
    name, seed, params = load_scenario_file(args.scenario_file)
    report = run_scenario(name, seed, **params)
    if printer.as_json:
        sys.stdout.write(report.to_json_bytes().decode("ascii"))
    else:
        sys.stdout.write(report.to_text())
    sys.stdout.flush()
    return 0 if report.passed else 1


def _cmd_bench_rpc(args, printer):
    raw = bench_cell(args.seed, PROFILES[args.profile], args.size,
                     args.concurrency, args.max_calls)
    view = {"profile": args.profile, "payload_size": args.size,
            "concurrency": args.concurrency, "qps": round(raw["qps"], 1),
            "p50_us": raw["p50"], "p99_us": raw["p99"]}
    printer.result(view, ["%s %dB x%d: %.1f qps (p50 %dus, p99 %dus)" % (
        view["profile"], view["payload_size"], view["concurrency"],
        view["qps"], view["p50_us"], view["p99_us"])])
    return 0


def _cmd_run(args, printer):
    config = NodeConfig.from_file(args.config)
    node = node_start(config)
    try:
        node.ready.wait(30)
        info = node.handle_op("id", {}).wait(10)
        ready = {"peer_id": info["peer_id"], "addresses": info["addresses"],
                 "control_socket": config.control_socket}
        printer.result(ready, ["peer %s" % ready["peer_id"]]
                       + ["addr %s" % a for a in ready["addresses"]]
                       + ["control %s" % (ready["control_socket"] or "-")])
        stop = threading.Event()
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
        signal.signal(signal.SIGINT, lambda *_: stop.set())
        # exits on a signal or when the node stops itself (control "stop" op)
        while not stop.is_set() and not node.host.join(0.2):
            pass
        return 0
    finally:
        node.stop()


# --------------------------------------------------------------- dispatch


def build_parser():
    parser = argparse.ArgumentParser(
        prog="peermesh",
        description="content-addressed mesh node: publish, fetch, call, sync")
    parser.add_argument("--json", action="store_true",
                        help="one canonical JSON line per result")
    parser.add_argument("--socket", metavar="PATH",
                        help="control socket of the node to talk to")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("id", help="print the node identity")
    sub.add_parser("stop", help="shut a running node down")

    p = sub.add_parser("put", help="store a file and announce it")
    p.add_argument("file")

    p = sub.add_parser("get", help="fetch an object into a file")
    p.add_argument("cid")
    p.add_argument("out")

    p = sub.add_parser("provide", help="announce an object already held")
    p.add_argument("cid")

    p = sub.add_parser("fetch", help="pull an object into the local store")
    p.add_argument("cid")

    p = sub.add_parser("rpc", help="remote calls")
    rpc_sub = p.add_subparsers(dest="rpc_action")
    pc = rpc_sub.add_parser("call", help="unary call to a peer route")
    pc.add_argument("peer", help="lpid:<hex> or lpid:<hex>@host:port")
    pc.add_argument("route")
    pc.add_argument("--payload-file")
    pc.add_argument("--idempotent", action="store_true",
                    help="allow transparent retries")

    p = sub.add_parser("crdt", help="replicated state")
    crdt_sub = p.add_subparsers(dest="crdt_action")
    pa = crdt_sub.add_parser("add", help="add an element to a set topic")
    pa.add_argument("topic")
    pa.add_argument("element")
    pr = crdt_sub.add_parser("rm", help="remove an element from a set topic")
    pr.add_argument("topic")
    pr.add_argument("element")
    pp = crdt_sub.add_parser("put", help="write a key in a map topic")
    pp.add_argument("topic")
    pp.add_argument("key")
    pp.add_argument("value")
    ps = crdt_sub.add_parser("show", help="print a topic's state")
    ps.add_argument("topic")
    ps.add_argument("--kind", choices=("set", "map"),
                    help="hold the topic with this kind if new here")

    p = sub.add_parser("sim", help="deterministic simulations")
    sim_sub = p.add_subparsers(dest="sim_action")
    pr = sim_sub.add_parser("run", help="run a scenario file")
    pr.add_argument("scenario_file")

    p = sub.add_parser("bench", help="load benchmarks")
    bench_sub = p.add_subparsers(dest="bench_action")
    pb = bench_sub.add_parser("rpc", help="echo load on one link profile")
    pb.add_argument("profile", choices=PROFILE_ORDER)
    pb.add_argument("size", type=int)
    pb.add_argument("concurrency", type=int)
    pb.add_argument("--max-calls", dest="max_calls", type=int, default=2000)
    pb.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("run", help="run a node in the foreground")
    p.add_argument("--config", required=True)

    return parser


_NEEDS_SOCKET = {
    "id": _cmd_id,
    "stop": _cmd_stop,
    "put": _cmd_put,
    "get": _cmd_get,
    "provide": _cmd_provide,
    "fetch": _cmd_fetch,
}


def cli_dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; fold --help's 0 through as-is
        return exc.code if isinstance(exc.code, int) else 2
    printer = _Printer(args.json)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.command == "rpc" and args.rpc_action != "call":
        sys.stderr.write("usage: peermesh rpc call <peer> <route>\n")
        return 2
    if args.command == "crdt" and args.crdt_action not in ("add", "rm",
                                                           "put", "show"):
        sys.stderr.write(
            "usage: peermesh crdt {add|rm|put|show} <topic> ...\n")
        return 2
    if args.command == "sim" and args.sim_action != "run":
        sys.stderr.write("usage: peermesh sim run <scenario-file>\n")
        return 2
    if args.command == "bench" and args.bench_action != "rpc":
        sys.stderr.write(
            "usage: peermesh bench rpc <profile> <size> <concurrency>\n")
        return 2

    try:
        if args.command == "sim":
            return _cmd_sim_run(args, printer)
        if args.command == "bench":
            return _cmd_bench_rpc(args, printer)
        if args.command == "run":
            return _cmd_run(args, printer)

        handler = _NEEDS_SOCKET.get(args.command)
        if handler is None:
            handler = _cmd_rpc if args.command == "rpc" else _cmd_crdt
        if not args.socket:
            sys.stderr.write("peermesh %s: needs --socket PATH of a running "
                             "node\n" % args.command)
            return 2
        client = ControlClient(args.socket)
        try:
            return handler(client, args, printer)
        finally:
            client.close()
    except CliError as exc:
        printer.error(exc.code, exc.message)
        return 1
    except PeermeshError as exc:
        printer.error(type(exc).__name__.lower(), str(exc))
        return 1


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))
