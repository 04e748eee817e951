/**
 * Client for one peermesh node's control socket.
 *
 * The protocol underneath is one JSON object per line over a Unix
 * stream socket; requests carry an id the node echoes back, and
 * responses may arrive in any order. All protocol knowledge the SDK
 * has is the request envelope and the error code table; everything
 * else is the node's business.
 *
 * A session is single-consumer: one logical caller at a time, though
 * that caller may pipeline requests freely since responses are matched
 * by id, never by position.
 */

import * as net from "node:net";

import { canonicalJson, JsonValue } from "./canonical.js";

/** Operational failure reported by the node or the transport. */
export class SdkError extends Error {
  readonly code: string;

  constructor(code: string, message: string) {
    super(message);
    this.name = "SdkError";
    this.code = code;
  }
}

export type ResultObject = { [key: string]: JsonValue };

export interface NodeIdentity {
  peer_id: string;
  addresses: string[];
}

export type SetView = {
  topic: string;
  kind: "set";
  elements: Uint8Array[];
};

export type MapView = {
  topic: string;
  kind: "map";
  entries: Map<string, Uint8Array>;
};

interface Pending {
  resolve: (result: ResultObject) => void;
  reject: (err: Error) => void;
}

function toB64(data: Uint8Array | string): string {
  const buf =
    typeof data === "string" ? Buffer.from(data, "utf-8") : Buffer.from(data);
  return buf.toString("base64");
}

function fromB64(text: string): Uint8Array {
  return new Uint8Array(Buffer.from(text, "base64"));
}

export class SdkSession {
  private readonly sock: net.Socket;
  private readonly pending = new Map<number, Pending>();
  private nextId = 0;
  private buffer = "";
  private dead: Error | null = null;
  private identity: NodeIdentity = { peer_id: "", addresses: [] };

  private constructor(sock: net.Socket) {
    this.sock = sock;
    sock.on("data", (chunk: Buffer) => this.onData(chunk));
    sock.on("error", (err: Error) => this.onLost(err));
    sock.on("close", () => this.onLost(new Error("socket closed")));
  }

  /** Identity the node reported when the session opened. */
  get peerId(): string {
    return this.identity.peer_id;
  }

  get addresses(): string[] {
    return this.identity.addresses;
  }

  /**
   * Connect to a node's control socket and confirm it is alive with an
   * identity round trip.
   */
  static async connect(socketPath: string): Promise<SdkSession> {
    const sock = await new Promise<net.Socket>((resolve, reject) => {
      const s = net.createConnection({ path: socketPath });
      s.once("connect", () => {
        s.removeAllListeners("error");
        resolve(s);
      });
      s.once("error", (err) => {
        reject(
          new SdkError(
            "no-daemon",
            `cannot reach control socket ${socketPath} (${err.message}); ` +
              "is the node running?",
          ),
        );
      });
    });
    const session = new SdkSession(sock);
    session.identity = (await session.request(
      "id",
      {},
    )) as unknown as NodeIdentity;
    return session;
  }

  /**
   * Issue one raw operation and resolve with the node's result object,
   * exactly as the node serialized it. Typed wrappers below cover the
   * common ops; this is the full surface.
   */
  request(op: string, args: ResultObject): Promise<ResultObject> {
    if (this.dead !== null) {
      return Promise.reject(this.dead);
    }
    const id = ++this.nextId;
    const line = canonicalJson({ id, op, args }) + "\n";
    return new Promise<ResultObject>((resolve, reject) => {
      this.pending.set(id, { resolve, reject });
      this.sock.write(line, (err) => {
        if (err && this.pending.delete(id)) {
          reject(new SdkError("io", `control socket write failed: ${err.message}`));
        }
      });
    });
  }

  // ----------------------------------------------------------- wrappers

  async id(): Promise<NodeIdentity> {
    return (await this.request("id", {})) as unknown as NodeIdentity;
  }

  /** Store an object in the mesh; resolves to its content id text. */
  async publish(data: Uint8Array | string): Promise<string> {
    const result = await this.request("publish", { data: toB64(data) });
    return result["cid"] as string;
  }

  /** Pull the object behind a content id; resolves to its bytes. */
  async fetch(cid: string): Promise<Uint8Array> {
    const result = await this.request("fetch", { cid });
    return fromB64(result["data"] as string);
  }

  /** Re-announce an object the node already holds. */
  async provide(cid: string): Promise<void> {
    await this.request("provide", { cid });
  }

  /** Unary call to a route on a peer; resolves to the response bytes. */
  async rpc(
    peer: string,
    route: string,
    payload: Uint8Array | string = new Uint8Array(),
    opts: { idempotent?: boolean } = {},
  ): Promise<Uint8Array> {
    const result = await this.request("rpc", {
      peer,
      route,
      payload: toB64(payload),
      idempotent: opts.idempotent ?? false,
    });
    return fromB64(result["payload"] as string);
  }

  async crdtAdd(topic: string, element: Uint8Array | string): Promise<SetView> {
    const result = await this.request("crdt", {
      action: "add",
      topic,
      element: toB64(element),
    });
    return decodeSetView(result);
  }

  async crdtRemove(
    topic: string,
    element: Uint8Array | string,
  ): Promise<SetView> {
    const result = await this.request("crdt", {
      action: "rm",
      topic,
      element: toB64(element),
    });
    return decodeSetView(result);
  }

  async crdtPut(
    topic: string,
    key: Uint8Array | string,
    value: Uint8Array | string,
  ): Promise<MapView> {
    const result = await this.request("crdt", {
      action: "put",
      topic,
      key: toB64(key),
      value: toB64(value),
    });
    return decodeMapView(result);
  }

  /**
   * Read a topic's state. Passing kind registers the topic here when
   * it is new, so a fresh node starts pulling it from peers.
   */
  async crdtShow(
    topic: string,
    kind?: "set" | "map",
  ): Promise<SetView | MapView> {
    const args: ResultObject = { action: "show", topic };
    if (kind !== undefined) args["kind"] = kind;
    const result = await this.request("crdt", args);
    return result["kind"] === "set"
      ? decodeSetView(result)
      : decodeMapView(result);
  }

  /** Dial a peer and seed the node's routing table from it. */
  async connectPeer(peer: string, addr: string): Promise<void> {
    await this.request("connect", { peer, addr });
  }

  /** Ask the node to shut down. */
  async stop(): Promise<void> {
    await this.request("stop", {});
  }

  /** Drop the socket. Outstanding requests reject. */
  close(): void {
    this.sock.destroy();
  }

  // ----------------------------------------------------------- plumbing

  private onData(chunk: Buffer): void {
    this.buffer += chunk.toString("utf-8");
    for (;;) {
      const nl = this.buffer.indexOf("\n");
      if (nl === -1) return;
      const line = this.buffer.slice(0, nl);
      this.buffer = this.buffer.slice(nl + 1);
      if (line.trim() === "") continue;
      let resp: ResultObject;
      try {
        resp = JSON.parse(line) as ResultObject;
      } catch {
        this.onLost(new Error("control socket spoke garbage"));
        return;
      }
      const waiter = this.pending.get(resp["id"] as number);
      if (waiter === undefined) continue; // stray answer; not ours
      this.pending.delete(resp["id"] as number);
      if (resp["ok"] === true) {
        waiter.resolve((resp["result"] ?? {}) as ResultObject);
      } else {
        const err = (resp["error"] ?? {}) as { code?: string; message?: string };
        waiter.reject(
          new SdkError(err.code ?? "internal", err.message ?? "unknown error"),
        );
      }
    }
  }

  private onLost(cause: Error): void {
    if (this.dead !== null) return;
    this.dead =
      cause instanceof SdkError
        ? cause
        : new SdkError("io", `control socket failed: ${cause.message}`);
    this.sock.destroy();
    for (const waiter of this.pending.values()) {
      waiter.reject(this.dead);
    }
    this.pending.clear();
  }
}

function decodeSetView(result: ResultObject): SetView {
  return {
    topic: result["topic"] as string,
    kind: "set",
    elements: (result["elements"] as string[]).map(fromB64),
  };
}

function decodeMapView(result: ResultObject): MapView {
  const entries = new Map<string, Uint8Array>();
  const raw = result["entries"] as { [key: string]: string };
  for (const key of Object.keys(raw)) {
    entries.set(key, fromB64(raw[key] as string));
  }
  return { topic: result["topic"] as string, kind: "map", entries };
}
