/**
 * Spawns real nodes for SDK tests.
 *
 * Every test in this package runs against the actual daemon binary:
 * the SDK's one claim is protocol fidelity, and only a live control
 * socket can check that.
 */

import { ChildProcess, spawn, spawnSync } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import * as path from "node:path";

// the daemon and CLI ship as a Python package; tests drive the
// installed entry point
const CLI = "peermesh";

export interface DaemonHandle {
  proc: ChildProcess;
  socket: string;
  peerId: string;
  address: string;
  stop(): Promise<number | null>;
}

export interface TestMesh {
  dir: string;
  a: DaemonHandle;
  b: DaemonHandle;
  teardown(): Promise<void>;
}

function waitReadyLine(proc: ChildProcess): Promise<string> {
  return new Promise((resolve, reject) => {
    let buf = "";
    const onData = (chunk: Buffer) => {
      buf += chunk.toString("utf-8");
      const nl = buf.indexOf("\n");
      if (nl !== -1) {
        proc.stdout!.off("data", onData);
        resolve(buf.slice(0, nl));
      }
    };
    proc.stdout!.on("data", onData);
    proc.once("exit", (code) =>
      reject(new Error(`daemon exited with ${code} before its ready line`)),
    );
    proc.once("error", reject);
  });
}

export async function startDaemon(
  dir: string,
  name: string,
  extraYaml = "",
): Promise<DaemonHandle> {
  const socket = path.join(dir, `${name}.sock`);
  const config = path.join(dir, `${name}.yaml`);
  writeFileSync(
    config,
    `control: {socket: ${socket}}\n` +
      `timeouts_ms: {sync_interval: 150}\n` +
      extraYaml,
  );
  const proc = spawn(CLI, ["--json", "run", "--config", config], {
    stdio: ["ignore", "pipe", "pipe"],
  });
  const ready = JSON.parse(await waitReadyLine(proc)) as {
    peer_id: string;
    addresses: string[];
  };
  return {
    proc,
    socket,
    peerId: ready.peer_id,
    address: ready.addresses[0] as string,
    stop() {
      return new Promise((resolve) => {
        if (proc.exitCode !== null) {
          resolve(proc.exitCode);
          return;
        }
        proc.once("exit", (code) => resolve(code));
        proc.kill("SIGTERM");
        setTimeout(() => proc.kill("SIGKILL"), 10000).unref();
      });
    },
  };
}

/** Two loopback nodes, the second bootstrapped off the first. */
export async function startMesh(): Promise<TestMesh> {
  const dir = mkdtempSync(path.join(tmpdir(), "peermesh-sdk-"));
  const a = await startDaemon(dir, "a");
  const b = await startDaemon(
    dir,
    "b",
    `bootstrap: ["${a.peerId}@${a.address}"]\n`,
  );
  return {
    dir,
    a,
    b,
    async teardown() {
      await Promise.all([a.stop(), b.stop()]);
      rmSync(dir, { recursive: true, force: true });
    },
  };
}

export interface CliRun {
  code: number | null;
  stdout: Buffer;
  stderr: string;
}

/** Run one CLI command to completion, stdout kept as raw bytes. */
export function runCli(...args: string[]): CliRun {
  const proc = spawnSync(CLI, args, { timeout: 60000 });
  if (proc.error) throw proc.error;
  return {
    code: proc.status,
    stdout: proc.stdout,
    stderr: proc.stderr.toString("utf-8"),
  };
}

export function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

/** Poll until check passes; throws after the deadline. */
export async function until(
  check: () => Promise<boolean>,
  what: string,
  deadlineMs = 20000,
): Promise<void> {
  const t0 = Date.now();
  while (Date.now() - t0 < deadlineMs) {
    if (await check()) return;
    await sleep(50);
  }
  throw new Error(`gave up waiting for ${what}`);
}
