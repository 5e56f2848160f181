/** Shared test utilities: seeded PRNG, dict generators, process helpers. */

import { spawn, spawnSync } from "child_process";

import { LayerEntry } from "../src/codec";

/** Deterministic 32-bit PRNG so fuzz cases are reproducible. */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

/**
 * Random model-shaped entries in canonical layer order (encoder stages
 * ascending, then decoder stages ascending, then the head; weight before
 * bias), so byte comparisons against the coordinator's encoder are fair.
 */
export function randomEntries(
  rand: () => number,
  stages?: number
): LayerEntry[] {
  const s = stages ?? 2 + Math.floor(rand() * 3);
  const entries: LayerEntry[] = [];
  const push = (name: string, dims: number[]) => {
    const size = dims.reduce((a, b) => a * b, 1);
    const data = new Float64Array(size);
    for (let i = 0; i < size; i++) {
      data[i] = (rand() - 0.5) * 4;
    }
    entries.push({ name, dims, data });
  };
  for (let i = 0; i < s; i++) {
    push(`enc.${i}.conv.weight`, [2 << i, i === 0 ? 1 : 2 << (i - 1), 3, 3]);
    push(`enc.${i}.conv.bias`, [2 << i]);
  }
  for (let i = 0; i < s - 1; i++) {
    push(`dec.${i}.conv.weight`, [2 << i, 2 << (i + 1), 3, 3]);
    push(`dec.${i}.conv.bias`, [2 << i]);
  }
  push("head.weight", [1, 2, 3, 3]);
  push("head.bias", [1]);
  return entries;
}

export function runPython(
  code: string,
  args: string[] = []
): { status: number; stdout: string; stderr: string } {
  const res = spawnSync("python3", ["-c", code, ...args], {
    encoding: "utf-8",
  });
  return { status: res.status ?? -1, stdout: res.stdout, stderr: res.stderr };
}

export interface ServerHandle {
  port: number;
  done: Promise<number>;
}

/** Start `python3 -m fedseg serve` and resolve once it reports its port. */
export function startServer(
  configPath: string,
  extraArgs: string[] = []
): Promise<ServerHandle> {
  const proc = spawn(
    "python3",
    ["-m", "fedseg", "serve", "--port", "0", "--config", configPath,
     ...extraArgs],
    { stdio: ["ignore", "pipe", "pipe"] }
  );
  let stderr = "";
  proc.stderr.on("data", (chunk: Buffer) => {
    stderr += chunk.toString();
  });
  const done = new Promise<number>((resolve) => {
    proc.on("exit", (code) => resolve(code ?? -1));
  });
  return new Promise((resolve, reject) => {
    let stdout = "";
    proc.stdout.on("data", (chunk: Buffer) => {
      stdout += chunk.toString();
      const match = stdout.match(/listening on [^:]+:(\d+)/);
      if (match) {
        resolve({ port: Number(match[1]), done });
      }
    });
    proc.on("exit", (code) => {
      reject(new Error(`server exited early (${code}): ${stderr}`));
    });
  });
}

/** Run `python3 -m fedseg join` as the peer node. */
export function pythonJoin(
  args: string[]
): Promise<{ code: number; stderr: string }> {
  const proc = spawn("python3", ["-m", "fedseg", "join", ...args], {
    stdio: ["ignore", "ignore", "pipe"],
  });
  let stderr = "";
  proc.stderr.on("data", (chunk: Buffer) => {
    stderr += chunk.toString();
  });
  return new Promise((resolve) => {
    proc.on("exit", (code) => resolve({ code: code ?? -1, stderr }));
  });
}
