#!/usr/bin/env node
/**
 * Command line surface: `refclient join --addr HOST:PORT --state-dict FILE
 * --out FILE [--node-id N] [--timeout SECONDS]`.
 *
 * Exit codes mirror the coordinator's CLI: 0 success, 2 invalid input,
 * 3 federation abort or protocol violation, 4 connection refused,
 * 5 protocol version mismatch.
 */

import { parseArgs } from "util";

import { FramingError, ProtocolError, VersionError } from "./codec";
import { AbortError, ConnectError, joinAndRound } from "./client";

export const EXIT_OK = 0;
export const EXIT_CONFIG = 2;
export const EXIT_ABORT = 3;
export const EXIT_CONNECT = 4;
export const EXIT_VERSION = 5;

function parseAddr(addr: string): { host: string; port: number } {
  const idx = addr.lastIndexOf(":");
  const host = idx > 0 ? addr.slice(0, idx) : "127.0.0.1";
  const port = Number(addr.slice(idx + 1));
  if (!Number.isInteger(port) || port <= 0 || port > 0xffff) {
    throw new UsageError(`invalid address ${JSON.stringify(addr)}`);
  }
  return { host, port };
}

class UsageError extends Error {}

export async function main(argv: string[]): Promise<number> {
  try {
    if (argv[0] !== "join") {
      throw new UsageError("usage: refclient join --addr HOST:PORT " +
        "--state-dict FILE --out FILE [--node-id N] [--timeout SECONDS]");
    }
    const { values } = parseArgs({
      args: argv.slice(1),
      options: {
        addr: { type: "string" },
        "state-dict": { type: "string" },
        out: { type: "string" },
        "node-id": { type: "string", default: "0" },
        timeout: { type: "string", default: "30" },
      },
    });
    if (!values.addr || !values["state-dict"] || !values.out) {
      throw new UsageError("join needs --addr, --state-dict and --out");
    }
    const { host, port } = parseAddr(values.addr);
    const nodeId = Number(values["node-id"]);
    if (!Number.isInteger(nodeId) || nodeId < 0) {
      throw new UsageError(`invalid node id ${values["node-id"]}`);
    }
    await joinAndRound({
      host,
      port,
      stateDictPath: values["state-dict"],
      outPath: values.out,
      nodeId,
      timeoutMs: Number(values.timeout) * 1000,
    });
    return EXIT_OK;
  } catch (err) {
    if (err instanceof ConnectError) {
      console.error(String(err.message));
      return EXIT_CONNECT;
    }
    if (err instanceof VersionError) {
      console.error(`version mismatch: ${err.message}`);
      return EXIT_VERSION;
    }
    if (err instanceof AbortError || err instanceof ProtocolError) {
      console.error(`federation aborted: ${err.message}`);
      return EXIT_ABORT;
    }
    if (
      err instanceof UsageError ||
      err instanceof FramingError ||
      (err as NodeJS.ErrnoException).code === "ENOENT" ||
      err instanceof TypeError
    ) {
      console.error(`invalid input: ${(err as Error).message}`);
      return EXIT_CONFIG;
    }
    throw err;
  }
}

if (require.main === module) {
  main(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
