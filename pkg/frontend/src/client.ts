/**
 * Reference federation client: joins a coordinator over TCP, submits a
 * fixed state dict each round, applies the broadcast aggregate with the
 * overwrite-or-keep rule, and writes the final dict back to disk.
 *
 * No training happens here; the client only manipulates state dicts, which
 * isolates protocol conformance from numerics.
 */

import * as fs from "fs";
import * as net from "net";

import {
  HEADER_LEN,
  LayerEntry,
  MsgType,
  RoundMessage,
  applyUpdate,
  decodeStateDict,
  encodeStateDict,
  frameMessage,
  jsonPayload,
  parseHeader,
} from "./codec";

export class ConnectError extends Error {}
export class AbortError extends Error {}

/** Buffers socket data and hands out exact byte counts with a deadline. */
class SocketReader {
  private chunks: Buffer[] = [];
  private buffered = 0;
  private closed = false;
  private wakeup: (() => void) | null = null;

  constructor(socket: net.Socket) {
    socket.on("data", (chunk: Buffer) => {
      this.chunks.push(chunk);
      this.buffered += chunk.length;
      this.wakeup?.();
    });
    const finish = () => {
      this.closed = true;
      this.wakeup?.();
    };
    socket.on("end", finish);
    socket.on("close", finish);
    socket.on("error", finish);
  }

  async readExact(n: number, deadline: number): Promise<Buffer> {
    while (this.buffered < n) {
      if (this.closed) {
        throw new AbortError("connection closed by server");
      }
      const remaining = deadline - Date.now();
      if (remaining <= 0) {
        throw new AbortError("timed out waiting for server");
      }
      await new Promise<void>((resolve) => {
        const timer = setTimeout(resolve, remaining);
        this.wakeup = () => {
          clearTimeout(timer);
          resolve();
        };
      });
      this.wakeup = null;
    }
    const whole = Buffer.concat(this.chunks);
    const out = whole.subarray(0, n);
    this.chunks = [whole.subarray(n)];
    this.buffered = whole.length - n;
    return out;
  }
}

async function recvMessage(
  reader: SocketReader,
  timeoutMs: number
): Promise<RoundMessage> {
  const deadline = Date.now() + timeoutMs;
  const header = parseHeader(await reader.readExact(HEADER_LEN, deadline));
  const payload =
    header.payloadLen > 0
      ? await reader.readExact(header.payloadLen, deadline)
      : Buffer.alloc(0);
  return {
    msgType: header.msgType,
    senderId: header.senderId,
    round: header.round,
    payload,
  };
}

function connect(host: string, port: number, timeoutMs: number): Promise<net.Socket> {
  return new Promise((resolve, reject) => {
    const socket = net.createConnection({ host, port });
    const timer = setTimeout(() => {
      socket.destroy();
      reject(new ConnectError(`connect to ${host}:${port} timed out`));
    }, timeoutMs);
    socket.once("connect", () => {
      clearTimeout(timer);
      socket.removeAllListeners("error");
      resolve(socket);
    });
    socket.once("error", (err) => {
      clearTimeout(timer);
      reject(new ConnectError(`connection failed: ${err.message}`));
    });
  });
}

function expect(msg: RoundMessage, wanted: MsgType): RoundMessage {
  if (msg.msgType === MsgType.Abort) {
    let reason = "unknown";
    try {
      reason = JSON.parse(msg.payload.toString("utf-8")).reason;
    } catch {
      // keep the default reason for an empty or malformed abort payload
    }
    throw new AbortError(`server aborted: ${reason}`);
  }
  if (msg.msgType !== wanted) {
    throw new AbortError(
      `expected ${MsgType[wanted]}, got ${MsgType[msg.msgType]}`
    );
  }
  return msg;
}

export interface JoinOptions {
  host: string;
  port: number;
  stateDictPath: string;
  outPath: string;
  nodeId: number;
  timeoutMs?: number;
}

export interface JoinResult {
  rounds: number;
  layers: LayerEntry[];
}

/**
 * Hello -> RoundAck, then per round StateDictSubmit -> AggregateBcast ->
 * local apply, then Shutdown. Writes the final dict to `outPath`.
 */
export async function joinAndRound(opts: JoinOptions): Promise<JoinResult> {
  const timeoutMs = opts.timeoutMs ?? 30000;
  let layers = decodeStateDict(fs.readFileSync(opts.stateDictPath));
  const socket = await connect(opts.host, opts.port, timeoutMs);
  const reader = new SocketReader(socket);
  let totalRounds = 0;
  try {
    socket.write(
      frameMessage({
        msgType: MsgType.Hello,
        senderId: opts.nodeId,
        round: 0,
        payload: jsonPayload({ node_id: opts.nodeId, num_cases: 0 }),
      })
    );
    const ack = expect(await recvMessage(reader, timeoutMs), MsgType.RoundAck);
    const ackInfo = JSON.parse(ack.payload.toString("utf-8"));
    if (ackInfo.ffe) {
      throw new AbortError(
        "server requested a fingerprint phase, which needs a dataset-holding node"
      );
    }
    totalRounds = Number(ackInfo.total_rounds);
    for (let t = 0; t < totalRounds; t++) {
      socket.write(
        frameMessage({
          msgType: MsgType.StateDictSubmit,
          senderId: opts.nodeId,
          round: t,
          payload: encodeStateDict(layers),
        })
      );
      const bcast = expect(
        await recvMessage(reader, timeoutMs),
        MsgType.AggregateBcast
      );
      if (bcast.round !== t) {
        throw new AbortError(
          `aggregate for round ${bcast.round} while in round ${t}`
        );
      }
      layers = applyUpdate(layers, decodeStateDict(bcast.payload));
    }
    expect(await recvMessage(reader, timeoutMs), MsgType.Shutdown);
  } finally {
    socket.destroy();
  }
  fs.writeFileSync(opts.outPath, encodeStateDict(layers));
  return { rounds: totalRounds, layers };
}
