/**
 * Binary codec for the federation wire protocol.
 *
 * Frame layout (all little-endian):
 *   magic "FNNU" | version u8 | msg_type u8 | sender_id u32 | round u32 |
 *   payload_len u64 | payload
 *
 * State-dict payload layout:
 *   layer_count u32, then per layer: name_len u16 + UTF-8 name, dtype u8
 *   (0 = float32, 1 = float64), rank u8, dims u32 each, raw values
 *   little-endian row-major. Layers appear in the sender's canonical order
 *   and the decoder preserves that order.
 */

export const MAGIC = Buffer.from("FNNU", "ascii");
export const VERSION = 1;
export const HEADER_LEN = 22;
export const SERVER_ID = 0xffffffff;

export const DTYPE_F32 = 0;
export const DTYPE_F64 = 1;

export enum MsgType {
  Hello = 0,
  FingerprintSubmit = 1,
  GlobalFingerprintBcast = 2,
  StateDictSubmit = 3,
  AggregateBcast = 4,
  RoundAck = 5,
  Abort = 6,
  Shutdown = 7,
}

export interface RoundMessage {
  msgType: MsgType;
  senderId: number;
  round: number;
  payload: Buffer;
}

export interface LayerEntry {
  name: string;
  dims: number[];
  /** Row-major values; always held as 64-bit regardless of wire dtype. */
  data: Float64Array;
}

export class FramingError extends Error {}
export class VersionError extends Error {}
export class ProtocolError extends Error {}

export function frameMessage(msg: RoundMessage): Buffer {
  const header = Buffer.alloc(HEADER_LEN);
  MAGIC.copy(header, 0);
  header.writeUInt8(VERSION, 4);
  header.writeUInt8(msg.msgType, 5);
  header.writeUInt32LE(msg.senderId >>> 0, 6);
  header.writeUInt32LE(msg.round >>> 0, 10);
  header.writeBigUInt64LE(BigInt(msg.payload.length), 14);
  return Buffer.concat([header, msg.payload]);
}

/** Parse a 22-byte header; returns the payload length alongside the fields. */
export function parseHeader(header: Buffer): RoundMessage & {
  payloadLen: number;
} {
  if (header.length !== HEADER_LEN) {
    throw new FramingError(`header must be ${HEADER_LEN} bytes`);
  }
  if (!header.subarray(0, 4).equals(MAGIC)) {
    throw new ProtocolError(
      `bad magic ${JSON.stringify(header.subarray(0, 4).toString("latin1"))}`
    );
  }
  const version = header.readUInt8(4);
  if (version !== VERSION) {
    throw new VersionError(`unsupported protocol version ${version}`);
  }
  const msgType = header.readUInt8(5);
  if (!(msgType in MsgType)) {
    throw new ProtocolError(`unknown message type ${msgType}`);
  }
  const payloadLen = Number(header.readBigUInt64LE(14));
  return {
    msgType: msgType as MsgType,
    senderId: header.readUInt32LE(6),
    round: header.readUInt32LE(10),
    payload: Buffer.alloc(0),
    payloadLen,
  };
}

export function jsonPayload(obj: unknown): Buffer {
  return Buffer.from(JSON.stringify(obj), "utf-8");
}

export function encodeStateDict(
  entries: LayerEntry[],
  dtype: number = DTYPE_F64
): Buffer {
  if (dtype !== DTYPE_F32 && dtype !== DTYPE_F64) {
    throw new FramingError(`unknown dtype code ${dtype}`);
  }
  const width = dtype === DTYPE_F32 ? 4 : 8;
  const parts: Buffer[] = [];
  const count = Buffer.alloc(4);
  count.writeUInt32LE(entries.length, 0);
  parts.push(count);
  for (const entry of entries) {
    const rawName = Buffer.from(entry.name, "utf-8");
    if (rawName.length > 0xffff) {
      throw new FramingError(`layer name too long: ${rawName.length} bytes`);
    }
    const head = Buffer.alloc(2 + rawName.length + 2 + 4 * entry.dims.length);
    head.writeUInt16LE(rawName.length, 0);
    rawName.copy(head, 2);
    head.writeUInt8(dtype, 2 + rawName.length);
    head.writeUInt8(entry.dims.length, 3 + rawName.length);
    entry.dims.forEach((d, i) => {
      head.writeUInt32LE(d, 4 + rawName.length + 4 * i);
    });
    parts.push(head);
    const values = Buffer.alloc(width * entry.data.length);
    for (let i = 0; i < entry.data.length; i++) {
      if (dtype === DTYPE_F32) {
        values.writeFloatLE(Math.fround(entry.data[i]), 4 * i);
      } else {
        values.writeDoubleLE(entry.data[i], 8 * i);
      }
    }
    parts.push(values);
  }
  return Buffer.concat(parts);
}

export function decodeStateDict(payload: Buffer): LayerEntry[] {
  let offset = 0;
  const take = (n: number): Buffer => {
    if (offset + n > payload.length) {
      throw new FramingError("truncated state-dict payload");
    }
    const out = payload.subarray(offset, offset + n);
    offset += n;
    return out;
  };
  const count = take(4).readUInt32LE(0);
  const entries: LayerEntry[] = [];
  for (let k = 0; k < count; k++) {
    const nameLen = take(2).readUInt16LE(0);
    const name = take(nameLen).toString("utf-8");
    const meta = take(2);
    const dtype = meta.readUInt8(0);
    const rank = meta.readUInt8(1);
    if (dtype !== DTYPE_F32 && dtype !== DTYPE_F64) {
      throw new FramingError(`unknown dtype code ${dtype}`);
    }
    const dims: number[] = [];
    for (let i = 0; i < rank; i++) {
      dims.push(take(4).readUInt32LE(0));
    }
    const size = dims.reduce((a, b) => a * b, 1);
    const width = dtype === DTYPE_F32 ? 4 : 8;
    const raw = take(size * width);
    const data = new Float64Array(size);
    for (let i = 0; i < size; i++) {
      data[i] =
        dtype === DTYPE_F32 ? raw.readFloatLE(4 * i) : raw.readDoubleLE(8 * i);
    }
    entries.push({ name, dims, data });
  }
  if (offset !== payload.length) {
    throw new FramingError("trailing bytes after state-dict payload");
  }
  return entries;
}

function dimsEqual(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}

/**
 * The per-round update rule: overwrite every local layer the aggregate
 * carries with matching name and dims; keep all other layers bit-identical.
 */
export function applyUpdate(
  local: LayerEntry[],
  aggregated: LayerEntry[]
): LayerEntry[] {
  const byName = new Map(aggregated.map((e) => [e.name, e]));
  return local.map((entry) => {
    const agg = byName.get(entry.name);
    if (agg !== undefined && dimsEqual(agg.dims, entry.dims)) {
      return { name: entry.name, dims: [...entry.dims], data: agg.data.slice() };
    }
    return { name: entry.name, dims: [...entry.dims], data: entry.data.slice() };
  });
}
