/**
 * Cross-language interop against the coordinator package:
 * codec byte-equivalence on fuzzed files and live 1- and 2-node rounds
 * over loopback TCP.
 */

import * as fs from "fs";
import * as os from "os";
import * as path from "path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { decodeStateDict, encodeStateDict } from "../src/codec";
import { joinAndRound } from "../src/client";
import {
  mulberry32,
  pythonJoin,
  randomEntries,
  runPython,
  startServer,
} from "./helpers";

let tmp: string;

beforeAll(() => {
  tmp = fs.mkdtempSync(path.join(os.tmpdir(), "refclient-"));
});

afterAll(() => {
  fs.rmSync(tmp, { recursive: true, force: true });
});

const PY_REENCODE = `
import sys
from fedseg.wire import read_state_dict_file, write_state_dict_file
sd = read_state_dict_file(sys.argv[1])
write_state_dict_file(sys.argv[2], sd)
`;

const PY_GENERATE = `
import sys
from fedseg.fingerprint import TrainingPlan, features_per_stage
from fedseg.model import init_state_dict
from fedseg.wire import write_state_dict_file
seed, stages = int(sys.argv[2]), int(sys.argv[3])
plan = TrainingPlan([1.0, 1.0], [128, 128], stages,
                    features_per_stage(stages, base=2, cap=8), 2, (0.0, 1.0))
write_state_dict_file(sys.argv[1], init_state_dict(plan, seed=seed))
`;

describe("codec interop", () => {
  it("10 fuzzed dicts survive a decode/re-encode by the coordinator", () => {
    const rand = mulberry32(2718);
    for (let k = 0; k < 10; k++) {
      const file = path.join(tmp, `fuzz-${k}.sd`);
      const back = path.join(tmp, `fuzz-${k}.back.sd`);
      const encoded = encodeStateDict(randomEntries(rand));
      fs.writeFileSync(file, encoded);
      const res = runPython(PY_REENCODE, [file, back]);
      expect(res.status, res.stderr).toBe(0);
      expect(fs.readFileSync(back).equals(encoded)).toBe(true);
    }
  }, 60000);

  it("decodes and re-encodes coordinator-written dicts bit-exactly", () => {
    for (let k = 0; k < 10; k++) {
      const file = path.join(tmp, `pygen-${k}.sd`);
      const res = runPython(PY_GENERATE, [file, String(100 + k),
                                          String(2 + (k % 4))]);
      expect(res.status, res.stderr).toBe(0);
      const original = fs.readFileSync(file);
      expect(encodeStateDict(decodeStateDict(original)).equals(original)).toBe(
        true
      );
    }
  }, 60000);
});

function writeServerConfig(name: string, expectedNodes: number): string {
  const cfgPath = path.join(tmp, name);
  fs.writeFileSync(
    cfgPath,
    JSON.stringify({
      expected_nodes: expectedNodes,
      strategy: "asym",
      rounds: 1,
      timeout: 30,
    })
  );
  return cfgPath;
}

describe("live federation rounds", () => {
  it("K=1: the output file is byte-identical to the input", async () => {
    const input = path.join(tmp, "solo.sd");
    const output = path.join(tmp, "solo.out.sd");
    const encoded = encodeStateDict(randomEntries(mulberry32(1), 3));
    fs.writeFileSync(input, encoded);
    const server = await startServer(writeServerConfig("solo.json", 1));
    const result = await joinAndRound({
      host: "127.0.0.1",
      port: server.port,
      stateDictPath: input,
      outPath: output,
      nodeId: 0,
    });
    expect(await server.done).toBe(0);
    expect(result.rounds).toBe(1);
    expect(fs.readFileSync(output).equals(encoded)).toBe(true);
  }, 60000);

  it("K=2 against a negated peer: shared layers zero, bytes match dump", async () => {
    const mine = path.join(tmp, "pair.sd");
    const peer = path.join(tmp, "pair.neg.sd");
    const outTs = path.join(tmp, "pair.out.sd");
    const outPy = path.join(tmp, "pair.py.out.sd");
    const dumpPrefix = path.join(tmp, "pair.agg");
    const entries = randomEntries(mulberry32(2), 3);
    fs.writeFileSync(mine, encodeStateDict(entries));
    const negated = entries.map((e) => ({
      name: e.name,
      dims: [...e.dims],
      data: e.data.map((v) => -v),
    }));
    fs.writeFileSync(peer, encodeStateDict(negated));

    const server = await startServer(writeServerConfig("pair.json", 2), [
      "--dump-aggregate",
      dumpPrefix,
    ]);
    const addr = `127.0.0.1:${server.port}`;
    const [tsResult, pyResult] = await Promise.all([
      joinAndRound({
        host: "127.0.0.1",
        port: server.port,
        stateDictPath: mine,
        outPath: outTs,
        nodeId: 0,
      }),
      pythonJoin(["--addr", addr, "--state-dict", peer, "--node-id", "1",
                  "--out", outPy]),
    ]);
    expect(await server.done).toBe(0);
    expect(pyResult.code, pyResult.stderr).toBe(0);

    // mean of x and -x is exactly zero on every shared layer
    for (const layer of tsResult.layers) {
      expect(layer.data.every((v) => v === 0)).toBe(true);
    }
    // identical architectures: the applied result is the aggregate itself,
    // so this client's output must match the coordinator's dump and the
    // coordinator-side node's output byte for byte
    const dump = fs.readFileSync(`${dumpPrefix}.round0.sd`);
    expect(fs.readFileSync(outTs).equals(dump)).toBe(true);
    expect(fs.readFileSync(outPy).equals(dump)).toBe(true);
  }, 60000);
});
