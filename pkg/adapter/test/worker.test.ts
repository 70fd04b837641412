/** End-to-end protocol test against the built worker process. */
import { ChildProcess, spawn } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import * as readline from "node:readline";
import { afterEach, beforeEach, describe, expect, it } from "vitest";

import { encodeTensor, readTensorFile } from "../src/dfgt";

const WORKER = path.resolve(__dirname, "..", "dist", "worker.js");
const STUB = path.resolve(__dirname, "..", "models", "stub.json");

class WorkerHarness {
  proc: ChildProcess;
  private replies: Promise<string>[] = [];
  private lines: readline.Interface;

  constructor(readonly scratch: string, cacheSize = 16) {
    this.proc = spawn("node", [WORKER, "--model", STUB, "--scratch", scratch,
      "--cache-size", String(cacheSize)], { stdio: ["pipe", "pipe", "inherit"] });
    this.lines = readline.createInterface({ input: this.proc.stdout! });
  }

  async send(message: unknown): Promise<Record<string, unknown>> {
    const raw = typeof message === "string" ? message : JSON.stringify(message);
    const reply = new Promise<string>((resolve) => {
      this.lines.once("line", resolve);
    });
    this.proc.stdin!.write(raw + "\n");
    return JSON.parse(await reply);
  }

  encoderCalls(): string[] {
    const log = path.join(this.scratch, "encoder_calls.log");
    return fs.existsSync(log)
      ? fs.readFileSync(log, "utf-8").split("\n").filter(Boolean)
      : [];
  }

  async waitForExit(): Promise<number | null> {
    if (this.proc.exitCode !== null) {
      return this.proc.exitCode;
    }
    return new Promise((resolve) => this.proc.once("exit", resolve));
  }

  kill(): void {
    if (this.proc.exitCode === null) {
      this.proc.kill();
    }
  }
}

function writeImage(dir: string, name: string, fill: number, size = 16): string {
  const data = new Float32Array(size * size).fill(fill);
  const file = path.join(dir, name);
  fs.writeFileSync(file, encodeTensor({ dtype: "float32", shape: [size, size], data }));
  return file;
}

describe("worker protocol", () => {
  let tmp: string;
  let harness: WorkerHarness;

  beforeEach(() => {
    tmp = fs.mkdtempSync(path.join(os.tmpdir(), "adapter-test-"));
    harness = new WorkerHarness(path.join(tmp, "scratch"));
  });

  afterEach(() => {
    harness.kill();
    fs.rmSync(tmp, { recursive: true, force: true });
  });

  it("answers handshake with capabilities", async () => {
    const hello = await harness.send({ cmd: "handshake" });
    expect(hello).toEqual({ ok: true, features: true, d_M: 8 });
  });

  it("refuses segment before embed", async () => {
    const reply = await harness.send({
      cmd: "segment", image_id: "ghost", box: [0, 0, 3, 3],
      out: path.join(tmp, "ghost.dfgt"),
    });
    expect(reply).toEqual({ ok: false, error: "no_embedding" });
  });

  it("survives malformed json and unknown commands", async () => {
    expect((await harness.send("not json at all")).ok).toBe(false);
    expect((await harness.send({ cmd: "levitate" })).ok).toBe(false);
    const hello = await harness.send({ cmd: "handshake" });
    expect(hello.ok).toBe(true); // still alive
  });

  it("embeds once per image id and serves masks and features", async () => {
    const image = writeImage(tmp, "img.dfgt", 0.8);
    expect((await harness.send({ cmd: "embed", image, image_id: "a" })).ok).toBe(true);
    expect((await harness.send({ cmd: "embed", image, image_id: "a" })).ok).toBe(true);
    expect(harness.encoderCalls()).toEqual(["a"]);

    const maskPath = path.join(tmp, "mask.dfgt");
    const reply = await harness.send({
      cmd: "segment", image_id: "a", box: [2, 2, 9, 9], out: maskPath,
    });
    expect(reply.ok).toBe(true);
    const mask = readTensorFile(maskPath);
    expect(mask.dtype).toBe("uint8");
    expect(mask.shape).toEqual([16, 16]);
    // Fill 0.8 > threshold 0.5: the whole box is foreground, nothing outside.
    let inside = 0;
    for (let row = 0; row < 16; row += 1) {
      for (let col = 0; col < 16; col += 1) {
        const value = mask.data[row * 16 + col];
        if (row >= 2 && row <= 9 && col >= 2 && col <= 9) {
          expect(value).toBe(1);
          inside += 1;
        } else {
          expect(value).toBe(0);
        }
      }
    }
    expect(inside).toBe(64);

    const featPath = path.join(tmp, "feat.dfgt");
    expect((await harness.send({
      cmd: "features", image_id: "a", out: featPath,
    })).ok).toBe(true);
    const feats = readTensorFile(featPath);
    expect(feats.dtype).toBe("float32");
    expect(feats.shape).toEqual([16, 16, 8]);
    expect(harness.encoderCalls()).toEqual(["a"]); // decode-only work
  });

  it("re-encodes after lru eviction", async () => {
    harness.kill();
    harness = new WorkerHarness(path.join(tmp, "scratch2"), 2);
    const first = writeImage(tmp, "i1.dfgt", 0.1);
    const second = writeImage(tmp, "i2.dfgt", 0.2);
    const third = writeImage(tmp, "i3.dfgt", 0.3);
    await harness.send({ cmd: "embed", image: first, image_id: "i1" });
    await harness.send({ cmd: "embed", image: second, image_id: "i2" });
    await harness.send({ cmd: "embed", image: third, image_id: "i3" }); // evicts i1
    const reply = await harness.send({
      cmd: "segment", image_id: "i1", box: [0, 0, 3, 3],
      out: path.join(tmp, "m.dfgt"),
    });
    expect(reply).toEqual({ ok: false, error: "no_embedding" });
    await harness.send({ cmd: "embed", image: first, image_id: "i1" });
    expect(harness.encoderCalls()).toEqual(["i1", "i2", "i3", "i1"]);
  });

  it("shuts down cleanly", async () => {
    const reply = await harness.send({ cmd: "shutdown" });
    expect(reply).toEqual({ ok: true });
    expect(await harness.waitForExit()).toBe(0);
  });
});
