/**
 * Stdio worker serving a promptable segmenter behind the newline-delimited
 * JSON protocol. One request in flight at a time; large payloads are
 * exchanged as .dfgt files in the scratch directory.
 *
 * Usage: node worker.js --model <path> --scratch <dir> [--cache-size N]
 *
 * The encoder runs at most once per image id; embeddings live in an LRU
 * cache bounded by --cache-size (an evicted image must be re-embedded).
 * Every actual encoder invocation appends the image id to
 * <scratch>/encoder_calls.log so test harnesses can count them. Any failure
 * is reported as {"ok": false, "error": ...}; the process never crashes on
 * malformed input.
 */
import * as fs from "node:fs";
import * as path from "node:path";
import * as readline from "node:readline";

import { readTensorFile, writeTensorFile } from "./dfgt";
import { LruCache } from "./lru-cache";
import { Box, ImageEmbedding, SegmenterModel, loadModel } from "./stub-model";

interface Reply {
  ok: boolean;
  error?: string;
  features?: boolean;
  d_M?: number;
}

export class AdapterState {
  private readonly cache: LruCache<ImageEmbedding>;

  constructor(
    readonly model: SegmenterModel,
    readonly scratch: string,
    cacheSize: number,
  ) {
    this.cache = new LruCache<ImageEmbedding>(cacheSize);
    fs.mkdirSync(scratch, { recursive: true });
  }

  private logEncode(imageId: string): void {
    fs.appendFileSync(path.join(this.scratch, "encoder_calls.log"), imageId + "\n");
  }

  handle(message: Record<string, unknown>): { reply: Reply; shutdown: boolean } {
    const cmd = message.cmd;
    switch (cmd) {
      case "handshake":
        return {
          reply: {
            ok: true,
            features: this.model.servesFeatures,
            d_M: this.model.featureDim,
          },
          shutdown: false,
        };
      case "shutdown":
        return { reply: { ok: true }, shutdown: true };
      case "embed": {
        const imageId = String(message.image_id);
        if (!this.cache.has(imageId)) {
          const image = readTensorFile(String(message.image));
          this.cache.set(imageId, this.model.encode(image));
          this.logEncode(imageId);
        } else {
          this.cache.get(imageId); // refresh recency
        }
        return { reply: { ok: true }, shutdown: false };
      }
      case "segment": {
        const embedding = this.cache.get(String(message.image_id));
        if (embedding === undefined) {
          return { reply: { ok: false, error: "no_embedding" }, shutdown: false };
        }
        const box = message.box as Box;
        if (!Array.isArray(box) || box.length !== 4) {
          return { reply: { ok: false, error: "bad_box" }, shutdown: false };
        }
        const mask = this.model.decodeMask(embedding, box);
        writeTensorFile(String(message.out), {
          dtype: "uint8",
          shape: [embedding.height, embedding.width],
          data: mask,
        });
        return { reply: { ok: true }, shutdown: false };
      }
      case "features": {
        if (!this.model.servesFeatures) {
          return { reply: { ok: false, error: "no_features" }, shutdown: false };
        }
        const embedding = this.cache.get(String(message.image_id));
        if (embedding === undefined) {
          return { reply: { ok: false, error: "no_embedding" }, shutdown: false };
        }
        writeTensorFile(String(message.out), {
          dtype: "float32",
          shape: [embedding.height, embedding.width, this.model.featureDim],
          data: this.model.features(embedding),
        });
        return { reply: { ok: true }, shutdown: false };
      }
      default:
        return {
          reply: { ok: false, error: `unknown_command:${String(cmd)}` },
          shutdown: false,
        };
    }
  }
}

export function dispatchLine(state: AdapterState, line: string): { reply: Reply; shutdown: boolean } {
  let message: Record<string, unknown>;
  try {
    message = JSON.parse(line);
  } catch {
    return { reply: { ok: false, error: "bad_json" }, shutdown: false };
  }
  try {
    return state.handle(message);
  } catch (error) {
    const text = error instanceof Error ? error.message : String(error);
    return { reply: { ok: false, error: text }, shutdown: false };
  }
}

function parseArgs(argv: string[]): { model: string; scratch: string; cacheSize: number } {
  let model = "";
  let scratch = "";
  let cacheSize = 16;
  for (let index = 0; index < argv.length; index += 1) {
    const flag = argv[index];
    if (flag === "--model") {
      model = argv[++index];
    } else if (flag === "--scratch") {
      scratch = argv[++index];
    } else if (flag === "--cache-size") {
      cacheSize = Number(argv[++index]);
    } else {
      throw new Error(`unknown flag ${flag}`);
    }
  }
  if (!model || !scratch) {
    throw new Error("usage: worker --model <path> --scratch <dir> [--cache-size N]");
  }
  return { model, scratch, cacheSize };
}

export function serve(): void {
  const { model, scratch, cacheSize } = parseArgs(process.argv.slice(2));
  const state = new AdapterState(loadModel(model), scratch, cacheSize);
  const lines = readline.createInterface({ input: process.stdin, terminal: false });
  lines.on("line", (line) => {
    if (!line.trim()) {
      return;
    }
    const { reply, shutdown } = dispatchLine(state, line);
    process.stdout.write(JSON.stringify(reply) + "\n");
    if (shutdown) {
      lines.close();
      process.exit(0);
    }
  });
}

if (require.main === module) {
  serve();
}
