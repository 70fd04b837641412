import { describe, expect, it } from "vitest";

import { Tensor } from "../src/dfgt";
import { StubModel, bilinearUpsample } from "../src/stub-model";

function gradientImage(height: number, width: number): Tensor {
  const data = new Float32Array(height * width);
  for (let row = 0; row < height; row += 1) {
    for (let col = 0; col < width; col += 1) {
      data[row * width + col] = row / height;
    }
  }
  return { dtype: "float32", shape: [height, width], data };
}

describe("bilinearUpsample", () => {
  it("keeps a constant grid constant", () => {
    const grid = new Float64Array([0.3, 0.3, 0.3, 0.3]);
    const up = bilinearUpsample(grid, 2, 2, 8, 8);
    for (const value of up) {
      expect(value).toBeCloseTo(0.3, 12);
    }
  });

  it("stays within the grid value range", () => {
    const grid = new Float64Array([0, 1, 0.5, 0.25]);
    const up = bilinearUpsample(grid, 2, 2, 9, 7);
    for (const value of up) {
      expect(value).toBeGreaterThanOrEqual(0);
      expect(value).toBeLessThanOrEqual(1);
    }
  });
});

describe("StubModel", () => {
  const model = new StubModel({ type: "stub", d_M: 8, mask_threshold: 0.5, downsample: 4 });

  it("encodes to a downsampled grid", () => {
    const embedding = model.encode(gradientImage(32, 24));
    expect(embedding.gridHeight).toBe(8);
    expect(embedding.gridWidth).toBe(6);
    expect(embedding.pooled.length).toBe(48);
  });

  it("is deterministic", () => {
    const image = gradientImage(16, 16);
    const a = model.encode(image);
    const b = model.encode(image);
    expect(Buffer.from(a.pooled.buffer).equals(Buffer.from(b.pooled.buffer))).toBe(true);
    const maskA = model.decodeMask(a, [2, 2, 12, 12]);
    const maskB = model.decodeMask(b, [2, 2, 12, 12]);
    expect(Buffer.from(maskA).equals(Buffer.from(maskB))).toBe(true);
  });

  it("masks are binary, zero outside the box, and threshold-driven", () => {
    const embedding = model.encode(gradientImage(16, 16));
    const box: [number, number, number, number] = [4, 4, 11, 11];
    const mask = model.decodeMask(embedding, box);
    for (let row = 0; row < 16; row += 1) {
      for (let col = 0; col < 16; col += 1) {
        const inside = row >= 4 && row <= 11 && col >= 4 && col <= 11;
        const value = mask[row * 16 + col];
        expect(value === 0 || value === 1).toBe(true);
        if (!inside) {
          expect(value).toBe(0);
        }
      }
    }
    // The gradient image exceeds 0.5 only in its lower half.
    expect(mask[5 * 16 + 5]).toBe(0);
    expect(mask[11 * 16 + 5]).toBe(1);
  });

  it("feature maps have the advertised shape", () => {
    const embedding = model.encode(gradientImage(12, 20));
    const feats = model.features(embedding);
    expect(feats.length).toBe(12 * 20 * 8);
    for (const value of feats) {
      expect(Number.isFinite(value)).toBe(true);
    }
  });

  it("accepts three-channel images", () => {
    const data = new Float32Array(4 * 4 * 3).fill(0.7);
    const embedding = model.encode({ dtype: "float32", shape: [4, 4, 3], data });
    expect(embedding.pooled[0]).toBeCloseTo(0.7, 6);
  });
});
