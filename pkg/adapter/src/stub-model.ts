/**
 * Segmenter model abstraction plus the deterministic stub used in tests.
 *
 * The stub stands in for a real promptable segmenter: `encode` runs once per
 * image and produces a compact embedding (average-pooled intensities);
 * `decodeMask` answers a box prompt from the embedding alone by thresholding
 * a bilinearly upsampled probability map; `features` derives a per-pixel
 * feature map from the embedding grid, upsampled to the image resolution.
 */
import * as fs from "node:fs";

import { Tensor } from "./dfgt";

export type Box = [number, number, number, number]; // inclusive r0, c0, r1, c1

export interface ImageEmbedding {
  height: number;
  width: number;
  gridHeight: number;
  gridWidth: number;
  pooled: Float64Array;
}

export interface SegmenterModel {
  readonly featureDim: number;
  readonly servesFeatures: boolean;
  encode(image: Tensor): ImageEmbedding;
  decodeMask(embedding: ImageEmbedding, box: Box): Uint8Array;
  features(embedding: ImageEmbedding): Float32Array;
}

interface StubSpec {
  type: string;
  d_M?: number;
  mask_threshold?: number;
  downsample?: number;
  features?: boolean;
}

export function imagePlane(image: Tensor): { height: number; width: number; values: Float64Array } {
  if (image.dtype !== "float32") {
    throw new Error(`image must be float32, got ${image.dtype}`);
  }
  if (image.shape.length !== 2 && !(image.shape.length === 3 && image.shape[2] === 3)) {
    throw new Error(`image must be H x W or H x W x 3, got [${image.shape}]`);
  }
  const [height, width] = image.shape;
  const values = new Float64Array(height * width);
  if (image.shape.length === 2) {
    for (let index = 0; index < values.length; index += 1) {
      values[index] = image.data[index];
    }
  } else {
    for (let index = 0; index < values.length; index += 1) {
      values[index] = image.data[index * 3]; // first channel
    }
  }
  return { height, width, values };
}

/** Bilinear upsample of a grid to (height, width), half-pixel centers. */
export function bilinearUpsample(
  grid: Float64Array, gridHeight: number, gridWidth: number,
  height: number, width: number,
): Float64Array {
  const out = new Float64Array(height * width);
  for (let row = 0; row < height; row += 1) {
    let sourceRow = ((row + 0.5) * gridHeight) / height - 0.5;
    sourceRow = Math.min(Math.max(sourceRow, 0), gridHeight - 1);
    const row0 = Math.floor(sourceRow);
    const row1 = Math.min(row0 + 1, gridHeight - 1);
    const rowT = sourceRow - row0;
    for (let col = 0; col < width; col += 1) {
      let sourceCol = ((col + 0.5) * gridWidth) / width - 0.5;
      sourceCol = Math.min(Math.max(sourceCol, 0), gridWidth - 1);
      const col0 = Math.floor(sourceCol);
      const col1 = Math.min(col0 + 1, gridWidth - 1);
      const colT = sourceCol - col0;
      const top = grid[row0 * gridWidth + col0] * (1 - colT)
        + grid[row0 * gridWidth + col1] * colT;
      const bottom = grid[row1 * gridWidth + col0] * (1 - colT)
        + grid[row1 * gridWidth + col1] * colT;
      out[row * width + col] = top * (1 - rowT) + bottom * rowT;
    }
  }
  return out;
}

export class StubModel implements SegmenterModel {
  readonly featureDim: number;
  readonly servesFeatures: boolean;
  private readonly maskThreshold: number;
  private readonly downsample: number;

  constructor(spec: StubSpec) {
    this.featureDim = spec.d_M ?? 8;
    this.maskThreshold = spec.mask_threshold ?? 0.5;
    this.downsample = spec.downsample ?? 4;
    this.servesFeatures = spec.features ?? true;
  }

  encode(image: Tensor): ImageEmbedding {
    const { height, width, values } = imagePlane(image);
    const factor = this.downsample;
    const gridHeight = Math.ceil(height / factor);
    const gridWidth = Math.ceil(width / factor);
    const pooled = new Float64Array(gridHeight * gridWidth);
    for (let gridRow = 0; gridRow < gridHeight; gridRow += 1) {
      for (let gridCol = 0; gridCol < gridWidth; gridCol += 1) {
        let sum = 0;
        let count = 0;
        const rowEnd = Math.min((gridRow + 1) * factor, height);
        const colEnd = Math.min((gridCol + 1) * factor, width);
        for (let row = gridRow * factor; row < rowEnd; row += 1) {
          for (let col = gridCol * factor; col < colEnd; col += 1) {
            sum += values[row * width + col];
            count += 1;
          }
        }
        pooled[gridRow * gridWidth + gridCol] = sum / count;
      }
    }
    return { height, width, gridHeight, gridWidth, pooled };
  }

  decodeMask(embedding: ImageEmbedding, box: Box): Uint8Array {
    const { height, width, gridHeight, gridWidth, pooled } = embedding;
    const probability = bilinearUpsample(pooled, gridHeight, gridWidth, height, width);
    const rowMin = Math.max(0, Math.min(box[0], height - 1));
    const colMin = Math.max(0, Math.min(box[1], width - 1));
    const rowMax = Math.max(0, Math.min(box[2], height - 1));
    const colMax = Math.max(0, Math.min(box[3], width - 1));
    const mask = new Uint8Array(height * width);
    for (let row = rowMin; row <= rowMax; row += 1) {
      for (let col = colMin; col <= colMax; col += 1) {
        if (probability[row * width + col] > this.maskThreshold) {
          mask[row * width + col] = 1;
        }
      }
    }
    return mask;
  }

  features(embedding: ImageEmbedding): Float32Array {
    const { height, width, gridHeight, gridWidth, pooled } = embedding;
    const out = new Float32Array(height * width * this.featureDim);
    const channel = new Float64Array(gridHeight * gridWidth);
    for (let dim = 0; dim < this.featureDim; dim += 1) {
      for (let index = 0; index < pooled.length; index += 1) {
        channel[index] = Math.cos((dim + 1) * Math.PI * pooled[index]);
      }
      const up = bilinearUpsample(channel, gridHeight, gridWidth, height, width);
      for (let pixel = 0; pixel < up.length; pixel += 1) {
        out[pixel * this.featureDim + dim] = Math.fround(up[pixel]);
      }
    }
    return out;
  }
}

export function loadModel(path: string): SegmenterModel {
  const spec = JSON.parse(fs.readFileSync(path, "utf-8")) as StubSpec;
  if (spec.type === "stub") {
    return new StubModel(spec);
  }
  throw new Error(`unsupported model type ${spec.type ?? "(missing)"}`);
}
