/**
 * DFGT binary tensor format: 4-byte magic "DFGT", version byte 0x01, dtype
 * code byte (0x00 float32, 0x01 uint8, 0x02 int32), ndim byte, ndim uint32
 * little-endian shape entries, then the raw little-endian row-major payload.
 */
import * as fs from "node:fs";

export type Dtype = "float32" | "uint8" | "int32";

export interface Tensor {
  dtype: Dtype;
  shape: number[];
  /** Row-major values; Float32Array, Uint8Array or Int32Array. */
  data: Float32Array | Uint8Array | Int32Array;
}

const MAGIC = Buffer.from("DFGT", "ascii");
const VERSION = 1;
const DTYPE_CODES: Record<Dtype, number> = { float32: 0, uint8: 1, int32: 2 };
const CODE_DTYPES: Record<number, Dtype> = { 0: "float32", 1: "uint8", 2: "int32" };
const ITEM_SIZE: Record<Dtype, number> = { float32: 4, uint8: 1, int32: 4 };
const MAX_NDIM = 4;

export function elementCount(shape: number[]): number {
  return shape.reduce((total, dim) => total * dim, 1);
}

export function encodeTensor(tensor: Tensor): Buffer {
  const { dtype, shape, data } = tensor;
  if (shape.length < 1 || shape.length > MAX_NDIM) {
    throw new Error(`ndim must be 1..${MAX_NDIM}, got ${shape.length}`);
  }
  for (const dim of shape) {
    if (!Number.isInteger(dim) || dim < 1 || dim > 0xffffffff) {
      throw new Error(`bad shape entry ${dim}`);
    }
  }
  if (elementCount(shape) !== data.length) {
    throw new Error(
      `payload length ${data.length} does not match shape [${shape}]`);
  }
  const header = Buffer.alloc(MAGIC.length + 3 + 4 * shape.length);
  MAGIC.copy(header, 0);
  header.writeUInt8(VERSION, 4);
  header.writeUInt8(DTYPE_CODES[dtype], 5);
  header.writeUInt8(shape.length, 6);
  shape.forEach((dim, index) => header.writeUInt32LE(dim, 7 + 4 * index));
  // Typed arrays are little-endian on every platform Node supports.
  const payload = Buffer.from(data.buffer, data.byteOffset, data.byteLength);
  return Buffer.concat([header, payload]);
}

export function decodeTensor(buffer: Buffer): Tensor {
  if (buffer.length < 7 || !buffer.subarray(0, 4).equals(MAGIC)) {
    throw new Error("bad magic");
  }
  const version = buffer.readUInt8(4);
  if (version !== VERSION) {
    throw new Error(`unsupported version ${version}`);
  }
  const dtype = CODE_DTYPES[buffer.readUInt8(5)];
  if (dtype === undefined) {
    throw new Error(`unknown dtype code ${buffer.readUInt8(5)}`);
  }
  const ndim = buffer.readUInt8(6);
  if (ndim < 1 || ndim > MAX_NDIM) {
    throw new Error(`ndim must be 1..${MAX_NDIM}, got ${ndim}`);
  }
  if (buffer.length < 7 + 4 * ndim) {
    throw new Error("truncated shape");
  }
  const shape: number[] = [];
  for (let index = 0; index < ndim; index += 1) {
    const dim = buffer.readUInt32LE(7 + 4 * index);
    if (dim < 1) {
      throw new Error(`bad shape entry ${dim}`);
    }
    shape.push(dim);
  }
  const offset = 7 + 4 * ndim;
  const byteLength = elementCount(shape) * ITEM_SIZE[dtype];
  if (buffer.length < offset + byteLength) {
    throw new Error(
      `truncated payload: expected ${byteLength} bytes, got ${buffer.length - offset}`);
  }
  // Copy so the typed array is aligned and detached from the file buffer.
  const payload = Buffer.alloc(byteLength);
  buffer.copy(payload, 0, offset, offset + byteLength);
  const view = payload.buffer;
  let data: Tensor["data"];
  if (dtype === "float32") {
    data = new Float32Array(view, 0, byteLength / 4);
  } else if (dtype === "int32") {
    data = new Int32Array(view, 0, byteLength / 4);
  } else {
    data = new Uint8Array(view, 0, byteLength);
  }
  return { dtype, shape, data };
}

export function readTensorFile(path: string): Tensor {
  return decodeTensor(fs.readFileSync(path));
}

export function writeTensorFile(path: string, tensor: Tensor): void {
  fs.writeFileSync(path, encodeTensor(tensor));
}
