/**
 * Minimal NIfTI-1 encode/decode for the annotation wire format.
 *
 * The client posts uncompressed single-file images (magic "n+1"); the
 * server replies with gzipped ones, which callers should inflate first
 * (see maybeGunzip). Data is x-fastest, matching the on-disk layout.
 */

import type { Vec3, BoundingBox } from './types.js';

const HEADER_SIZE = 348;
const VOX_OFFSET = 352;

const DTYPE_UINT8 = 2;
const DTYPE_INT16 = 4;
const DTYPE_INT32 = 8;
const DTYPE_FLOAT32 = 16;

export interface NiftiVolume {
  dims: Vec3;
  data: Uint8Array | Int16Array | Int32Array | Float32Array;
  spacing: Vec3;
  descrip: string;
}

export function encodeNifti(
  dims: Vec3,
  data: Uint8Array,
  options: { spacing?: Vec3; descrip?: string } = {},
): Uint8Array {
  const count = dims[0] * dims[1] * dims[2];
  if (data.length !== count) {
    throw new Error(`data length ${data.length} does not match dims ${dims}`);
  }
  const spacing = options.spacing ?? [1, 1, 1];
  const buffer = new ArrayBuffer(VOX_OFFSET + count);
  const view = new DataView(buffer);
  view.setInt32(0, HEADER_SIZE, true);
  view.setInt16(40, 3, true); // dim[0]
  view.setInt16(42, dims[0], true);
  view.setInt16(44, dims[1], true);
  view.setInt16(46, dims[2], true);
  for (let i = 4; i <= 7; i++) view.setInt16(40 + 2 * i, 1, true);
  view.setInt16(70, DTYPE_UINT8, true); // datatype
  view.setInt16(72, 8, true); // bitpix
  view.setFloat32(76, 1, true); // pixdim[0] (qfac)
  view.setFloat32(80, spacing[0], true);
  view.setFloat32(84, spacing[1], true);
  view.setFloat32(88, spacing[2], true);
  view.setFloat32(108, VOX_OFFSET, true); // vox_offset
  view.setFloat32(112, 1, true); // scl_slope
  view.setUint8(123, 2 | 8); // xyzt_units: mm | sec
  const descrip = new TextEncoder().encode(options.descrip ?? '').slice(0, 79);
  new Uint8Array(buffer, 148, descrip.length).set(descrip);
  view.setInt16(254, 1, true); // sform_code
  // sform rows: diagonal spacing, zero offset
  view.setFloat32(280, spacing[0], true);
  view.setFloat32(300, spacing[1], true);
  view.setFloat32(320, spacing[2], true);
  const magic = new TextEncoder().encode('n+1\0');
  new Uint8Array(buffer, 344, 4).set(magic);
  new Uint8Array(buffer, VOX_OFFSET).set(data);
  return new Uint8Array(buffer);
}

export function decodeNifti(bytes: Uint8Array): NiftiVolume {
  const buffer = bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.byteLength);
  const view = new DataView(buffer);
  if (view.byteLength < HEADER_SIZE) throw new Error('too short for a NIfTI-1 header');
  let little = true;
  if (view.getInt32(0, true) !== HEADER_SIZE) {
    if (view.getInt32(0, false) !== HEADER_SIZE) throw new Error('not a NIfTI-1 file');
    little = false;
  }
  const ndim = view.getInt16(40, little);
  if (ndim < 3) throw new Error(`expected a 3D volume, dim[0]=${ndim}`);
  const dims: Vec3 = [
    view.getInt16(42, little),
    view.getInt16(44, little),
    view.getInt16(46, little),
  ];
  for (let i = 4; i <= ndim; i++) {
    if (view.getInt16(40 + 2 * i, little) > 1) throw new Error('expected a 3D volume');
  }
  const datatype = view.getInt16(70, little);
  const voxOffset = Math.max(view.getFloat32(108, little), VOX_OFFSET);
  const count = dims[0] * dims[1] * dims[2];
  const spacing: Vec3 = [
    view.getFloat32(80, little),
    view.getFloat32(84, little),
    view.getFloat32(88, little),
  ];
  const descripBytes = new Uint8Array(buffer, 148, 80);
  const nul = descripBytes.indexOf(0);
  const descrip = new TextDecoder().decode(descripBytes.slice(0, nul < 0 ? 80 : nul));

  let data: NiftiVolume['data'];
  const start = Math.round(voxOffset);
  switch (datatype) {
    case DTYPE_UINT8:
      data = new Uint8Array(buffer, start, count);
      break;
    case DTYPE_INT16:
      data = readTyped(view, start, count, 2, little, (o) => view.getInt16(o, little), Int16Array);
      break;
    case DTYPE_INT32:
      data = readTyped(view, start, count, 4, little, (o) => view.getInt32(o, little), Int32Array);
      break;
    case DTYPE_FLOAT32:
      data = readTyped(view, start, count, 4, little, (o) => view.getFloat32(o, little), Float32Array);
      break;
    default:
      throw new Error(`unsupported NIfTI datatype ${datatype}`);
  }
  return { dims, data, spacing, descrip };
}

function readTyped<T extends Int16Array | Int32Array | Float32Array>(
  view: DataView,
  start: number,
  count: number,
  itemSize: number,
  little: boolean,
  get: (offset: number) => number,
  Ctor: new (n: number) => T,
): T {
  const out = new Ctor(count);
  for (let i = 0; i < count; i++) out[i] = get(start + i * itemSize);
  return out;
}

export function boxDescrip(box: BoundingBox): string {
  return `box=${box.min.join(',')}:${box.max.join(',')}`;
}

export function parseBoxDescrip(descrip: string): BoundingBox | null {
  if (!descrip.startsWith('box=')) return null;
  const parts = descrip.slice(4).split(':');
  if (parts.length !== 2) return null;
  const min = parts[0].split(',').map(Number);
  const max = parts[1].split(',').map(Number);
  if (min.length !== 3 || max.length !== 3 || [...min, ...max].some(Number.isNaN)) return null;
  return { min: min as Vec3, max: max as Vec3 };
}

const GZIP_MAGIC_0 = 0x1f;
const GZIP_MAGIC_1 = 0x8b;

/** Inflate gzipped payloads; passes plain payloads through untouched. */
export async function maybeGunzip(bytes: Uint8Array): Promise<Uint8Array> {
  if (bytes.length < 2 || bytes[0] !== GZIP_MAGIC_0 || bytes[1] !== GZIP_MAGIC_1) {
    return bytes;
  }
  if (typeof DecompressionStream !== 'undefined') {
    const stream = new Blob([bytes as BlobPart]).stream().pipeThrough(new DecompressionStream('gzip'));
    const out = await new Response(stream).arrayBuffer();
    return new Uint8Array(out);
  }
  const zlib = await import('node:zlib');
  return new Uint8Array(zlib.gunzipSync(bytes));
}
