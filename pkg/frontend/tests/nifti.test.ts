import { gzipSync } from 'node:zlib';
import { describe, expect, it } from 'vitest';

import { boxDescrip, decodeNifti, encodeNifti, maybeGunzip, parseBoxDescrip } from '../src/nifti.js';
import type { Vec3 } from '../src/types.js';

describe('nifti codec', () => {
  it('round-trips a label grid with box descrip', () => {
    const dims: Vec3 = [5, 4, 3];
    const data = new Uint8Array(5 * 4 * 3);
    data[0] = 2;
    data[7] = 1;
    data[59] = 2;
    const box = { min: [0, 0, 0] as Vec3, max: [4, 3, 2] as Vec3 };
    const bytes = encodeNifti(dims, data, { spacing: [0.9, 0.9, 2], descrip: boxDescrip(box) });
    const decoded = decodeNifti(bytes);
    expect(decoded.dims).toEqual(dims);
    expect(Array.from(decoded.data)).toEqual(Array.from(data));
    expect(decoded.spacing[2]).toBeCloseTo(2);
    expect(parseBoxDescrip(decoded.descrip)).toEqual(box);
  });

  it('rejects wrong data length', () => {
    expect(() => encodeNifti([2, 2, 2], new Uint8Array(7))).toThrow(/length/);
  });

  it('rejects non-nifti bytes', () => {
    expect(() => decodeNifti(new Uint8Array(400))).toThrow(/NIfTI/);
  });

  it('parses box descrip strictly', () => {
    expect(parseBoxDescrip('box=1,2,3:4,5,6')).toEqual({ min: [1, 2, 3], max: [4, 5, 6] });
    expect(parseBoxDescrip('')).toBeNull();
    expect(parseBoxDescrip('box=1,2:3,4')).toBeNull();
    expect(parseBoxDescrip('box=a,b,c:d,e,f')).toBeNull();
  });

  it('gunzips gzipped payloads and passes plain ones through', async () => {
    const dims: Vec3 = [3, 3, 3];
    const data = new Uint8Array(27).fill(1);
    const plain = encodeNifti(dims, data);
    const zipped = new Uint8Array(gzipSync(plain));
    const fromZip = decodeNifti(await maybeGunzip(zipped));
    const fromPlain = decodeNifti(await maybeGunzip(plain));
    expect(Array.from(fromZip.data)).toEqual(Array.from(fromPlain.data));
  });
});
