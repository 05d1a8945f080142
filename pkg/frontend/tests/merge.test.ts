import { describe, expect, it } from 'vitest';

import { AnnotationLayers, mergeCorrected, outlineOnSlice } from '../src/annotation.js';
import { boxShape, flatIndex, Vec3 } from '../src/types.js';

const DIMS: Vec3 = [12, 12, 6];
const BOX = { min: [1, 1, 0] as Vec3, max: [10, 10, 5] as Vec3 };

function boxIndex(x: number, y: number, z: number): number {
  const shape = boxShape(BOX);
  return x + shape[0] * (y + shape[1] * z);
}

describe('corrected contour', () => {
  it('equals (segmentation ∪ fg) minus bg', () => {
    const shape = boxShape(BOX);
    const seg = new Uint8Array(shape[0] * shape[1] * shape[2]);
    seg[boxIndex(3, 3, 2)] = 1;
    seg[boxIndex(4, 3, 2)] = 1;

    const layers = new AnnotationLayers(DIMS);
    layers.paintDisc('axial', 2, 7, 7, 0, 'fg', BOX); // adds voxel (7,7,2)
    layers.paintDisc('axial', 2, 4, 4, 0, 'bg', BOX); // removes seg voxel (4,4,2) -> local (3,3,2)

    const corrected = mergeCorrected(seg, layers, BOX);
    expect(corrected[boxIndex(3, 3, 2)]).toBe(0); // bg correction wins
    expect(corrected[boxIndex(4, 3, 2)]).toBe(1); // untouched segmentation voxel
    expect(corrected[boxIndex(6, 6, 2)]).toBe(1); // fg at volume (7,7,2) -> local (6,6,2)
  });

  it('matches a per-voxel reference on a random fixture', () => {
    const shape = boxShape(BOX);
    const count = shape[0] * shape[1] * shape[2];
    const seg = new Uint8Array(count);
    const layers = new AnnotationLayers(DIMS);
    let state = 12345;
    const rand = () => ((state = (state * 1103515245 + 12345) & 0x7fffffff) / 0x7fffffff);
    for (let i = 0; i < count; i++) seg[i] = rand() > 0.5 ? 1 : 0;
    for (let n = 0; n < 60; n++) {
      const x = BOX.min[0] + Math.floor(rand() * shape[0]);
      const y = BOX.min[1] + Math.floor(rand() * shape[1]);
      const z = BOX.min[2] + Math.floor(rand() * shape[2]);
      const brush = rand() > 0.5 ? 'fg' : 'bg';
      layers.paintDisc('axial', z, x, y, 0, brush, BOX);
    }
    const corrected = mergeCorrected(seg, layers, BOX);
    for (let z = 0; z < shape[2]; z++) {
      for (let y = 0; y < shape[1]; y++) {
        for (let x = 0; x < shape[0]; x++) {
          const label = layers.labels[
            flatIndex(DIMS, x + BOX.min[0], y + BOX.min[1], z + BOX.min[2])
          ];
          const expected = label === 2 ? 1 : label === 1 ? 0 : seg[boxIndex(x, y, z)];
          expect(corrected[boxIndex(x, y, z)]).toBe(expected);
        }
      }
    }
  });

  it('outline marks exactly the border voxels of the corrected mask', () => {
    const shape: Vec3 = [6, 6, 1];
    const mask = new Uint8Array(36);
    for (let y = 1; y <= 4; y++) for (let x = 1; x <= 4; x++) mask[x + 6 * y] = 1;
    const edges = outlineOnSlice(mask, shape, 0);
    // the interior 2x2 voxels are not edges; the 12 ring voxels are
    expect(edges.length).toBe(12);
    expect(edges).not.toContainEqual([2, 2]);
    expect(edges).toContainEqual([1, 1]);
    expect(edges).toContainEqual([4, 4]);
  });

  it('rejects a mask that does not match the box', () => {
    const layers = new AnnotationLayers(DIMS);
    expect(() => mergeCorrected(new Uint8Array(5), layers, BOX)).toThrow(/match/);
  });
});
