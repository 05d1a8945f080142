/**
 * Client-side annotation layers: a full-extent label grid painted with
 * circular brushes, plus corrected-contour derivation for the outline view.
 */

import {
  BoundingBox,
  BrushKind,
  LABEL_BACKGROUND,
  LABEL_FOREGROUND,
  LABEL_UNANNOTATED,
  Vec3,
  ViewKind,
  boxContains,
  boxShape,
  flatIndex,
} from './types.js';

export class AnnotationLayers {
  readonly dims: Vec3;
  readonly labels: Uint8Array;

  constructor(dims: Vec3) {
    this.dims = dims;
    this.labels = new Uint8Array(dims[0] * dims[1] * dims[2]);
  }

  labelAt(x: number, y: number, z: number): number {
    return this.labels[flatIndex(this.dims, x, y, z)];
  }

  /**
   * Paint a brush disc on one slice. A voxel holds a single label, so fg
   * over bg (and vice versa) reassigns; erase clears. Strokes outside the
   * bounding box change nothing. Returns the number of changed voxels.
   */
  paintDisc(
    view: ViewKind,
    sliceIndex: number,
    centerA: number,
    centerB: number,
    radius: number,
    brush: BrushKind,
    box: BoundingBox | null,
  ): number {
    if (box === null) return 0;
    const value =
      brush === 'fg' ? LABEL_FOREGROUND : brush === 'bg' ? LABEL_BACKGROUND : LABEL_UNANNOTATED;
    const r2 = radius * radius;
    let changed = 0;
    for (let db = -radius; db <= radius; db++) {
      for (let da = -radius; da <= radius; da++) {
        if (da * da + db * db > r2) continue;
        const a = centerA + da;
        const b = centerB + db;
        let x: number, y: number, z: number;
        if (view === 'axial') {
          [x, y, z] = [a, b, sliceIndex];
        } else {
          [x, y, z] = [sliceIndex, a, b];
        }
        if (x < 0 || y < 0 || z < 0 || x >= this.dims[0] || y >= this.dims[1] || z >= this.dims[2]) {
          continue;
        }
        if (!boxContains(box, x, y, z)) continue;
        const idx = flatIndex(this.dims, x, y, z);
        if (this.labels[idx] !== value) {
          this.labels[idx] = value;
          changed++;
        }
      }
    }
    return changed;
  }

  voxelsWithLabel(label: number): Vec3[] {
    const out: Vec3[] = [];
    const [nx, ny, nz] = this.dims;
    for (let z = 0; z < nz; z++) {
      for (let y = 0; y < ny; y++) {
        for (let x = 0; x < nx; x++) {
          if (this.labels[flatIndex(this.dims, x, y, z)] === label) out.push([x, y, z]);
        }
      }
    }
    return out;
  }

  clear(): void {
    this.labels.fill(0);
  }

  isEmpty(): boolean {
    return this.labels.every((v) => v === 0);
  }
}

/**
 * Corrected contour over the box extents: (segmentation ∪ fg) \ bg.
 * segMask is box-scoped (x-fastest); labels cover the full volume.
 */
export function mergeCorrected(
  segMask: Uint8Array,
  layers: AnnotationLayers,
  box: BoundingBox,
): Uint8Array {
  const shape = boxShape(box);
  const count = shape[0] * shape[1] * shape[2];
  if (segMask.length !== count) {
    throw new Error(`segmentation mask length ${segMask.length} does not match box ${shape}`);
  }
  const out = new Uint8Array(count);
  for (let z = 0; z < shape[2]; z++) {
    for (let y = 0; y < shape[1]; y++) {
      for (let x = 0; x < shape[0]; x++) {
        // box-scoped masks are x-fastest too
        const idx = x + shape[0] * (y + shape[1] * z);
        const label = layers.labelAt(box.min[0] + x, box.min[1] + y, box.min[2] + z);
        let value = segMask[idx] !== 0;
        if (label === LABEL_FOREGROUND) value = true;
        else if (label === LABEL_BACKGROUND) value = false;
        out[idx] = value ? 1 : 0;
      }
    }
  }
  return out;
}

/** Border voxels of a box-scoped mask on one axial slice (outline view). */
export function outlineOnSlice(mask: Uint8Array, shape: Vec3, z: number): Array<[number, number]> {
  const at = (x: number, y: number, zz: number): number => {
    if (x < 0 || y < 0 || zz < 0 || x >= shape[0] || y >= shape[1] || zz >= shape[2]) return 0;
    return mask[x + shape[0] * (y + shape[1] * zz)];
  };
  const edges: Array<[number, number]> = [];
  for (let y = 0; y < shape[1]; y++) {
    for (let x = 0; x < shape[0]; x++) {
      if (!at(x, y, z)) continue;
      if (!at(x - 1, y, z) || !at(x + 1, y, z) || !at(x, y - 1, z) || !at(x, y + 1, z)) {
        edges.push([x, y]);
      }
    }
  }
  return edges;
}
