/**
 * Pure compositing for the two slice viewers. Produces RGBA buffers the DOM
 * layer blits into canvases, so everything here is testable without one.
 *
 * Layer colors: segmentation blue, foreground corrections red, background
 * corrections green, corrected outline yellow; everything outside the
 * bounding box is dimmed toward light red.
 */

import { outlineOnSlice } from './annotation.js';
import {
  BoundingBox,
  LABEL_BACKGROUND,
  LABEL_FOREGROUND,
  Vec3,
  ViewerState,
  boxContains,
  boxShape,
} from './types.js';

export const SEGMENTATION_TINT: [number, number, number] = [60, 110, 230];
export const FG_TINT: [number, number, number] = [230, 50, 40];
export const BG_TINT: [number, number, number] = [50, 200, 70];
export const OUTLINE_TINT: [number, number, number] = [240, 220, 60];
export const OUTSIDE_BOX_TINT: [number, number, number] = [255, 210, 210];

export interface SliceInputs {
  /** raw HU plane, a-fastest, length widthA * widthB */
  plane: Float32Array;
  widthA: number;
  widthB: number;
  /** box-scoped segmentation mask (or null before the model is ready) */
  segMask: Uint8Array | null;
  /** box-scoped corrected mask for the outline layer (or null) */
  correctedMask: Uint8Array | null;
  /** full-extent labels */
  labels: Uint8Array | null;
}

export function windowToGray(value: number, lower: number, upper: number): number {
  const t = (value - lower) / (upper - lower);
  return Math.round(255 * Math.min(1, Math.max(0, t)));
}

function blend(
  rgba: Uint8ClampedArray,
  offset: number,
  tint: [number, number, number],
  alpha: number,
): void {
  rgba[offset] = Math.round(rgba[offset] * (1 - alpha) + tint[0] * alpha);
  rgba[offset + 1] = Math.round(rgba[offset + 1] * (1 - alpha) + tint[1] * alpha);
  rgba[offset + 2] = Math.round(rgba[offset + 2] * (1 - alpha) + tint[2] * alpha);
}

/**
 * Composite one slice into an RGBA buffer (widthA x widthB, a-fastest rows).
 * `view` fixes which volume axes (a, b) map to: axial -> (x, y) at z=index,
 * sagittal -> (y, z) at x=index.
 */
export function compositeSlice(
  state: ViewerState,
  view: 'axial' | 'sagittal',
  inputs: SliceInputs,
): Uint8ClampedArray {
  const { plane, widthA, widthB, segMask, correctedMask, labels } = inputs;
  const sliceIndex = view === 'axial' ? state.axialIndex : state.sagittalIndex;
  const rgba = new Uint8ClampedArray(widthA * widthB * 4);
  const box = state.box;
  const shape = box ? boxShape(box) : null;

  for (let b = 0; b < widthB; b++) {
    for (let a = 0; a < widthA; a++) {
      const i = a + widthA * b;
      const offset = i * 4;
      const gray = state.visible.image
        ? windowToGray(plane[i], state.window.lower, state.window.upper)
        : 0;
      rgba[offset] = rgba[offset + 1] = rgba[offset + 2] = gray;
      rgba[offset + 3] = 255;

      const [x, y, z] = view === 'axial' ? [a, b, sliceIndex] : [sliceIndex, a, b];
      const inBox = box !== null && boxContains(box, x, y, z);

      if (box !== null && !inBox) {
        blend(rgba, offset, OUTSIDE_BOX_TINT, 0.45);
        continue;
      }
      if (box !== null && shape !== null && inBox) {
        const local =
          x - box.min[0] + shape[0] * (y - box.min[1] + shape[1] * (z - box.min[2]));
        if (state.visible.segmentation && segMask !== null && segMask[local]) {
          blend(rgba, offset, SEGMENTATION_TINT, 0.5);
        }
      }
      if (state.visible.annotation && labels !== null) {
        const label = labels[x + state.dims[0] * (y + state.dims[1] * z)];
        if (label === LABEL_FOREGROUND) blend(rgba, offset, FG_TINT, 0.6);
        else if (label === LABEL_BACKGROUND) blend(rgba, offset, BG_TINT, 0.6);
      }
    }
  }

  if (state.visible.outline && correctedMask !== null && box !== null && shape !== null && view === 'axial') {
    const z = state.axialIndex - box.min[2];
    if (z >= 0 && z < shape[2]) {
      for (const [lx, ly] of outlineOnSlice(correctedMask, shape, z)) {
        const a = lx + box.min[0];
        const b = ly + box.min[1];
        if (a < 0 || b < 0 || a >= widthA || b >= widthB) continue;
        blend(rgba, (a + widthA * b) * 4, OUTLINE_TINT, 0.9);
      }
    }
  }
  return rgba;
}

/**
 * Dash segments marking the axial slice position on the sagittal view.
 * The sagittal plane is (y, z); the axial slice is the horizontal line
 * z = axialIndex. Returns [aStart, aEnd] pairs in plane coordinates.
 */
export function axialIndicatorDashes(
  state: ViewerState,
  widthA: number,
  dashLength = 6,
  gapLength = 4,
): Array<{ a0: number; a1: number; b: number }> {
  const b = state.axialIndex;
  const dashes: Array<{ a0: number; a1: number; b: number }> = [];
  for (let a = 0; a < widthA; a += dashLength + gapLength) {
    dashes.push({ a0: a, a1: Math.min(a + dashLength, widthA), b });
  }
  return dashes;
}

export function sliceDims(view: 'axial' | 'sagittal', dims: Vec3): [number, number] {
  return view === 'axial' ? [dims[0], dims[1]] : [dims[1], dims[2]];
}

export function clampBoxToDims(box: BoundingBox, dims: Vec3): BoundingBox {
  const min: Vec3 = [...box.min];
  const max: Vec3 = [...box.max];
  for (let axis = 0; axis < 3; axis++) {
    min[axis] = Math.max(0, Math.min(min[axis], dims[axis] - 1));
    max[axis] = Math.max(min[axis], Math.min(max[axis], dims[axis] - 1));
  }
  return { min, max };
}
