export type Vec3 = [number, number, number];

export interface BoundingBox {
  min: Vec3;
  max: Vec3; // inclusive
}

export type BrushKind = 'fg' | 'bg' | 'erase';
export type ViewKind = 'axial' | 'sagittal';

export interface WindowPreset {
  name: string;
  lower: number;
  upper: number;
}

export const MEDIASTINAL: WindowPreset = { name: 'mediastinal', lower: -125, upper: 250 };

export interface VisibilityToggles {
  image: boolean;
  segmentation: boolean;
  annotation: boolean;
  outline: boolean;
}

export interface ViewTransform {
  zoom: number;
  panX: number;
  panY: number;
}

export interface ViewerState {
  volumeId: string;
  dims: Vec3;
  axialIndex: number;
  sagittalIndex: number;
  window: WindowPreset;
  axialView: ViewTransform;
  sagittalView: ViewTransform;
  visible: VisibilityToggles;
  brush: BrushKind;
  brushRadius: number;
  box: BoundingBox | null;
  /** annotation painting restricted to the axial view unless enabled */
  sagittalPainting: boolean;
}

export const LABEL_UNANNOTATED = 0;
export const LABEL_BACKGROUND = 1;
export const LABEL_FOREGROUND = 2;

export function boxShape(box: BoundingBox): Vec3 {
  return [
    box.max[0] - box.min[0] + 1,
    box.max[1] - box.min[1] + 1,
    box.max[2] - box.min[2] + 1,
  ];
}

export function boxContains(box: BoundingBox, x: number, y: number, z: number): boolean {
  return (
    x >= box.min[0] && x <= box.max[0] &&
    y >= box.min[1] && y <= box.max[1] &&
    z >= box.min[2] && z <= box.max[2]
  );
}

/** Flat index into an (x, y, z) volume stored x-fastest (NIfTI order). */
export function flatIndex(dims: Vec3, x: number, y: number, z: number): number {
  return x + dims[0] * (y + dims[1] * z);
}
