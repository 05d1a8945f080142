import { BrushKind, MEDIASTINAL, Vec3, ViewerState, WindowPreset } from './types.js';

export function createViewerState(volumeId: string, dims: Vec3): ViewerState {
  return {
    volumeId,
    dims,
    axialIndex: Math.floor(dims[2] / 2),
    sagittalIndex: Math.floor(dims[0] / 2),
    window: MEDIASTINAL,
    axialView: { zoom: 1, panX: 0, panY: 0 },
    sagittalView: { zoom: 1, panX: 0, panY: 0 },
    visible: { image: true, segmentation: true, annotation: true, outline: false },
    brush: 'fg',
    brushRadius: 3,
    box: null,
    sagittalPainting: false,
  };
}

function clamp(value: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, value));
}

export function setAxialIndex(state: ViewerState, index: number): ViewerState {
  return { ...state, axialIndex: clamp(Math.round(index), 0, state.dims[2] - 1) };
}

export function setSagittalIndex(state: ViewerState, index: number): ViewerState {
  return { ...state, sagittalIndex: clamp(Math.round(index), 0, state.dims[0] - 1) };
}

export function setBrush(state: ViewerState, brush: BrushKind): ViewerState {
  return { ...state, brush };
}

export function setBrushRadius(state: ViewerState, radius: number): ViewerState {
  return { ...state, brushRadius: clamp(Math.round(radius), 1, 40) };
}

export function setWindow(state: ViewerState, preset: WindowPreset): ViewerState {
  if (!(preset.lower < preset.upper)) throw new Error('window lower must be < upper');
  return { ...state, window: preset };
}

export function toggleLayer(state: ViewerState, layer: keyof ViewerState['visible']): ViewerState {
  return { ...state, visible: { ...state.visible, [layer]: !state.visible[layer] } };
}

export function setZoom(state: ViewerState, view: 'axial' | 'sagittal', zoom: number): ViewerState {
  const key = view === 'axial' ? 'axialView' : 'sagittalView';
  return { ...state, [key]: { ...state[key], zoom: clamp(zoom, 0.25, 16) } };
}

/** Draft a bounding box from two opposite corners, normalized and clamped. */
export function setBox(state: ViewerState, cornerA: Vec3, cornerB: Vec3): ViewerState {
  const min: Vec3 = [0, 0, 0];
  const max: Vec3 = [0, 0, 0];
  for (let axis = 0; axis < 3; axis++) {
    const lo = Math.min(cornerA[axis], cornerB[axis]);
    const hi = Math.max(cornerA[axis], cornerB[axis]);
    min[axis] = clamp(Math.round(lo), 0, state.dims[axis] - 1);
    max[axis] = clamp(Math.round(hi), 0, state.dims[axis] - 1);
  }
  return { ...state, box: { min, max } };
}
