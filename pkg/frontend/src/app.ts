/**
 * DOM wiring: two synchronized slice viewers (axial right, sagittal left),
 * corrective brushes, bounding-box drafting and the save-and-next flow.
 *
 * Keyboard shortcuts: f foreground brush, b background brush, e erase,
 * [ / ] brush size, i/s/a/o toggle image/segmentation/annotation/outline,
 * arrow up/down axial slice, page up/down sagittal slice, ctrl+s save+next.
 */

import { AnnotationLayers, mergeCorrected } from './annotation.js';
import { ApiClient, SegmentationResult } from './api.js';
import { EventRecorder } from './events.js';
import {
  axialIndicatorDashes,
  compositeSlice,
  sliceDims,
} from './render.js';
import {
  createViewerState,
  setAxialIndex,
  setBox,
  setBrush,
  setBrushRadius,
  setSagittalIndex,
  setZoom,
  toggleLayer,
} from './state.js';
import { Vec3, ViewerState } from './types.js';

interface PlaneCache {
  [key: string]: { plane: Float32Array; widthA: number; widthB: number };
}

export class App {
  private state!: ViewerState;
  private layers!: AnnotationLayers;
  private seg: SegmentationResult | null = null;
  private worklist: string[] = [];
  private cursor = 0;
  private planes: PlaneCache = {};
  private drafting: { start: Vec3 } | null = null;
  private painting = false;

  private readonly axialCanvas: HTMLCanvasElement;
  private readonly sagittalCanvas: HTMLCanvasElement;
  private readonly statusLine: HTMLElement;
  private readonly recorder: EventRecorder;

  constructor(
    private readonly api: ApiClient,
    root: Document = document,
  ) {
    this.axialCanvas = root.getElementById('axial') as HTMLCanvasElement;
    this.sagittalCanvas = root.getElementById('sagittal') as HTMLCanvasElement;
    this.statusLine = root.getElementById('status-line') as HTMLElement;
    this.recorder = new EventRecorder(api, `ui-${Date.now()}`);
    setInterval(() => void this.recorder.flush(), 2000);
    setInterval(() => void this.refreshStatus(), 3000);
  }

  async start(): Promise<void> {
    this.worklist = await this.api.volumes();
    if (this.worklist.length === 0) {
      this.statusLine.textContent = 'no volumes on the server';
      return;
    }
    await this.openVolume(this.worklist[this.cursor]);
    this.bindInputs();
  }

  private async openVolume(id: string): Promise<void> {
    const meta = await this.api.volumeMeta(id);
    this.state = createViewerState(id, meta.shape);
    this.layers = new AnnotationLayers(meta.shape);
    this.seg = null;
    this.planes = {};
    this.recorder.record('open_file', id);
    await this.redraw();
  }

  private async plane(view: 'axial' | 'sagittal', index: number) {
    const key = `${this.state.volumeId}:${view}:${index}`;
    if (!(key in this.planes)) {
      this.planes[key] = await this.api.sliceRaw(this.state.volumeId, view, index);
    }
    return this.planes[key];
  }

  private async redraw(): Promise<void> {
    await Promise.all([this.drawView('axial'), this.drawView('sagittal')]);
  }

  private async drawView(view: 'axial' | 'sagittal'): Promise<void> {
    const canvas = view === 'axial' ? this.axialCanvas : this.sagittalCanvas;
    const index = view === 'axial' ? this.state.axialIndex : this.state.sagittalIndex;
    const { plane, widthA, widthB } = await this.plane(view, index);
    const corrected =
      this.seg && this.state.box
        ? mergeCorrected(this.seg.mask, this.layers, this.state.box)
        : null;
    const rgba = compositeSlice(this.state, view, {
      plane,
      widthA,
      widthB,
      segMask: this.seg?.mask ?? null,
      correctedMask: corrected,
      labels: this.layers.labels,
    });
    canvas.width = widthA;
    canvas.height = widthB;
    const ctx = canvas.getContext('2d')!;
    const pixels = new Uint8ClampedArray(new ArrayBuffer(rgba.length));
    pixels.set(rgba);
    ctx.putImageData(new ImageData(pixels, widthA, widthB), 0, 0);
    if (view === 'sagittal') {
      ctx.strokeStyle = 'rgba(230, 40, 40, 0.9)';
      ctx.lineWidth = 1;
      for (const dash of axialIndicatorDashes(this.state, widthA)) {
        ctx.beginPath();
        ctx.moveTo(dash.a0, dash.b + 0.5);
        ctx.lineTo(dash.a1, dash.b + 0.5);
        ctx.stroke();
      }
    }
  }

  private canvasToVoxel(view: 'axial' | 'sagittal', ev: MouseEvent): Vec3 {
    const canvas = view === 'axial' ? this.axialCanvas : this.sagittalCanvas;
    const rect = canvas.getBoundingClientRect();
    const a = Math.floor(((ev.clientX - rect.left) / rect.width) * canvas.width);
    const b = Math.floor(((ev.clientY - rect.top) / rect.height) * canvas.height);
    return view === 'axial'
      ? [a, b, this.state.axialIndex]
      : [this.state.sagittalIndex, a, b];
  }

  private bindInputs(): void {
    this.axialCanvas.addEventListener('mousedown', (ev) => this.onMouseDown('axial', ev));
    this.axialCanvas.addEventListener('mousemove', (ev) => this.onMouseMove('axial', ev));
    window.addEventListener('mouseup', (ev) => this.onMouseUp(ev));
    this.sagittalCanvas.addEventListener('mousedown', (ev) => this.onMouseDown('sagittal', ev));
    this.sagittalCanvas.addEventListener('mousemove', (ev) => this.onMouseMove('sagittal', ev));
    this.axialCanvas.addEventListener('wheel', (ev) => {
      ev.preventDefault();
      this.state = setAxialIndex(this.state, this.state.axialIndex + Math.sign(ev.deltaY));
      this.recorder.record('axial_slice_change', this.state.volumeId);
      void this.redraw();
    });
    this.sagittalCanvas.addEventListener('wheel', (ev) => {
      ev.preventDefault();
      this.state = setSagittalIndex(this.state, this.state.sagittalIndex + Math.sign(ev.deltaY));
      this.recorder.record('sagittal_slice_change', this.state.volumeId);
      void this.redraw();
    });
    window.addEventListener('keydown', (ev) => void this.onKey(ev));
  }

  private onMouseDown(view: 'axial' | 'sagittal', ev: MouseEvent): void {
    this.recorder.record('mouse_down', this.state.volumeId);
    const voxel = this.canvasToVoxel(view, ev);
    if (ev.shiftKey) {
      this.drafting = { start: voxel };
      return;
    }
    if (view === 'sagittal' && !this.state.sagittalPainting) return;
    this.painting = true;
    this.paintAt(view, voxel);
  }

  private onMouseMove(view: 'axial' | 'sagittal', ev: MouseEvent): void {
    if (this.drafting) {
      this.state = setBox(this.state, this.drafting.start, this.canvasToVoxel(view, ev));
      void this.redraw();
      return;
    }
    if (!this.painting) return;
    if (view === 'sagittal' && !this.state.sagittalPainting) return;
    this.paintAt(view, this.canvasToVoxel(view, ev));
  }

  private onMouseUp(_ev: MouseEvent): void {
    this.recorder.record('mouse_release', this.state.volumeId);
    if (this.drafting) {
      this.drafting = null;
      void this.requestSegmentation();
    }
    this.painting = false;
  }

  private paintAt(view: 'axial' | 'sagittal', voxel: Vec3): void {
    const [a, b, index] =
      view === 'axial' ? [voxel[0], voxel[1], voxel[2]] : [voxel[1], voxel[2], voxel[0]];
    const changed = this.layers.paintDisc(
      view,
      index,
      a,
      b,
      this.state.brushRadius,
      this.state.brush,
      this.state.box,
    );
    if (changed > 0) void this.redraw();
  }

  private async requestSegmentation(): Promise<void> {
    if (!this.state.box) return;
    this.seg = await this.api.segment(this.state.volumeId, this.state.box);
    this.statusLine.textContent = this.seg === null ? 'model not ready yet' : 'segmentation loaded';
    await this.redraw();
  }

  async saveAndNext(): Promise<void> {
    if (!this.state.box) {
      this.statusLine.textContent = 'define a bounding box first (shift+drag)';
      return;
    }
    this.recorder.record('save', this.state.volumeId);
    try {
      const reply = await this.api.annotate(
        this.state.volumeId,
        this.state.dims,
        this.layers.labels,
        this.state.box,
      );
      this.statusLine.textContent = `saved to ${reply.split} split`;
    } catch (err) {
      // rejected submissions keep the local annotation for correction
      this.statusLine.textContent = String(err);
      return;
    }
    await this.recorder.flush();
    this.cursor += 1;
    if (this.cursor >= this.worklist.length) {
      this.statusLine.textContent = 'worklist complete';
      return;
    }
    await this.openVolume(this.worklist[this.cursor]);
  }

  private async refreshStatus(): Promise<void> {
    try {
      const s = await this.api.status();
      const dice = s.best_val_dice === null ? '-' : s.best_val_dice.toFixed(3);
      this.statusLine.textContent =
        `epoch ${s.epoch_index} | stale ${s.epochs_without_progress} | best dice ${dice}` +
        ` | train/val ${s.train_size}/${s.val_size}${s.running ? ' | training' : ''}`;
    } catch {
      /* server briefly unreachable; keep the last status */
    }
  }

  private async onKey(ev: KeyboardEvent): Promise<void> {
    if (ev.ctrlKey && ev.key === 's') {
      ev.preventDefault();
      await this.saveAndNext();
      return;
    }
    switch (ev.key) {
      case 'f': this.state = setBrush(this.state, 'fg'); break;
      case 'b': this.state = setBrush(this.state, 'bg'); break;
      case 'e': this.state = setBrush(this.state, 'erase'); break;
      case '[': this.state = setBrushRadius(this.state, this.state.brushRadius - 1); break;
      case ']': this.state = setBrushRadius(this.state, this.state.brushRadius + 1); break;
      case 'i': this.state = toggleLayer(this.state, 'image'); break;
      case 's': this.state = toggleLayer(this.state, 'segmentation'); break;
      case 'a': this.state = toggleLayer(this.state, 'annotation'); break;
      case 'o': this.state = toggleLayer(this.state, 'outline'); break;
      case 'ArrowUp':
        this.state = setAxialIndex(this.state, this.state.axialIndex + 1);
        this.recorder.record('axial_slice_change', this.state.volumeId);
        break;
      case 'ArrowDown':
        this.state = setAxialIndex(this.state, this.state.axialIndex - 1);
        this.recorder.record('axial_slice_change', this.state.volumeId);
        break;
      case 'PageUp':
        this.state = setSagittalIndex(this.state, this.state.sagittalIndex + 1);
        this.recorder.record('sagittal_slice_change', this.state.volumeId);
        break;
      case 'PageDown':
        this.state = setSagittalIndex(this.state, this.state.sagittalIndex - 1);
        this.recorder.record('sagittal_slice_change', this.state.volumeId);
        break;
      case '+':
      case '=':
        this.state = setZoom(this.state, 'axial', this.state.axialView.zoom * 1.25);
        this.recorder.record('zoom_change', this.state.volumeId);
        break;
      case '-':
        this.state = setZoom(this.state, 'axial', this.state.axialView.zoom / 1.25);
        this.recorder.record('zoom_change', this.state.volumeId);
        break;
      default:
        return;
    }
    await this.redraw();
  }
}

export function bootstrap(): void {
  const base = (window as unknown as { CORRSEG_SERVER?: string }).CORRSEG_SERVER ?? '';
  const app = new App(new ApiClient(base || window.location.origin));
  const saveButton = document.getElementById('save-next');
  saveButton?.addEventListener('click', () => void app.saveAndNext());
  void app.start();
}

if (typeof document !== 'undefined' && document.getElementById('axial')) {
  bootstrap();
}
