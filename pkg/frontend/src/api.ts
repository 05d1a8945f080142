/** HTTP client for the training server's JSON + NIfTI API. */

import { decodeNifti, encodeNifti, maybeGunzip, boxDescrip } from './nifti.js';
import type { InteractionEvent } from './events.js';
import type { BoundingBox, Vec3 } from './types.js';

export interface ServerStatus {
  running: boolean;
  epoch_index: number;
  epochs_without_progress: number;
  best_val_dice: number | null;
  train_size: number;
  val_size: number;
  volumes: number;
}

export interface VolumeMeta {
  id: string;
  shape: Vec3;
  spacing: Vec3;
}

export interface SegmentationResult {
  box: BoundingBox;
  mask: Uint8Array; // box-scoped, x-fastest
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, '')}${path}`;
  }

  async status(): Promise<ServerStatus> {
    const r = await this.fetchFn(this.url('/status'));
    if (!r.ok) throw new Error(`status failed: ${r.status}`);
    return (await r.json()) as ServerStatus;
  }

  async volumes(): Promise<string[]> {
    const r = await this.fetchFn(this.url('/volumes'));
    if (!r.ok) throw new Error(`volumes failed: ${r.status}`);
    return ((await r.json()) as { volumes: string[] }).volumes;
  }

  async volumeMeta(id: string): Promise<VolumeMeta> {
    const r = await this.fetchFn(this.url(`/volumes/${id}/meta`));
    if (!r.ok) throw new Error(`meta failed: ${r.status}`);
    return (await r.json()) as VolumeMeta;
  }

  sliceTileUrl(id: string, view: string, index: number, lower: number, upper: number): string {
    return this.url(
      `/volumes/${id}/slice?view=${view}&index=${index}&lower=${lower}&upper=${upper}`,
    );
  }

  /** Raw HU plane for client-side windowing; returns a-fastest Float32s. */
  async sliceRaw(id: string, view: string, index: number): Promise<{ plane: Float32Array; widthA: number; widthB: number }> {
    const r = await this.fetchFn(this.url(`/volumes/${id}/slice_raw?view=${view}&index=${index}`));
    if (!r.ok) throw new Error(`slice_raw failed: ${r.status}`);
    const shape = (r.headers.get('X-Plane-Shape') ?? '').split(',').map(Number);
    const bytes = new Uint8Array(await r.arrayBuffer());
    const plane = new Float32Array(bytes.buffer, bytes.byteOffset, bytes.byteLength / 4);
    return { plane, widthA: shape[0], widthB: shape[1] };
  }

  /** Box-scoped segmentation; null while the model has no checkpoint. */
  async segment(id: string, box: BoundingBox): Promise<SegmentationResult | null> {
    const r = await this.fetchFn(this.url('/segment'), {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ volume_id: id, box_min: box.min, box_max: box.max }),
    });
    if (r.status === 503) return null;
    if (!r.ok) throw new Error(`segment failed: ${r.status}`);
    const raw = new Uint8Array(await r.arrayBuffer());
    const volume = decodeNifti(await maybeGunzip(raw));
    return { box, mask: new Uint8Array(volume.data) };
  }

  /** Post the annotation label grid; returns the split the server chose. */
  async annotate(
    id: string,
    dims: Vec3,
    labels: Uint8Array,
    box: BoundingBox,
    spacing?: Vec3,
  ): Promise<{ split: string }> {
    const payload = encodeNifti(dims, labels, { spacing, descrip: boxDescrip(box) });
    const r = await this.fetchFn(this.url(`/annotate?volume_id=${encodeURIComponent(id)}`), {
      method: 'POST',
      headers: { 'Content-Type': 'application/octet-stream' },
      body: payload as unknown as BodyInit,
    });
    if (!r.ok) {
      const detail = await r.text();
      throw new Error(`annotate rejected (${r.status}): ${detail}`);
    }
    return (await r.json()) as { split: string };
  }

  async postEvents(session: string, events: InteractionEvent[]): Promise<void> {
    const r = await this.fetchFn(this.url('/events'), {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ session, events }),
    });
    if (!r.ok) throw new Error(`events failed: ${r.status}`);
  }
}
