/**
 * Interaction event recorder: every open/save/slice/zoom/mouse change posts
 * an event with a client timestamp. Failed posts stay buffered and replay
 * in order on the next flush, so an offline burst is never lost.
 */

export type EventKind =
  | 'open_file'
  | 'save'
  | 'axial_slice_change'
  | 'sagittal_slice_change'
  | 'zoom_change'
  | 'mouse_down'
  | 'mouse_release';

export interface InteractionEvent {
  timestamp: number;
  kind: EventKind;
  volume_id: string;
}

export interface EventTransport {
  postEvents(session: string, events: InteractionEvent[]): Promise<void>;
}

export class EventRecorder {
  private buffer: InteractionEvent[] = [];
  private lastTimestamp = -Infinity;
  private flushing = false;

  constructor(
    private readonly transport: EventTransport,
    private readonly session: string,
    private readonly clock: () => number = () => Date.now() / 1000,
  ) {}

  get pending(): number {
    return this.buffer.length;
  }

  record(kind: EventKind, volumeId: string): InteractionEvent {
    // monotone timestamps even if the wall clock steps backwards
    const timestamp = Math.max(this.clock(), this.lastTimestamp);
    this.lastTimestamp = timestamp;
    const event: InteractionEvent = { timestamp, kind, volume_id: volumeId };
    this.buffer.push(event);
    return event;
  }

  /** Send everything buffered; on failure the batch stays for the next try. */
  async flush(): Promise<boolean> {
    if (this.flushing || this.buffer.length === 0) return this.buffer.length === 0;
    this.flushing = true;
    const batch = this.buffer.slice();
    try {
      await this.transport.postEvents(this.session, batch);
      this.buffer.splice(0, batch.length);
      return true;
    } catch {
      return false;
    } finally {
      this.flushing = false;
    }
  }
}
