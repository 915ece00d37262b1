import { ApiClient, Transport } from "./client.js";
import { ControlPanel } from "./controls.js";
import { GanttAccumulator } from "./gantt.js";
import { TaskListView } from "./taskList.js";
import { Frame } from "./types.js";

/**
 * Wires the frame stream into the three views. Snapshot frames replace view
 * state (that is how a reconnect resumes); incremental frames append. One
 * socket per session; reconnects are scheduled with a fixed backoff.
 */
export class ConsoleApp {
  readonly api: ApiClient;
  readonly taskList: TaskListView;
  readonly controls: ControlPanel;
  readonly gantt = new GanttAccumulator();
  frames = 0;
  connected = false;
  private unsubscribe: (() => void) | null = null;
  private closedByUser = false;

  constructor(transport: Transport, sessionId: string,
              private reconnectDelayMs = 500,
              private schedule: (fn: () => void, ms: number) => void =
              (fn, ms) => setTimeout(fn, ms)) {
    this.api = new ApiClient(transport, sessionId);
    this.taskList = new TaskListView(this.api);
    this.controls = new ControlPanel(this.api);
  }

  connect(): void {
    this.closedByUser = false;
    this.unsubscribe = this.api.stream(
      (frame) => this.onFrame(frame),
      () => this.onClose(),
    );
    this.connected = true;
  }

  disconnect(): void {
    this.closedByUser = true;
    this.unsubscribe?.();
    this.connected = false;
  }

  onFrame(frame: Frame): void {
    if (frame.type === "snapshot") {
      // a snapshot restates the world: rebuild instead of appending
      this.gantt.replaceAll([]);
      void this.api.gantt().then((g) => this.gantt.replaceAll(g.bars));
    } else {
      this.gantt.addDelta(frame.gantt_delta);
    }
    this.taskList.applyFrame(frame);
    this.controls.applyFrame(frame);
    this.frames += 1;
  }

  private onClose(): void {
    this.connected = false;
    if (this.closedByUser) return;
    this.schedule(() => this.connect(), this.reconnectDelayMs);
  }
}
