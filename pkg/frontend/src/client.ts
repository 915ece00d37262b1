import { EditOp, Frame, GanttBar, RunMetrics, SessionState } from "./types.js";

/**
 * Transport seam: every user action maps to exactly one documented call on
 * this interface, which the tests fake and the browser build backs with
 * fetch/WebSocket.
 */
export interface Transport {
  post(path: string, body: unknown): Promise<unknown>;
  put(path: string, body: unknown): Promise<unknown>;
  get(path: string): Promise<unknown>;
  /** Opens the frame stream; returns an unsubscribe function. */
  stream(path: string, onFrame: (frame: Frame) => void,
         onClose: () => void): () => void;
}

export class ApiClient {
  constructor(private transport: Transport, readonly sessionId: string) {}

  private base(): string {
    return `/sessions/${this.sessionId}`;
  }

  edit(op: EditOp, station?: number): Promise<unknown> {
    const body: { op: EditOp; station?: number } = { op };
    if (station !== undefined) body.station = station;
    return this.transport.post(`${this.base()}/edits`, body);
  }

  setConfig(config: { task_size?: number; beta?: number; clear_beta?: boolean;
                      constraint_list?: unknown[] }): Promise<unknown> {
    return this.transport.put(`${this.base()}/config`, config);
  }

  control(mode: "run" | "pause" | "step"): Promise<unknown> {
    return this.transport.post(`${this.base()}/control`, { mode });
  }

  state(): Promise<SessionState> {
    return this.transport.get(`${this.base()}/state`) as Promise<SessionState>;
  }

  metrics(): Promise<RunMetrics> {
    return this.transport.get(`${this.base()}/metrics`) as Promise<RunMetrics>;
  }

  gantt(): Promise<{ bars: GanttBar[] }> {
    return this.transport.get(`${this.base()}/gantt`) as Promise<{ bars: GanttBar[] }>;
  }

  stream(onFrame: (frame: Frame) => void, onClose: () => void): () => void {
    return this.transport.stream(`${this.base()}/stream`, onFrame, onClose);
  }
}

/** Browser transport over fetch + WebSocket. */
export class HttpTransport implements Transport {
  constructor(private baseUrl: string) {}

  private async request(method: string, path: string, body?: unknown): Promise<unknown> {
    const resp = await fetch(this.baseUrl + path, {
      method,
      headers: { "content-type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!resp.ok) {
      const text = await resp.text();
      throw new Error(`${method} ${path} failed (${resp.status}): ${text}`);
    }
    return resp.json();
  }

  post(path: string, body: unknown): Promise<unknown> {
    return this.request("POST", path, body);
  }

  put(path: string, body: unknown): Promise<unknown> {
    return this.request("PUT", path, body);
  }

  get(path: string): Promise<unknown> {
    return this.request("GET", path);
  }

  stream(path: string, onFrame: (frame: Frame) => void,
         onClose: () => void): () => void {
    const wsUrl = this.baseUrl.replace(/^http/, "ws") + path;
    const socket = new WebSocket(wsUrl);
    socket.onmessage = (ev) => onFrame(JSON.parse(ev.data as string) as Frame);
    socket.onclose = () => onClose();
    return () => socket.close();
  }
}
