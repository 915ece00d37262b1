import { ApiClient } from "./client.js";
import { Frame, TaskEntry } from "./types.js";

export interface TaskRow extends TaskEntry {
  /** true while an edit for this row is in flight and unconfirmed by a frame */
  pending: boolean;
}

/**
 * The ranked disposal-task list with the three human operations plus
 * confirmation. Rendered state is a pure function of the latest server
 * frame and the local pending-edit queue (optimistic deletes hide rows,
 * optimistic adds show placeholders until the next frame reconciles).
 */
export class TaskListView {
  private frame: Frame | null = null;
  private pendingDeletes = new Set<number>();
  private pendingAdds = new Set<number>();
  windowSize: number;

  constructor(private api: ApiClient, windowSize = 7) {
    this.windowSize = windowSize;
  }

  applyFrame(frame: Frame): void {
    this.frame = frame;
    const listed = new Set(frame.tasks.map((t) => t.station));
    // reconcile optimism: the server frame is the truth
    for (const station of [...this.pendingDeletes]) {
      if (!listed.has(station)) this.pendingDeletes.delete(station);
    }
    for (const station of [...this.pendingAdds]) {
      if (listed.has(station)) this.pendingAdds.delete(station);
    }
  }

  rows(): TaskRow[] {
    if (!this.frame) return [];
    const rows: TaskRow[] = this.frame.tasks
      .filter((t) => !this.pendingDeletes.has(t.station))
      .map((t) => ({ ...t, pending: false }));
    for (const station of [...this.pendingAdds].sort((a, b) => a - b)) {
      rows.push({ station, g: 0, color: "yellow", kind: 0, placed: false,
                  deadline: 0, pending: true });
    }
    return rows;
  }

  async deleteStation(station: number): Promise<void> {
    this.pendingDeletes.add(station);
    await this.api.edit("delete", station);
  }

  async addStation(station: number): Promise<void> {
    this.pendingAdds.add(station);
    await this.api.edit("add", station);
  }

  async reset(): Promise<void> {
    this.pendingDeletes.clear();
    this.pendingAdds.clear();
    await this.api.edit("reset");
  }

  async confirm(): Promise<void> {
    await this.api.edit("confirm");
  }

  async resizeWindow(size: number): Promise<void> {
    this.windowSize = size;
    await this.api.setConfig({ task_size: size });
  }

  /** Plain-row markup; red entries are stations currently in the emergency state. */
  toHtml(): string {
    const rows = this.rows().map((row) => {
      const badge = row.color === "red" ? "&#9632;" : "&#9633;";
      const kind = row.kind === 1 ? "rescue" : "preventative";
      const flags = [row.placed ? "placed" : "unplaced",
                     row.pending ? "pending" : ""].filter(Boolean).join(" ");
      return `<tr class="${row.color}${row.pending ? " pending" : ""}">` +
        `<td>${badge}</td><td>#${row.station}</td>` +
        `<td>${row.g.toFixed(3)}</td><td>${kind}</td><td>${flags}</td>` +
        `<td><button data-action="delete" data-station="${row.station}">x</button></td>` +
        `</tr>`;
    });
    return `<table class="tasklist"><thead><tr>` +
      `<th></th><th>station</th><th>g</th><th>kind</th><th>status</th><th></th>` +
      `</tr></thead><tbody>${rows.join("")}</tbody></table>`;
  }
}
