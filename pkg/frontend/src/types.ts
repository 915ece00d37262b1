/** Wire schemas of the collaboration service (mirrored, never reinterpreted). */

export type TaskColor = "red" | "yellow";

export interface TaskEntry {
  station: number;
  g: number;
  color: TaskColor;
  kind: number; // 0 preventative, 1 rescue
  placed: boolean;
  deadline: number;
}

export interface RewardBreakdown {
  r_work: number;
  r_e: number;
  r_n: number;
  beta: number;
  z: number;
  r: number;
}

export interface RunMetrics {
  mean_r_work: number;
  rate_fail: number;
  mean_r: number;
}

export interface GanttBar {
  station: number;
  area: string;
  label: string;
  kind: number;
  start: number;
  end: number;
}

export interface Frame {
  type: "frame" | "snapshot";
  version: number;
  tick: number;
  done: boolean;
  tasks: TaskEntry[];
  beta: number;
  reward: RewardBreakdown;
  metrics: RunMetrics;
  mask_stats: { legal: number; total: number };
  gantt_delta: GanttBar[];
  edits_applied: { op: string; station: number | null; tick: number }[];
  k_counts: number[];
}

export type EditOp = "add" | "delete" | "reset" | "confirm";

export interface ConstraintRuleDraft {
  match?: { event_type?: string; area?: string; work_label?: string };
  effect: "forbid_before" | "forbid_after" | "force_front";
  reason?: string;
}

export interface SessionState {
  id: string;
  mode: string;
  tick: number;
  done: boolean;
  frames: number;
  task_size: number;
}
