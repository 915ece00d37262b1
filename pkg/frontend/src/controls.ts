import { ApiClient } from "./client.js";
import { ConstraintRuleDraft, Frame } from "./types.js";

const EFFECTS = new Set(["forbid_before", "forbid_after", "force_front"]);
const EVENT_TYPES = new Set(["shortage", "equipment_failure", "fire"]);

export interface ValidationResult {
  ok: boolean;
  errors: string[];
  rules: ConstraintRuleDraft[];
}

/** Client-side validation mirroring the service's rule compiler. */
export function validateConstraintDraft(text: string): ValidationResult {
  let parsed: unknown;
  try {
    parsed = JSON.parse(text);
  } catch (err) {
    return { ok: false, errors: [`not valid JSON: ${(err as Error).message}`], rules: [] };
  }
  const list = Array.isArray(parsed) ? parsed : [parsed];
  const errors: string[] = [];
  list.forEach((entry, i) => {
    const rule = entry as ConstraintRuleDraft;
    if (!rule || typeof rule !== "object" || !EFFECTS.has(rule.effect)) {
      errors.push(`rule ${i}: effect must be one of ${[...EFFECTS].join(", ")}`);
      return;
    }
    if (rule.effect !== "force_front" && !rule.match?.work_label) {
      errors.push(`rule ${i}: ${rule.effect} needs match.work_label`);
    }
    const event = rule.match?.event_type;
    if (event !== undefined && !EVENT_TYPES.has(event)) {
      errors.push(`rule ${i}: unknown event_type ${JSON.stringify(event)}`);
    }
  });
  return { ok: errors.length === 0, errors, rules: list as ConstraintRuleDraft[] };
}

export class Sparkline {
  private values: number[] = [];

  constructor(private capacity = 120) {}

  push(v: number): void {
    this.values.push(v);
    if (this.values.length > this.capacity) this.values.shift();
  }

  /** SVG polyline points scaled into a width x height box. */
  points(width = 120, height = 24): string {
    if (this.values.length < 2) return "";
    const lo = Math.min(...this.values);
    const hi = Math.max(...this.values);
    const span = hi - lo || 1;
    return this.values
      .map((v, i) => {
        const x = (i / (this.values.length - 1)) * width;
        const y = height - ((v - lo) / span) * height;
        return `${x.toFixed(1)},${y.toFixed(1)}`;
      })
      .join(" ");
  }

  last(): number | undefined {
    return this.values[this.values.length - 1];
  }
}

/**
 * Run/pause/step buttons, the objective-mixing slider and the constraint
 * editor. Displayed numbers come from the latest frame only.
 */
export class ControlPanel {
  readonly rWork = new Sparkline();
  readonly rateFail = new Sparkline();
  readonly reward = new Sparkline();
  beta: number | null = null;
  lastFrame: Frame | null = null;
  lastValidation: ValidationResult | null = null;

  constructor(private api: ApiClient) {}

  applyFrame(frame: Frame): void {
    this.lastFrame = frame;
    this.rWork.push(frame.metrics.mean_r_work);
    this.rateFail.push(frame.metrics.rate_fail);
    this.reward.push(frame.reward.r);
  }

  run(): Promise<unknown> {
    return this.api.control("run");
  }

  pause(): Promise<unknown> {
    return this.api.control("pause");
  }

  step(): Promise<unknown> {
    return this.api.control("step");
  }

  async setBeta(value: number | null): Promise<void> {
    this.beta = value;
    if (value === null) {
      await this.api.setConfig({ clear_beta: true });
    } else {
      await this.api.setConfig({ beta: value });
    }
  }

  /** Validates locally; only validated drafts reach the server. */
  async submitConstraints(text: string): Promise<ValidationResult> {
    const result = validateConstraintDraft(text);
    this.lastValidation = result;
    if (result.ok) {
      await this.api.setConfig({ constraint_list: result.rules });
    }
    return result;
  }

  /** With beta pinned to 1 the mixed objective must equal the work term. */
  displayedObjective(): { z: number; rWork: number } | null {
    if (!this.lastFrame) return null;
    return { z: this.lastFrame.reward.z, rWork: this.lastFrame.reward.r_work };
  }
}
