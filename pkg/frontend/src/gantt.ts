import { GanttBar } from "./types.js";

export interface GanttRow {
  station: number;
  area: string;
  bars: GanttBar[];
}

export interface GanttLayout {
  rows: GanttRow[];
  tickMin: number;
  tickMax: number;
}

/**
 * Group bars per station, ordered by area then station id (the axes of the
 * run reports: time horizontal, station/area vertical).
 */
export function computeLayout(bars: GanttBar[]): GanttLayout {
  const byStation = new Map<number, GanttRow>();
  for (const bar of bars) {
    let row = byStation.get(bar.station);
    if (!row) {
      row = { station: bar.station, area: bar.area, bars: [] };
      byStation.set(bar.station, row);
    }
    row.bars.push(bar);
  }
  const rows = [...byStation.values()].sort((a, b) =>
    a.area === b.area ? a.station - b.station : a.area.localeCompare(b.area));
  for (const row of rows) {
    row.bars.sort((a, b) => a.start - b.start);
  }
  const ticks = bars.flatMap((b) => [b.start, b.end]);
  return {
    rows,
    tickMin: ticks.length ? Math.min(...ticks) : 0,
    tickMax: ticks.length ? Math.max(...ticks) : 1,
  };
}

/** Intervals on one station must never overlap; returns offending pairs. */
export function findOverlaps(layout: GanttLayout): string[] {
  const bad: string[] = [];
  for (const row of layout.rows) {
    for (let i = 1; i < row.bars.length; i++) {
      if (row.bars[i].start < row.bars[i - 1].end) {
        bad.push(`station ${row.station}: [${row.bars[i - 1].start},` +
          `${row.bars[i - 1].end}) overlaps [${row.bars[i].start},${row.bars[i].end})`);
      }
    }
  }
  return bad;
}

const ROW_H = 14;
const LABEL_W = 90;

/** Render to standalone SVG; disposal steps red, normal work blue. */
export function toSvg(layout: GanttLayout, width = 860): string {
  const span = Math.max(1, layout.tickMax - layout.tickMin);
  const scale = (width - LABEL_W - 10) / span;
  const height = layout.rows.length * ROW_H + 24;
  const parts: string[] = [
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}">`,
  ];
  layout.rows.forEach((row, i) => {
    const y = 16 + i * ROW_H;
    parts.push(`<text x="2" y="${y + 10}" font-size="8">` +
      `${row.area}:${row.station}</text>`);
    for (const bar of row.bars) {
      const x = LABEL_W + (bar.start - layout.tickMin) * scale;
      const w = Math.max(1, (bar.end - bar.start) * scale);
      const fill = bar.kind === 2 ? "#d62728" : "#4878a8";
      parts.push(`<rect x="${x.toFixed(1)}" y="${y}" width="${w.toFixed(1)}" ` +
        `height="${ROW_H - 3}" fill="${fill}">` +
        `<title>${bar.label} [${bar.start},${bar.end})</title></rect>`);
    }
  });
  parts.push("</svg>");
  return parts.join("");
}

/** Streamed frames only carry deltas; this accumulates the full timeline. */
export class GanttAccumulator {
  private bars: GanttBar[] = [];

  addDelta(delta: GanttBar[]): void {
    this.bars.push(...delta);
  }

  replaceAll(bars: GanttBar[]): void {
    this.bars = [...bars];
  }

  layout(): GanttLayout {
    return computeLayout(this.bars);
  }
}
