/**
 * Convergence-chart geometry.
 *
 * Turns the per-iteration metrics rows into SVG-ready coordinates: one line
 * per tracked series (guide accuracy, validation accuracy, per-class F1
 * when present), a dashed horizontal line at the target accuracy, hollow
 * markers for carried-forward validation points, and a guide-set-size
 * annotation per iteration. Displayed labels are the raw response values
 * stringified, never recomputed.
 */

import type { MetricsResponse, MetricsRow } from "./types.js";

export interface ChartPoint {
  x: number;
  y: number;
  t: number;
  value: number;
  label: string;
  hollow: boolean;
}

export interface ChartSeries {
  name: string;
  points: ChartPoint[];
  path: string;
  dashed: boolean;
}

export interface ChartTick {
  pos: number;
  label: string;
}

export interface ConvergenceChart {
  empty: boolean;
  placeholder: string | null;
  width: number;
  height: number;
  series: ChartSeries[];
  targetLine: { y: number; value: number; label: string } | null;
  annotations: { x: number; y: number; text: string }[];
  xTicks: ChartTick[];
  yTicks: ChartTick[];
}

const MARGIN = { top: 16, right: 16, bottom: 28, left: 40 };

function perClassKeys(rows: MetricsRow[]): string[] {
  const keys = new Set<string>();
  for (const row of rows) {
    for (const key of Object.keys(row)) {
      if (key.startsWith("f1_") && typeof row[key] === "number") {
        keys.add(key);
      }
    }
  }
  return [...keys].sort();
}

export function buildConvergenceChart(
  metrics: MetricsResponse,
  width = 640,
  height = 320,
): ConvergenceChart {
  const rows = metrics.rows;
  if (rows.length === 0) {
    return {
      empty: true,
      placeholder: "no iterations yet",
      width,
      height,
      series: [],
      targetLine: null,
      annotations: [],
      xTicks: [],
      yTicks: [],
    };
  }
  const innerWidth = width - MARGIN.left - MARGIN.right;
  const innerHeight = height - MARGIN.top - MARGIN.bottom;
  const maxT = Math.max(1, rows[rows.length - 1]!.t);
  const xFor = (t: number) => MARGIN.left + (t / maxT) * innerWidth;
  const yFor = (value: number) => MARGIN.top + (1 - value) * innerHeight;

  function series(
    name: string,
    value: (row: MetricsRow) => number | null | undefined,
    hollow: (row: MetricsRow) => boolean,
    dashed: boolean,
  ): ChartSeries {
    const points: ChartPoint[] = [];
    for (const row of rows) {
      const v = value(row);
      if (typeof v !== "number") continue;
      points.push({
        x: xFor(row.t),
        y: yFor(v),
        t: row.t,
        value: v,
        label: String(v),
        hollow: hollow(row),
      });
    }
    const path = points
      .map((p, i) => `${i === 0 ? "M" : "L"}${p.x},${p.y}`)
      .join(" ");
    return { name, points, path, dashed };
  }

  const allSeries: ChartSeries[] = [
    series("acc_guide", (r) => r.acc_guide, () => false, false),
    series("acc_val", (r) => r.acc_val, (r) => r.val_carried, false),
  ];
  for (const key of perClassKeys(rows)) {
    allSeries.push(series(key, (r) => r[key] as number, () => false, true));
  }

  const annotations = rows.map((row) => ({
    x: xFor(row.t),
    y: yFor(typeof row.acc_guide === "number" ? row.acc_guide : 0) - 8,
    text: String(row.guide_size),
  }));

  const xTicks = rows.map((row) => ({ pos: xFor(row.t), label: String(row.t) }));
  const yTicks = [0, 0.25, 0.5, 0.75, 1].map((v) => ({
    pos: yFor(v),
    label: String(v),
  }));

  return {
    empty: false,
    placeholder: null,
    width,
    height,
    series: allSeries.filter((s) => s.points.length > 0),
    targetLine: {
      y: yFor(metrics.target_m),
      value: metrics.target_m,
      label: `m = ${metrics.target_m}`,
    },
    annotations,
    xTicks,
    yTicks,
  };
}
