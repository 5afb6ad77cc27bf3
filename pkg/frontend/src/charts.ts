// Minimal SVG line charts rendered as markup strings (no chart library,
// no DOM dependency, easy to test). Null points break the line: a
// stream gap is shown as a hole, never interpolated.

import type { SeriesPoint } from "./types.js";

export interface ChartSpec {
  width: number;
  height: number;
  series: { name: string; points: SeriesPoint[]; color: string }[];
  annotations?: { t: number; label: string }[];
}

export function polylineSegments(
  points: SeriesPoint[],
  x: (t: number) => number,
  y: (v: number) => number,
): string[] {
  const segments: string[] = [];
  let current: string[] = [];
  for (const p of points) {
    if (p.v === null) {
      if (current.length > 1) {
        segments.push(current.join(" "));
      }
      current = [];
    } else {
      current.push(`${x(p.t).toFixed(1)},${y(p.v).toFixed(1)}`);
    }
  }
  if (current.length > 1) {
    segments.push(current.join(" "));
  }
  return segments;
}

export function renderChart(spec: ChartSpec): string {
  const all = spec.series.flatMap((s) =>
    s.points.filter((p) => p.v !== null),
  );
  if (all.length === 0) {
    return `<svg width="${spec.width}" height="${spec.height}"></svg>`;
  }
  const t0 = Math.min(...all.map((p) => p.t));
  const t1 = Math.max(...all.map((p) => p.t));
  const v1 = Math.max(...all.map((p) => p.v as number), 1e-9);
  const x = (t: number) =>
    t1 === t0 ? 0 : ((t - t0) / (t1 - t0)) * (spec.width - 8) + 4;
  const y = (v: number) => spec.height - 4 - (v / v1) * (spec.height - 8);
  const parts: string[] = [
    `<svg width="${spec.width}" height="${spec.height}" ` +
      `viewBox="0 0 ${spec.width} ${spec.height}">`,
  ];
  for (const ann of spec.annotations ?? []) {
    if (ann.t >= t0 && ann.t <= t1) {
      const ax = x(ann.t).toFixed(1);
      parts.push(
        `<line x1="${ax}" y1="0" x2="${ax}" y2="${spec.height}" ` +
          `stroke="#c9a227" stroke-dasharray="3,3">` +
          `<title>${escapeXml(ann.label)}</title></line>`,
      );
    }
  }
  for (const s of spec.series) {
    for (const seg of polylineSegments(s.points, x, y)) {
      parts.push(
        `<polyline fill="none" stroke="${s.color}" stroke-width="1.5" ` +
          `points="${seg}"><title>${escapeXml(s.name)}</title></polyline>`,
      );
    }
  }
  parts.push("</svg>");
  return parts.join("");
}

export function escapeXml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}
