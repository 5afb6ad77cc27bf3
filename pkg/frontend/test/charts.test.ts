import assert from "node:assert/strict";
import { test } from "node:test";

import { escapeXml, polylineSegments, renderChart } from "../src/charts.js";

const identity = (x: number) => x;

test("null points split the polyline into segments", () => {
  const segments = polylineSegments(
    [
      { t: 0, v: 1 },
      { t: 1, v: 2 },
      { t: 1.5, v: null },
      { t: 2, v: 3 },
      { t: 3, v: 4 },
    ],
    identity,
    identity,
  );
  assert.equal(segments.length, 2);
  assert.match(segments[0]!, /^0\.0,1\.0 1\.0,2\.0$/);
});

test("chart renders one polyline per contiguous run plus annotations", () => {
  const svg = renderChart({
    width: 100,
    height: 50,
    series: [
      {
        name: "p50",
        color: "#123456",
        points: [
          { t: 0, v: 1 },
          { t: 5, v: 2 },
          { t: 6, v: null },
          { t: 10, v: 1 },
          { t: 12, v: 5 },
        ],
      },
    ],
    annotations: [{ t: 5, label: "smr.batch_size" }],
  });
  assert.equal((svg.match(/<polyline/g) ?? []).length, 2);
  assert.match(svg, /stroke-dasharray/);
  assert.match(svg, /smr.batch_size/);
});

test("empty chart renders an empty svg", () => {
  const svg = renderChart({ width: 10, height: 10, series: [] });
  assert.equal(svg, '<svg width="10" height="10"></svg>');
});

test("xml escaping", () => {
  assert.equal(escapeXml('a<b>&"c"'), "a&lt;b&gt;&amp;&quot;c&quot;");
});
