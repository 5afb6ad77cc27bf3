// Dashboard state and its reducer. Everything rendered derives from
// API frames; nothing is fabricated client-side, and the model is
// rebuilt from scratch on every page load.

import type {
  EventFrame,
  MetricsFrame,
  SeriesPoint,
  TimelineEntry,
  Topology,
} from "./types.js";

const MAX_POINTS = 600;
const MAX_TIMELINE = 200;

export interface NodeTile {
  alive: boolean;
  active: boolean;
  execPoint: number;
  isLeader: boolean;
}

export class DashboardModel {
  series: Map<string, SeriesPoint[]> = new Map();
  timeline: TimelineEntry[] = [];
  members: number[] = [];
  leader: number | null = null;
  nodes: Map<string, NodeTile> = new Map();
  annotations: { t: number; label: string }[] = [];
  connected = false;
  lastFrameAt: number | null = null;
  status = "unknown";

  private push(name: string, t: number, v: number | null): void {
    let points = this.series.get(name);
    if (!points) {
      points = [];
      this.series.set(name, points);
    }
    points.push({ t, v });
    if (points.length > MAX_POINTS) {
      points.splice(0, points.length - MAX_POINTS);
    }
  }

  applyTopology(topology: Topology): void {
    this.members = [...topology.members].sort((a, b) => a - b);
    this.leader = topology.leader;
    this.nodes.clear();
    for (const [id, info] of Object.entries(topology.nodes)) {
      this.nodes.set(id, {
        alive: info.alive,
        active: info.active,
        execPoint: info.exec_point,
        isLeader: topology.leader !== null && String(topology.leader) === id,
      });
    }
  }

  applyMetrics(frame: MetricsFrame): void {
    this.lastFrameAt = frame.ts;
    this.connected = true;
    const body = frame.body;
    if (frame.node === "cluster") {
      for (const key of [
        "latency_p50",
        "latency_p90",
        "latency_p99",
        "latency_mean",
        "throughput_rps",
        "outstanding",
      ]) {
        if (typeof body[key] === "number") {
          this.push(key, frame.ts, body[key] as number);
        }
      }
      if (typeof body["status"] === "string") {
        this.status = body["status"] as string;
      }
      return;
    }
    const tile = this.nodes.get(frame.node);
    if (tile && typeof body["app.instances_executed"] === "number") {
      tile.execPoint = body["app.instances_executed"] as number;
    }
    if (body["down"] === true && tile) {
      tile.alive = false;
    }
    for (const key of ["net.packets_lost", "app.retransmissions"]) {
      if (typeof body[key] === "number") {
        this.push(`${key}|${frame.node}`, frame.ts, body[key] as number);
      }
    }
  }

  applyEvent(frame: EventFrame): void {
    this.lastFrameAt = frame.ts;
    const body = frame.body;
    const entry: TimelineEntry = {
      ts: frame.ts,
      kind: body.kind,
      text: describeEvent(body),
    };
    this.timeline.push(entry);
    if (this.timeline.length > MAX_TIMELINE) {
      this.timeline.splice(0, this.timeline.length - MAX_TIMELINE);
    }
    if (body.kind === "FAULT" && body.node !== undefined) {
      const tile = this.nodes.get(String(body.node));
      if (tile) {
        tile.alive = body.action !== "CRASH";
      }
    }
    if (body.kind === "VIEW_RECONFIG" && body.node !== undefined) {
      const node = Number(body.node);
      if (body.action === "ADD" && !this.members.includes(node)) {
        this.members = [...this.members, node].sort((a, b) => a - b);
      } else if (body.action === "REMOVE") {
        this.members = this.members.filter((m) => m !== node);
      }
    }
    if (body.kind === "STALLED") {
      this.status = "STALLED";
    }
  }

  // A broken stream leaves a visible hole in every chart: a null point
  // that the renderer must not interpolate across.
  markGap(): void {
    if (!this.connected) {
      return;
    }
    this.connected = false;
    const t = this.lastFrameAt ?? 0;
    for (const name of this.series.keys()) {
      this.push(name, t, null);
    }
    this.timeline.push({ ts: t, kind: "STREAM", text: "stream disconnected" });
  }

  annotateMutation(path: string, appliedAt: number): void {
    this.annotations.push({ t: appliedAt, label: path });
  }
}

export function describeEvent(body: EventFrame["body"]): string {
  switch (body.kind) {
    case "FAULT":
      return `node ${body.node} ${body.action}`;
    case "RECONFIGURATION":
      return `set ${body.path} = ${body.value}`;
    case "VIEW_RECONFIG":
      return `view ${body.action} node ${body.node}`;
    case "STALLED":
      return "cluster stalled: no progress within the grace period";
    default:
      return body.kind;
  }
}
