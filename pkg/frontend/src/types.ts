// Shapes of the control API payloads the console consumes.

export interface ParameterRow {
  path: string;
  category: string;
  mutability: "RUNTIME_SAFE_POINT" | "RESTART_ONLY";
  value_type: "integer" | "float" | "boolean" | "enum" | "duration" | "bytes";
  default: unknown;
  value: unknown;
  unit: string;
  supported: boolean;
}

export interface MetricsFrame {
  ts: number;
  kind: "METRICS";
  node: string; // replica id or "cluster"
  body: Record<string, number | boolean | string>;
}

export interface EventFrame {
  ts: number;
  kind: "EVENT";
  body: {
    t?: number;
    kind: string; // FAULT | RECONFIGURATION | VIEW_RECONFIG | STALLED | ...
    node?: number | null;
    action?: string;
    path?: string;
    value?: string;
    members?: number[];
  };
}

export type StreamFrame = MetricsFrame | EventFrame;

export interface Topology {
  time: number;
  members: number[];
  leader: number | null;
  nodes: Record<
    string,
    { alive: boolean; active: boolean; exec_point: number; ballot: number }
  >;
}

export interface MutationOutcome {
  path: string;
  value: string;
  outcome: "APPLIED" | "REJECTED" | "PENDING";
  reason: string;
  applied_at: number | null;
  requested_at: number;
}

export interface TimelineEntry {
  ts: number;
  kind: string;
  text: string;
}

// A chart series point. `null` values mark stream gaps: the chart must
// break the line there instead of interpolating.
export type SeriesPoint = { t: number; v: number | null };
