// Parameter tree: grouped straight from the live manifest slice, so the
// console never hardcodes a parameter list, and registry completeness
// propagates into the UI.

import type { ParameterRow } from "./types.js";

export interface ParamGroup {
  category: string;
  rows: ParameterRow[];
}

export function buildTree(rows: ParameterRow[]): ParamGroup[] {
  const groups = new Map<string, ParameterRow[]>();
  for (const row of rows) {
    const list = groups.get(row.category) ?? [];
    list.push(row);
    groups.set(row.category, list);
  }
  return [...groups.entries()]
    .map(([category, members]) => ({
      category,
      rows: members.sort((a, b) => a.path.localeCompare(b.path)),
    }))
    .sort((a, b) => a.category.localeCompare(b.category));
}

export function isEditable(row: ParameterRow): boolean {
  return row.mutability === "RUNTIME_SAFE_POINT" && row.supported;
}

export function editTooltip(row: ParameterRow): string {
  if (!row.supported) {
    return "registered but unsupported in this build";
  }
  if (row.mutability === "RESTART_ONLY") {
    return "restart-only: cannot be changed on a live cluster";
  }
  return "applied at the node's next safe point";
}

// Client-side validation before submitting: the expected type comes from
// the manifest entry, never hardcoded per parameter.
export function validateInput(
  row: ParameterRow,
  raw: string,
): { ok: true; value: unknown } | { ok: false; error: string } {
  const trimmed = raw.trim();
  if (trimmed === "") {
    return { ok: false, error: "value required" };
  }
  if (row.value_type === "boolean") {
    if (trimmed === "true" || trimmed === "false") {
      return { ok: true, value: trimmed === "true" };
    }
    return { ok: false, error: "expected true or false" };
  }
  if (
    row.value_type === "integer" ||
    row.value_type === "duration" ||
    row.value_type === "bytes" ||
    row.value_type === "float"
  ) {
    const parsed = Number(trimmed);
    if (!Number.isFinite(parsed)) {
      return { ok: false, error: "expected a number" };
    }
    if (row.value_type !== "float" && !Number.isInteger(parsed)) {
      return { ok: false, error: "expected an integer" };
    }
    return { ok: true, value: parsed };
  }
  return { ok: true, value: trimmed };
}
