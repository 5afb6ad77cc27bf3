// Page wiring: connect the stream, render the dashboard, forward user
// actions to the API. State lives in DashboardModel and is rebuilt from
// the API on every load; only the endpoint and token persist.

import { ApiClient } from "./api.js";
import { renderChart } from "./charts.js";
import { DashboardModel } from "./model.js";
import { buildTree, editTooltip, isEditable, validateInput } from "./params.js";
import type { EventFrame, MetricsFrame, ParameterRow } from "./types.js";

const $ = (id: string): HTMLElement => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el;
};

const model = new DashboardModel();
let api: ApiClient | null = null;
let source: EventSource | null = null;
let backoffMs = 500;
let parameters: ParameterRow[] = [];

function toast(text: string, ok: boolean): void {
  const el = $("toast");
  el.textContent = text;
  el.className = ok ? "toast ok" : "toast err";
  setTimeout(() => {
    el.className = "toast hidden";
  }, 4000);
}

async function connect(): Promise<void> {
  const base = ($("endpoint") as HTMLInputElement).value.replace(/\/$/, "");
  const token = ($("token") as HTMLInputElement).value;
  localStorage.setItem("gcsim.endpoint", base);
  localStorage.setItem("gcsim.token", token);
  api = new ApiClient(base, token);
  try {
    model.applyTopology(await api.topology());
    parameters = await api.parameters();
  } catch (err) {
    toast(`connect failed: ${String(err)}`, false);
    return;
  }
  renderParams();
  openStream();
  render();
}

function openStream(): void {
  if (!api) return;
  source?.close();
  source = new EventSource(api.streamUrl(1000));
  source.addEventListener("metrics", (ev) => {
    model.applyMetrics(JSON.parse((ev as MessageEvent).data) as MetricsFrame);
    render();
  });
  source.addEventListener("event", (ev) => {
    model.applyEvent(JSON.parse((ev as MessageEvent).data) as EventFrame);
    render();
  });
  source.onopen = () => {
    backoffMs = 500;
  };
  source.onerror = () => {
    model.markGap();
    render();
    source?.close();
    setTimeout(openStream, backoffMs);
    backoffMs = Math.min(backoffMs * 2, 10_000);
  };
}

function render(): void {
  $("status").textContent = `${model.status}` +
    (model.connected ? "" : "  (stream disconnected)");
  $("latency-chart").innerHTML = renderChart({
    width: 460,
    height: 140,
    series: [
      { name: "p50", points: model.series.get("latency_p50") ?? [], color: "#3b6ea5" },
      { name: "p99", points: model.series.get("latency_p99") ?? [], color: "#a5503b" },
    ],
    annotations: model.annotations,
  });
  $("throughput-chart").innerHTML = renderChart({
    width: 460,
    height: 140,
    series: [
      { name: "req/s", points: model.series.get("throughput_rps") ?? [], color: "#3b8a5a" },
    ],
    annotations: model.annotations,
  });
  renderTopology();
  renderTimeline();
}

function renderTopology(): void {
  const container = $("topology");
  container.innerHTML = "";
  for (const [id, tile] of [...model.nodes.entries()].sort()) {
    const div = document.createElement("div");
    div.className = "tile " + (tile.alive ? "up" : "crashed");
    const member = model.members.includes(Number(id));
    div.innerHTML =
      `<h4>node ${id}${tile.isLeader ? " *" : ""}</h4>` +
      `<p>${tile.alive ? "up" : "crashed"}${member ? "" : " (not in view)"}</p>` +
      `<p>exec ${tile.execPoint}</p>`;
    const crash = document.createElement("button");
    crash.textContent = tile.alive ? "crash" : "recover";
    crash.onclick = async () => {
      if (!api) return;
      try {
        await api.injectFault(Number(id), tile.alive ? "CRASH" : "RECOVER");
        toast(`${tile.alive ? "CRASH" : "RECOVER"} node ${id} requested`, true);
      } catch (err) {
        toast(String(err), false);
      }
    };
    const view = document.createElement("button");
    view.textContent = member ? "remove" : "add";
    view.onclick = async () => {
      if (!api) return;
      try {
        await api.changeView(member ? "REMOVE" : "ADD", Number(id));
        toast(`view change for node ${id} scheduled`, true);
      } catch (err) {
        toast(String(err), false);
      }
    };
    div.append(crash, view);
    container.append(div);
  }
  $("membership").textContent =
    `members [${model.members.join(", ")}]  leader ${model.leader ?? "?"}`;
}

function renderTimeline(): void {
  const list = $("timeline");
  list.innerHTML = "";
  for (const entry of [...model.timeline].reverse().slice(0, 50)) {
    const li = document.createElement("li");
    li.textContent = `${entry.ts.toFixed(2)}s  [${entry.kind}]  ${entry.text}`;
    list.append(li);
  }
}

function renderParams(): void {
  const container = $("params");
  container.innerHTML = "";
  for (const group of buildTree(parameters)) {
    const details = document.createElement("details");
    const summary = document.createElement("summary");
    summary.textContent = `${group.category} (${group.rows.length})`;
    details.append(summary);
    for (const row of group.rows) {
      const line = document.createElement("div");
      line.className = "param";
      const label = document.createElement("label");
      label.textContent = `${row.path}${row.unit ? ` [${row.unit}]` : ""}`;
      const input = document.createElement("input");
      input.value = String(row.value);
      input.disabled = !isEditable(row);
      input.title = editTooltip(row);
      const error = document.createElement("span");
      error.className = "param-error";
      input.onchange = async () => {
        const check = validateInput(row, input.value);
        if (!check.ok) {
          error.textContent = check.error;
          return;
        }
        error.textContent = "";
        if (!api) return;
        try {
          const outcome = await api.setParameter(row.path, check.value);
          if (outcome.outcome === "APPLIED" && outcome.applied_at !== null) {
            model.annotateMutation(row.path, outcome.applied_at);
            toast(`${row.path} APPLIED at ${outcome.applied_at.toFixed(2)}s`, true);
          } else {
            toast(`${row.path} ${outcome.outcome}: ${outcome.reason}`, false);
          }
          render();
        } catch (err) {
          toast(String(err), false);
        }
      };
      line.append(label, input, error);
      details.append(line);
    }
    container.append(details);
  }
}

window.addEventListener("DOMContentLoaded", () => {
  ($("endpoint") as HTMLInputElement).value =
    localStorage.getItem("gcsim.endpoint") ?? "http://127.0.0.1:8600";
  ($("token") as HTMLInputElement).value =
    localStorage.getItem("gcsim.token") ?? "operator";
  $("connect").addEventListener("click", () => {
    void connect();
  });
});
