// Thin API client: every console action is exactly one HTTP call.

import type { MutationOutcome, ParameterRow, Topology } from "./types.js";

export class ApiClient {
  constructor(
    public baseUrl: string,
    public token: string,
  ) {}

  private headers(): Record<string, string> {
    return {
      Authorization: `Bearer ${this.token}`,
      "Content-Type": "application/json",
    };
  }

  private async get<T>(path: string): Promise<T> {
    const rsp = await fetch(`${this.baseUrl}${path}`, {
      headers: this.headers(),
    });
    if (!rsp.ok) {
      throw new Error(`${path}: ${rsp.status} ${await rsp.text()}`);
    }
    return (await rsp.json()) as T;
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const rsp = await fetch(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: this.headers(),
      body: JSON.stringify(body),
    });
    const payload = (await rsp.json()) as T & { error?: string };
    if (!rsp.ok) {
      throw new Error(payload.error ?? `${path}: ${rsp.status}`);
    }
    return payload;
  }

  async parameters(): Promise<ParameterRow[]> {
    const out = await this.get<{ parameters: ParameterRow[] }>(
      "/v1/parameters",
    );
    return out.parameters;
  }

  topology(): Promise<Topology> {
    return this.get<Topology>("/v1/topology");
  }

  setParameter(path: string, value: unknown): Promise<MutationOutcome> {
    return this.post<MutationOutcome>(
      `/v1/parameters/${encodeURIComponent(path)}`,
      { value },
    );
  }

  changeView(action: "ADD" | "REMOVE", node: number): Promise<unknown> {
    return this.post("/v1/view", { action, node });
  }

  injectFault(node: number, action: "CRASH" | "RECOVER"): Promise<unknown> {
    return this.post("/v1/faults", { node, action });
  }

  streamUrl(intervalMs: number): string {
    return (
      `${this.baseUrl}/v1/stream?interval_ms=${intervalMs}` +
      `&token=${encodeURIComponent(this.token)}`
    );
  }
}
