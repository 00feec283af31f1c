/** Typed client for the simulator service. Every failure path funnels into
 * ApiError so the UI can show the service's own error codes. */

export interface DomainInfo {
  id: number;
  name: string;
  action_dim: number;
  action_bounds: [number, number][];
  stride: number;
  native_hz: number;
}

export interface SessionResponse {
  session_id: string;
  frames: string[]; // base64 PNG prompt frames
  step_index: number;
  domain: DomainInfo;
}

export interface StepResponse {
  frame: string; // base64 PNG
  step_index: number;
  latency_ms: number;
}

export class ApiError extends Error {
  constructor(readonly code: string, message: string,
              readonly status: number) {
    super(message);
    this.name = "ApiError";
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  let resp: Response;
  try {
    resp = await fetch(url, init);
  } catch (e) {
    throw new ApiError("unreachable", `service unreachable: ${String(e)}`, 0);
  }
  let body: unknown = null;
  try {
    body = await resp.json();
  } catch {
    // fall through; non-JSON error bodies become bad_response below
  }
  if (!resp.ok) {
    const b = body as { code?: string; message?: string } | null;
    throw new ApiError(b?.code ?? "bad_response",
                       b?.message ?? `HTTP ${resp.status}`, resp.status);
  }
  if (body === null) {
    throw new ApiError("bad_response", "non-JSON response body", resp.status);
  }
  return body as T;
}

export class Client {
  constructor(readonly base: string) {}

  private url(path: string): string {
    return this.base.replace(/\/$/, "") + path;
  }

  async listDomains(): Promise<DomainInfo[]> {
    const body = await request<{ domains: DomainInfo[] }>(
      this.url("/v1/domains"));
    return body.domains;
  }

  async createSession(domain: number, seed: number): Promise<SessionResponse> {
    return request<SessionResponse>(this.url("/v1/sessions"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ domain, seed }),
    });
  }

  async step(sessionId: string, action: number[]): Promise<StepResponse> {
    return this.post(sessionId, "step", action);
  }

  async oracleStep(sessionId: string,
                   action: number[]): Promise<StepResponse> {
    return this.post(sessionId, "oracle-step", action);
  }

  private post(sessionId: string, op: string,
               action: number[]): Promise<StepResponse> {
    return request<StepResponse>(
      this.url(`/v1/sessions/${sessionId}/${op}`), {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ action }),
      });
  }

  async deleteSession(sessionId: string): Promise<void> {
    await request<{ ok: boolean }>(this.url(`/v1/sessions/${sessionId}`),
                                   { method: "DELETE" });
  }
}
