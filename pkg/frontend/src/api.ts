// Thin typed client over the service JSON API. All math stays server-side;
// the explorer only moves JSON around and diffs strings.

export type PrefixRow = [activity: string, resource: string];

export interface ExplainQuery {
  prefix: PrefixRow[];
  amount: number;
  milestone: string;
  amount_mutable: boolean;
  k: number;
}

export interface TraceRow {
  activity: string;
  resource: string;
}

export interface CounterfactualResult {
  trace: TraceRow[];
  amount: number;
  losses: Record<string, number>;
  proximity: number;
  sparsity: number;
  plausible: boolean;
  iterations: number;
  source_case_id?: string;
}

export interface BaselineOutcome {
  status: string;
  dimension: string;
  iterations: number;
  projection_changed: boolean;
}

export interface ExplainResponse {
  results: CounterfactualResult[];
  baseline_outcome: BaselineOutcome | null;
  truncated: boolean;
}

export interface Vocab {
  activities: string[];
  resources: string[];
}

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(detail);
  }
}

async function detailOf(response: Response): Promise<string> {
  try {
    const body = await response.json();
    if (typeof body.detail === "string") return body.detail;
    return JSON.stringify(body.detail ?? body);
  } catch {
    return response.statusText || `HTTP ${response.status}`;
  }
}

export class ServiceClient {
  constructor(
    private base: string,
    private fetchFn: typeof fetch = fetch,
  ) {}

  private url(path: string): string {
    return this.base.replace(/\/$/, "") + path;
  }

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchFn(this.url(path));
    if (!response.ok) throw new ApiError(response.status, await detailOf(response));
    return (await response.json()) as T;
  }

  milestones(modelId: string): Promise<{ milestones: string[] }> {
    return this.getJson(`/milestones/${encodeURIComponent(modelId)}`);
  }

  vocab(modelId: string): Promise<Vocab> {
    return this.getJson(`/vocab/${encodeURIComponent(modelId)}`);
  }

  // 504 carries a partial payload with truncated=true; that is a valid
  // response for the explorer, not an exception.
  async explain(
    modelId: string,
    query: ExplainQuery,
    signal?: AbortSignal,
  ): Promise<ExplainResponse> {
    const response = await this.fetchFn(this.url("/explain"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ model_id: modelId, query }),
      signal,
    });
    if (response.status === 504) {
      const body = (await response.json()) as ExplainResponse;
      return { ...body, truncated: true };
    }
    if (!response.ok) throw new ApiError(response.status, await detailOf(response));
    return (await response.json()) as ExplainResponse;
  }
}
