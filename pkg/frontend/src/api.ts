import type {
  AgreementStats,
  ConflictPage,
  ConflictView,
  DecisionRequest,
  Frequencies,
  NegotiationTurn,
} from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function parseDetail(response: Response): Promise<string> {
  try {
    const body = await response.json();
    return typeof body.detail === "string" ? body.detail : JSON.stringify(body);
  } catch {
    return response.statusText;
  }
}

/** Thin typed client for the adjudication service; all state lives server-side. */
export class ApiClient {
  constructor(
    private baseUrl: string,
    private token: string | null = null,
    private fetchFn: typeof fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    const response = await this.fetchFn(`${this.baseUrl}${path}`, { ...init, headers });
    if (!response.ok) {
      throw new ApiError(response.status, await parseDetail(response));
    }
    return (await response.json()) as T;
  }

  health(): Promise<{ status: string; model_loaded: boolean }> {
    return this.request("/health");
  }

  listConflicts(
    status: "open" | "resolved" | "all" = "open",
    page = 1,
    pageSize = 50,
    seniorOnly = false,
  ): Promise<ConflictPage> {
    const params = new URLSearchParams({
      status,
      page: String(page),
      page_size: String(pageSize),
    });
    if (seniorOnly) params.set("needs_senior_review", "true");
    return this.request(`/conflicts?${params}`);
  }

  getConflict(postId: string): Promise<ConflictView> {
    return this.request(`/conflicts/${encodeURIComponent(postId)}`);
  }

  decide(postId: string, decision: DecisionRequest): Promise<ConflictView> {
    return this.request(`/conflicts/${encodeURIComponent(postId)}/decision`, {
      method: "POST",
      body: JSON.stringify(decision),
    });
  }

  elaborate(postId: string): Promise<{ case: ConflictView; turn: NegotiationTurn }> {
    return this.request(`/conflicts/${encodeURIComponent(postId)}/elaborate`, {
      method: "POST",
    });
  }

  agreement(): Promise<AgreementStats> {
    return this.request("/stats/agreement");
  }

  frequencies(): Promise<Frequencies> {
    return this.request("/stats/frequencies");
  }
}
