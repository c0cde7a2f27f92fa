import type { LiveStats, ReviewCard, SessionInfo, Verdict } from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function errorDetail(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: string };
    return body.detail ?? response.statusText;
  } catch {
    return response.statusText;
  }
}

/** Thin typed client for the review session API; never computes statistics. */
export class ReviewApi {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (!response.ok && response.status !== 204) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return response;
  }

  /**
   * Create a session. With an explicit n the statistical population is set
   * to n as well, since the server enforces final_n >= computed_n.
   */
  async createSession(opts: { n?: number; seed?: number } = {}): Promise<SessionInfo> {
    const plan = opts.n ? { population_size: opts.n, final_n: opts.n } : {};
    const response = await this.request("/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ plan, seed: opts.seed ?? 0 }),
    });
    return (await response.json()) as SessionInfo;
  }

  /** Next unlabeled card, or null when the session is complete (204). */
  async nextCard(sessionId: string, reviewer: string): Promise<ReviewCard | null> {
    const response = await this.request(
      `/sessions/${encodeURIComponent(sessionId)}/next?reviewer=${encodeURIComponent(reviewer)}`,
    );
    if (response.status === 204) {
      return null;
    }
    return (await response.json()) as ReviewCard;
  }

  async submitLabel(
    sessionId: string,
    pairId: string,
    verdict: Verdict,
    reviewer: string,
  ): Promise<{ labeled_count: number }> {
    const response = await this.request(
      `/sessions/${encodeURIComponent(sessionId)}/labels`,
      {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ pair_id: pairId, verdict, reviewer }),
      },
    );
    return (await response.json()) as { labeled_count: number };
  }

  async stats(sessionId: string): Promise<LiveStats> {
    const response = await this.request(`/sessions/${encodeURIComponent(sessionId)}/stats`);
    return (await response.json()) as LiveStats;
  }

  async exportLabels(sessionId: string): Promise<string> {
    const response = await this.request(`/sessions/${encodeURIComponent(sessionId)}/export`);
    return await response.text();
  }
}
