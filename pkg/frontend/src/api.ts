/**
 * Typed client for the review service HTTP API.
 *
 * Four endpoints: session listing, next-pair polling, verdict submission
 * and the aggregated report. Everything else in the app goes through
 * this module so the server contract lives in one place.
 */

export type Choice = "left" | "right" | "tie";

export interface BlindedPair {
  pair_id: string;
  context: string;
  left: string;
  right: string;
}

export interface NextState {
  done: boolean;
  judged: number;
  total: number;
  pair: BlindedPair | null;
}

export interface SubmitAck {
  ok: boolean;
  judged: number;
  total: number;
}

export interface TallyBlock {
  counts: Record<string, number>;
  ties: number;
  non_tie: number;
  percentages: Record<string, number>;
}

export interface SessionReport {
  session_id: string;
  methods: string[];
  verdict_count: number;
  pooled: TallyBlock;
  per_annotator: Record<string, TallyBlock>;
  majority_per_pair: {
    counts: Record<string, number>;
    split_pairs: number;
    decided_pairs: number;
    percentages: Record<string, number>;
  };
  agreement: {
    pairs_with_multiple_judgments: number;
    unanimous_pairs: number;
    unanimous_fraction: number | null;
  };
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  let response: Response;
  try {
    response = await fetch(url, init);
  } catch (err) {
    throw new ApiError(0, `cannot reach the review service: ${String(err)}`);
  }
  const body: unknown = await response.json().catch(() => ({}));
  if (!response.ok) {
    const detail =
      body && typeof body === "object" && typeof (body as { error?: unknown }).error === "string"
        ? (body as { error: string }).error
        : `request failed with status ${response.status}`;
    throw new ApiError(response.status, detail);
  }
  return body as T;
}

export class ReviewApi {
  constructor(private readonly baseUrl: string = "") {}

  async listSessions(): Promise<string[]> {
    const body = await request<{ sessions: string[] }>(`${this.baseUrl}/sessions`);
    return body.sessions;
  }

  next(sessionId: string, annotator: string): Promise<NextState> {
    const sid = encodeURIComponent(sessionId);
    const ann = encodeURIComponent(annotator);
    return request<NextState>(`${this.baseUrl}/session/${sid}/next?annotator=${ann}`);
  }

  submit(sessionId: string, annotator: string, pairId: string, choice: Choice): Promise<SubmitAck> {
    const sid = encodeURIComponent(sessionId);
    return request<SubmitAck>(`${this.baseUrl}/session/${sid}/verdict`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ annotator, pair_id: pairId, choice }),
    });
  }

  report(sessionId: string): Promise<SessionReport> {
    const sid = encodeURIComponent(sessionId);
    return request<SessionReport>(`${this.baseUrl}/session/${sid}/report`);
  }
}
