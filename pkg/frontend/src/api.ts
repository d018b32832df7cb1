/**
 * Typed client for the run service.
 *
 * Submissions are idempotent by feedback_id, so transport failures retry
 * the identical body; HTTP-level errors surface the service's error object
 * verbatim (code, message, offending field) for the form to display.
 */

import type {
  ApiErrorDetail,
  CodebookResponse,
  FeedbackAck,
  FeedbackSubmission,
  MetricsResponse,
  PendingResponse,
  RunSummary,
} from "./types.js";

export type ApiResult<T> =
  | { ok: true; data: T }
  | { ok: false; status: number; error: ApiErrorDetail };

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function parseError(response: Response): Promise<ApiErrorDetail> {
  try {
    const body = (await response.json()) as { error?: ApiErrorDetail };
    if (body.error) return body.error;
  } catch {
    // fall through to the generic error below
  }
  return { code: "http_error", message: `HTTP ${response.status}`, field: null };
}

export class ConsoleApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = fetch,
  ) {}

  private async getJson<T>(path: string): Promise<ApiResult<T>> {
    const response = await this.fetchFn(this.baseUrl + path);
    if (!response.ok) {
      return { ok: false, status: response.status, error: await parseError(response) };
    }
    return { ok: true, data: (await response.json()) as T };
  }

  getRun(runId: string): Promise<ApiResult<RunSummary>> {
    return this.getJson(`/runs/${runId}`);
  }

  getPending(runId: string, waitSeconds?: number): Promise<ApiResult<PendingResponse>> {
    const suffix = waitSeconds ? `?wait=${waitSeconds}s` : "";
    return this.getJson(`/runs/${runId}/pending${suffix}`);
  }

  getCodebook(runId: string, version?: number): Promise<ApiResult<CodebookResponse>> {
    const suffix = version === undefined ? "" : `?version=${version}`;
    return this.getJson(`/runs/${runId}/codebook${suffix}`);
  }

  getMetrics(runId: string): Promise<ApiResult<MetricsResponse>> {
    return this.getJson(`/runs/${runId}/metrics`);
  }

  getNarrative(runId: string, narrativeId: string): Promise<ApiResult<{ id: string; text: string }>> {
    return this.getJson(`/runs/${runId}/narratives/${narrativeId}`);
  }

  startRun(runId: string): Promise<ApiResult<RunSummary>> {
    return this.post(`/runs/${runId}/start`, {});
  }

  private async post<T>(path: string, body: unknown): Promise<ApiResult<T>> {
    const response = await this.fetchFn(this.baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) {
      return { ok: false, status: response.status, error: await parseError(response) };
    }
    return { ok: true, data: (await response.json()) as T };
  }

  /** Submit one feedback item; network drops retry the identical payload. */
  async submitFeedback(
    runId: string,
    submission: FeedbackSubmission,
    transportRetries = 2,
  ): Promise<ApiResult<FeedbackAck>> {
    let lastError: unknown = null;
    for (let attempt = 0; attempt <= transportRetries; attempt++) {
      try {
        return await this.post<FeedbackAck>(`/runs/${runId}/feedback`, submission);
      } catch (error) {
        lastError = error;
      }
    }
    return {
      ok: false,
      status: 0,
      error: {
        code: "network",
        message: `request failed after retries: ${String(lastError)}`,
        field: null,
      },
    };
  }
}
