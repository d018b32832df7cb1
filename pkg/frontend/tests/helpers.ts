import { readFileSync } from "node:fs";

import type {
  CodebookResponse,
  FeedbackAck,
  MetricsResponse,
  PendingItem,
  PendingResponse,
  RunSummary,
} from "../src/types.js";

function load<T>(name: string): T {
  const url = new URL(`./fixtures/${name}`, import.meta.url);
  return JSON.parse(readFileSync(url, "utf-8")) as T;
}

export const fixtures = {
  summaryBefore: () => load<RunSummary>("run_summary_before.json"),
  summaryAfter: () => load<RunSummary>("run_summary_after.json"),
  pendingBatch: () => load<PendingResponse>("pending_batch.json"),
  pendingNext: () => load<PendingResponse>("pending_next.json"),
  acks: () =>
    load<{ request: Record<string, string>; response: FeedbackAck; status: number }[]>(
      "feedback_acks.json",
    ),
  codebook: () => load<CodebookResponse>("codebook_diff.json"),
  metrics: () => load<MetricsResponse>("metrics.json"),
  error422: () => load<{ status: number; body: { error: { code: string; message: string; field: string } } }>(
    "error_422.json",
  ),
};

export function itemWithVerbatimSpan(): PendingItem {
  const item = fixtures.pendingBatch().items.find((i) => i.span_verbatim);
  if (!item) throw new Error("fixture lost its verbatim-span item");
  return item;
}

export function itemNeedingCorrection(): PendingItem {
  const acks = fixtures.acks();
  const corrected = acks.find(
    (a) =>
      fixtures.pendingBatch().items.find((i) => i.feedback_id === a.request.feedback_id)
        ?.model_label !== a.request.correct_label,
  );
  if (!corrected) throw new Error("fixture lost its corrected item");
  const item = fixtures
    .pendingBatch()
    .items.find((i) => i.feedback_id === corrected.request.feedback_id);
  if (!item) throw new Error("fixture item missing");
  return item;
}

/** Minimal Response-like stub for the api client tests. */
export function jsonResponse(status: number, body: unknown): Response {
  return {
    ok: status >= 200 && status < 300,
    status,
    json: async () => body,
  } as unknown as Response;
}
