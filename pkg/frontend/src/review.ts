/**
 * View model for reviewing one pending prediction.
 *
 * The narrative is split into segments around the model's supporting span
 * when (and only when) the service marked the span verbatim; the highlight
 * offsets come from an exact substring match. A non-verbatim, non-empty
 * span renders unhighlighted behind an explanatory banner.
 */

import type { PendingItem } from "./types.js";

export interface HighlightSegment {
  text: string;
  highlighted: boolean;
}

export interface ReviewView {
  feedbackId: string;
  narrativeId: string;
  narrativeText: string;
  segments: HighlightSegment[];
  spanStart: number | null;
  spanEnd: number | null;
  spanBanner: string | null;
  modelLabel: string;
  modelReason: string;
  modelSpan: string;
  parseOk: boolean;
  options: string[];
  codebookVersion: number;
}

export const SPAN_BANNER = "span not found verbatim";

export function buildReviewView(item: PendingItem): ReviewView {
  const text = item.narrative_text;
  let segments: HighlightSegment[] = [{ text, highlighted: false }];
  let spanStart: number | null = null;
  let spanEnd: number | null = null;
  let spanBanner: string | null = null;

  if (item.model_span.length > 0) {
    const start = item.span_verbatim ? text.indexOf(item.model_span) : -1;
    if (item.span_verbatim && start >= 0) {
      spanStart = start;
      spanEnd = start + item.model_span.length;
      segments = [];
      if (start > 0) {
        segments.push({ text: text.slice(0, start), highlighted: false });
      }
      segments.push({ text: text.slice(start, spanEnd), highlighted: true });
      if (spanEnd < text.length) {
        segments.push({ text: text.slice(spanEnd), highlighted: false });
      }
    } else {
      spanBanner = SPAN_BANNER;
    }
  }

  return {
    feedbackId: item.feedback_id,
    narrativeId: item.narrative_id,
    narrativeText: text,
    segments,
    spanStart,
    spanEnd,
    spanBanner,
    modelLabel: item.model_label,
    modelReason: item.model_reason,
    modelSpan: item.model_span,
    parseOk: item.parse_ok,
    options: item.response_options,
    codebookVersion: item.codebook_version,
  };
}
