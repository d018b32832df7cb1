/**
 * Wire types for the run service. Field names mirror the JSON payloads
 * exactly; the console displays these values verbatim and never recomputes
 * labels or metrics on its own.
 */

export interface VariableSpec {
  name: string;
  kind: "binary" | "multiclass";
  response_options: string[];
  reference_codebook_text?: string;
}

export interface RunSummary {
  run_id: string;
  status: string;
  stop_reason: string | null;
  t: number;
  guide_size: number;
  budget: number;
  budget_remaining: number;
  codebook_version: number;
  variable: VariableSpec;
  config: Record<string, unknown>;
  val_size: number;
  pool_size: number;
  pending_count: number;
  finalized: boolean;
  mode: string;
}

export interface PendingItem {
  feedback_id: string;
  narrative_id: string;
  narrative_text: string;
  model_label: string;
  model_reason: string;
  model_span: string;
  span_verbatim: boolean;
  parse_ok: boolean;
  response_options: string[];
  codebook_version: number;
}

export interface PendingResponse {
  status: string;
  items: PendingItem[];
}

export interface FeedbackSubmission {
  feedback_id: string;
  correct_label: string;
  rationale: string;
  error_kind?: string;
}

export interface FeedbackAck {
  feedback_id: string;
  remaining: number;
  batch_complete: boolean;
  iteration_advanced: boolean;
  status: string;
  t: number;
  codebook_version: number;
}

export interface GuidelineBullet {
  text: string;
  origin_iteration: number;
  origin_feedback_ids: string[];
}

export interface CodebookResponse {
  codebook: {
    variable: string;
    version: number;
    preamble: string;
    options: string;
    response_options: string[];
    bullets: GuidelineBullet[];
  };
  latest_version: number;
  diff: { added: string[]; removed: string[]; versus: number };
}

export interface MetricsRow {
  t: number;
  acc_guide: number | null;
  acc_val: number | null;
  val_carried: boolean;
  guide_size: number;
  codebook_version: number;
  [perClassF1: string]: number | boolean | null | undefined;
}

export interface MetricsResponse {
  rows: MetricsRow[];
  target_m: number;
  budget: number;
  min_guide_size: number;
}

export interface ApiErrorDetail {
  code: string;
  message: string;
  field: string | null;
}
