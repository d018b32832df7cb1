/**
 * Feedback-form state and local validation.
 *
 * A label must be selected, and a free-text rationale is required whenever
 * the chosen label differs from the model's. Accepting the model's answer
 * is a single action that needs no rationale.
 */

import type { FeedbackSubmission, PendingItem } from "./types.js";

export interface FeedbackForm {
  selectedLabel: string | null;
  rationale: string;
  rationaleOnlyError: boolean;
}

export function emptyForm(): FeedbackForm {
  return { selectedLabel: null, rationale: "", rationaleOnlyError: false };
}

export type ValidationResult =
  | { ok: true; submission: FeedbackSubmission }
  | { ok: false; field: "label" | "rationale"; message: string };

export function validateSubmission(
  item: PendingItem,
  form: FeedbackForm,
): ValidationResult {
  if (!form.selectedLabel) {
    return { ok: false, field: "label", message: "select a label" };
  }
  if (!item.response_options.includes(form.selectedLabel)) {
    return {
      ok: false,
      field: "label",
      message: `label must be one of: ${item.response_options.join(", ")}`,
    };
  }
  const corrected = form.selectedLabel !== item.model_label;
  if (corrected && form.rationale.trim().length === 0) {
    return {
      ok: false,
      field: "rationale",
      message: "a rationale is required when correcting the model's label",
    };
  }
  const submission: FeedbackSubmission = {
    feedback_id: item.feedback_id,
    correct_label: form.selectedLabel,
    rationale: form.rationale,
  };
  if (form.rationaleOnlyError && !corrected) {
    submission.error_kind = "rationale-only";
  }
  return { ok: true, submission };
}

/** One-click acceptance of the model's answer; an empty rationale is allowed. */
export function acceptAsCorrect(item: PendingItem): FeedbackSubmission {
  return {
    feedback_id: item.feedback_id,
    correct_label: item.model_label,
    rationale: "",
  };
}
