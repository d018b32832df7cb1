import { describe, expect, it } from "vitest";

import { acceptAsCorrect, emptyForm, validateSubmission } from "../src/form.js";
import { itemNeedingCorrection, itemWithVerbatimSpan } from "./helpers.js";

describe("feedback form validation", () => {
  it("requires a label", () => {
    const result = validateSubmission(itemWithVerbatimSpan(), emptyForm());
    expect(result.ok).toBe(false);
    if (!result.ok) expect(result.field).toBe("label");
  });

  it("blocks a corrected label without a rationale", () => {
    const item = itemNeedingCorrection();
    const other = item.response_options.find((o) => o !== item.model_label)!;
    const result = validateSubmission(item, {
      selectedLabel: other,
      rationale: "   ",
      rationaleOnlyError: false,
    });
    expect(result.ok).toBe(false);
    if (!result.ok) {
      expect(result.field).toBe("rationale");
    }
  });

  it("allows agreeing with the model without a rationale", () => {
    const item = itemWithVerbatimSpan();
    const result = validateSubmission(item, {
      selectedLabel: item.model_label,
      rationale: "",
      rationaleOnlyError: false,
    });
    expect(result.ok).toBe(true);
    if (result.ok) {
      expect(result.submission.correct_label).toBe(item.model_label);
      expect(result.submission.error_kind).toBeUndefined();
    }
  });

  it("accept-as-correct is a single action with the model's label", () => {
    const item = itemWithVerbatimSpan();
    const submission = acceptAsCorrect(item);
    expect(submission).toEqual({
      feedback_id: item.feedback_id,
      correct_label: item.model_label,
      rationale: "",
    });
  });

  it("passes the rationale-only flag through when the label agrees", () => {
    const item = itemWithVerbatimSpan();
    const result = validateSubmission(item, {
      selectedLabel: item.model_label,
      rationale: "the reasoning cites the wrong sentence",
      rationaleOnlyError: true,
    });
    expect(result.ok).toBe(true);
    if (result.ok) expect(result.submission.error_kind).toBe("rationale-only");
  });

  it("rejects labels outside the response options", () => {
    const item = itemWithVerbatimSpan();
    const result = validateSubmission(item, {
      selectedLabel: "maybe",
      rationale: "x",
      rationaleOnlyError: false,
    });
    expect(result.ok).toBe(false);
  });
});
