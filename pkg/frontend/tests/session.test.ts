import { describe, expect, it } from "vitest";

import {
  acceptContentGate,
  applyAck,
  applyPending,
  applySummary,
  budgetRemaining,
  initialSession,
  selectItem,
  selectedItem,
} from "../src/session.js";
import { fixtures } from "./helpers.js";

function reviewingSession() {
  let state = acceptContentGate(initialSession());
  state = applySummary(state, fixtures.summaryBefore());
  return applyPending(state, fixtures.pendingBatch());
}

describe("session state", () => {
  it("starts behind the content gate and never renders narratives before acceptance", () => {
    const state = applyPending(initialSession(), fixtures.pendingBatch());
    expect(state.phase).toBe("content-gate");
  });

  it("moves to reviewing once pending items arrive", () => {
    const state = reviewingSession();
    expect(state.phase).toBe("reviewing");
    expect(state.queue).toHaveLength(5);
    expect(selectedItem(state)?.feedback_id).toBe(
      fixtures.pendingBatch().items[0]!.feedback_id,
    );
  });

  it("advances the queue on ack and shows synthesizing after the last item", () => {
    let state = reviewingSession();
    const acks = fixtures.acks();
    for (const ack of acks) {
      state = applyAck(state, ack.request.feedback_id!, ack.response);
    }
    expect(state.queue).toHaveLength(0);
    expect(state.phase).toBe("synthesizing");
  });

  it("mid-batch acks keep the console reviewing", () => {
    let state = reviewingSession();
    const first = fixtures.acks()[0]!;
    state = applyAck(state, first.request.feedback_id!, first.response);
    expect(state.phase).toBe("reviewing");
    expect(state.queue).toHaveLength(4);
  });

  it("is refresh-safe: rebuilding from the same responses matches", () => {
    const once = reviewingSession();
    const twice = reviewingSession();
    expect(twice).toEqual(once);
  });

  it("keeps the selected item across a poll when it is still pending", () => {
    let state = reviewingSession();
    state = selectItem(state, 3);
    const sameBatch = applyPending(state, fixtures.pendingBatch());
    expect(selectedItem(sameBatch)?.feedback_id).toBe(
      fixtures.pendingBatch().items[3]!.feedback_id,
    );
  });

  it("terminal status empties into the terminal phase", () => {
    let state = reviewingSession();
    state = applyPending(state, { status: "converged", items: [] });
    expect(state.phase).toBe("terminal");
  });

  it("budget remaining is displayed straight from the service", () => {
    const summary = fixtures.summaryAfter();
    expect(budgetRemaining(summary)).toBe(summary.budget_remaining);
    expect(budgetRemaining(summary)).toBeGreaterThanOrEqual(0);
    expect(summary.budget_remaining).toBe(summary.budget - summary.guide_size);
  });
});
