/**
 * Console session state.
 *
 * All state is derived from service responses so a refresh loses nothing:
 * the queue comes from /pending, the summary from /runs/{id}, and the phase
 * is a pure function of both. A content warning gates the first narrative
 * render; after the last item of a batch is submitted the console shows a
 * synthesizing notice until the next batch arrives.
 */

import type { FeedbackAck, PendingItem, PendingResponse, RunSummary } from "./types.js";

export type Phase =
  | "content-gate"
  | "loading"
  | "reviewing"
  | "synthesizing"
  | "terminal";

const TERMINAL_STATUSES = new Set(["converged", "budget_exhausted", "capped"]);

export interface SessionState {
  gateAccepted: boolean;
  summary: RunSummary | null;
  queue: PendingItem[];
  selectedIndex: number;
  phase: Phase;
}

export function initialSession(): SessionState {
  return {
    gateAccepted: false,
    summary: null,
    queue: [],
    selectedIndex: 0,
    phase: "content-gate",
  };
}

export function acceptContentGate(state: SessionState): SessionState {
  return { ...state, gateAccepted: true, phase: "loading" };
}

export function applySummary(state: SessionState, summary: RunSummary): SessionState {
  const next = { ...state, summary };
  if (TERMINAL_STATUSES.has(summary.status)) {
    next.phase = next.gateAccepted ? "terminal" : "content-gate";
  }
  return next;
}

export function applyPending(
  state: SessionState,
  pending: PendingResponse,
): SessionState {
  if (!state.gateAccepted) {
    return { ...state, phase: "content-gate" };
  }
  if (pending.items.length > 0) {
    const sameSelection = state.queue[state.selectedIndex]?.feedback_id;
    const keep = pending.items.findIndex((i) => i.feedback_id === sameSelection);
    return {
      ...state,
      queue: pending.items,
      selectedIndex: keep >= 0 ? keep : 0,
      phase: "reviewing",
    };
  }
  if (TERMINAL_STATUSES.has(pending.status)) {
    return { ...state, queue: [], selectedIndex: 0, phase: "terminal" };
  }
  return { ...state, queue: [], selectedIndex: 0, phase: "synthesizing" };
}

export function selectItem(state: SessionState, index: number): SessionState {
  if (index < 0 || index >= state.queue.length) {
    return state;
  }
  return { ...state, selectedIndex: index };
}

export function selectedItem(state: SessionState): PendingItem | null {
  return state.queue[state.selectedIndex] ?? null;
}

/** Optimistic queue advance after a successful submission. */
export function applyAck(
  state: SessionState,
  feedbackId: string,
  ack: FeedbackAck,
): SessionState {
  const queue = state.queue.filter((i) => i.feedback_id !== feedbackId);
  if (ack.iteration_advanced || queue.length === 0) {
    const phase = TERMINAL_STATUSES.has(ack.status) ? "terminal" : "synthesizing";
    return { ...state, queue: [], selectedIndex: 0, phase };
  }
  return {
    ...state,
    queue,
    selectedIndex: Math.min(state.selectedIndex, queue.length - 1),
    phase: "reviewing",
  };
}

/** Straight passthrough of the service's budget arithmetic. */
export function budgetRemaining(summary: RunSummary): number {
  return summary.budget_remaining;
}
