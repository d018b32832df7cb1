/**
 * Browser shell: wires the pure view models and renderers to the DOM and
 * polls the service. Everything it shows is recoverable from the service,
 * so a refresh is always safe.
 */

import { ConsoleApi } from "./api.js";
import { buildConvergenceChart } from "./chart.js";
import { buildCodebookView } from "./codebookView.js";
import { acceptAsCorrect, emptyForm, validateSubmission, type FeedbackForm } from "./form.js";
import {
  renderChartSvg,
  renderCodebook,
  renderContentGate,
  renderQueue,
  renderReview,
  renderSummary,
  renderSynthesizing,
  renderTerminal,
} from "./render.js";
import { buildReviewView } from "./review.js";
import {
  acceptContentGate,
  applyAck,
  applyPending,
  applySummary,
  initialSession,
  selectItem,
  selectedItem,
  type SessionState,
} from "./session.js";

const POLL_INTERVAL_MS = 2000;

function element(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing container #${id}`);
  return node;
}

export function startConsole(baseUrl: string, runId: string): void {
  const api = new ConsoleApi(baseUrl);
  let state: SessionState = initialSession();
  let form: FeedbackForm = emptyForm();

  const summaryBox = element("summary");
  const queueBox = element("queue");
  const detailBox = element("detail");
  const codebookBox = element("codebook");
  const chartBox = element("chart");

  function draw(): void {
    if (state.summary) summaryBox.innerHTML = renderSummary(state.summary);
    queueBox.innerHTML = renderQueue(state.queue, state.selectedIndex);
    if (state.phase === "content-gate") {
      detailBox.innerHTML = renderContentGate();
      document.getElementById("gate-accept")?.addEventListener("click", () => {
        state = acceptContentGate(state);
        void refresh();
      });
      return;
    }
    if (state.phase === "synthesizing" || state.phase === "loading") {
      detailBox.innerHTML = renderSynthesizing();
      return;
    }
    if (state.phase === "terminal") {
      detailBox.innerHTML = renderTerminal(state.summary);
      return;
    }
    const item = selectedItem(state);
    if (!item) return;
    detailBox.innerHTML = renderReview(buildReviewView(item));
    wireForm(item.feedback_id);
  }

  function wireForm(feedbackId: string): void {
    form = emptyForm();
    const container = detailBox.querySelector(".feedback-form");
    if (!container) return;
    container.querySelectorAll<HTMLInputElement>("input[name=label]").forEach((radio) => {
      radio.addEventListener("change", () => {
        form.selectedLabel = radio.value;
      });
    });
    const rationale = container.querySelector<HTMLTextAreaElement>("textarea[name=rationale]");
    rationale?.addEventListener("input", () => {
      form.rationale = rationale.value;
    });
    const onlyToggle = container.querySelector<HTMLInputElement>("input[name=rationale-only]");
    onlyToggle?.addEventListener("change", () => {
      form.rationaleOnlyError = onlyToggle.checked;
    });
    const errorBox = container.querySelector<HTMLElement>(".form-error");
    container.addEventListener("submit", (event) => {
      event.preventDefault();
      const item = selectedItem(state);
      if (!item || item.feedback_id !== feedbackId) return;
      const result = validateSubmission(item, form);
      if (!result.ok) {
        if (errorBox) errorBox.textContent = result.message;
        container
          .querySelector<HTMLElement>(
            result.field === "rationale" ? "textarea[name=rationale]" : "input[name=label]",
          )
          ?.focus();
        return;
      }
      void submit(result.submission);
    });
    document.getElementById("accept-as-correct")?.addEventListener("click", () => {
      const item = selectedItem(state);
      if (item) void submit(acceptAsCorrect(item));
    });
  }

  async function submit(submission: ReturnType<typeof acceptAsCorrect>): Promise<void> {
    const result = await api.submitFeedback(runId, submission);
    if (!result.ok) {
      const errorBox = detailBox.querySelector<HTMLElement>(".form-error");
      if (errorBox) {
        errorBox.textContent = result.error.field
          ? `${result.error.message} (${result.error.field})`
          : result.error.message;
      }
      return;
    }
    state = applyAck(state, submission.feedback_id, result.data);
    draw();
    await refresh();
  }

  async function refresh(): Promise<void> {
    const summary = await api.getRun(runId);
    if (summary.ok) state = applySummary(state, summary.data);
    const pending = await api.getPending(runId);
    if (pending.ok) state = applyPending(state, pending.data);
    const codebook = await api.getCodebook(runId);
    if (codebook.ok) codebookBox.innerHTML = renderCodebook(buildCodebookView(codebook.data));
    const metrics = await api.getMetrics(runId);
    if (metrics.ok) chartBox.innerHTML = renderChartSvg(buildConvergenceChart(metrics.data));
    draw();
  }

  queueBox.addEventListener("click", (event) => {
    const target = (event.target as HTMLElement).closest<HTMLElement>(".queue-item");
    if (target?.dataset.index) {
      state = selectItem(state, Number(target.dataset.index));
      draw();
    }
  });

  void refresh();
  setInterval(() => {
    if (state.phase !== "content-gate") void refresh();
  }, POLL_INTERVAL_MS);
}

declare global {
  interface Window {
    startConsole: typeof startConsole;
  }
}

if (typeof window !== "undefined") {
  window.startConsole = startConsole;
}
