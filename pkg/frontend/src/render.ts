/**
 * HTML renderers. Pure string producers over the view models so they are
 * testable without a DOM; the browser shell assigns the output to
 * container elements and wires events by id.
 */

import type { ConvergenceChart } from "./chart.js";
import type { CodebookView } from "./codebookView.js";
import type { ReviewView } from "./review.js";
import type { PendingItem, RunSummary } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;")
    .replaceAll("'", "&#39;");
}

export function renderContentGate(): string {
  return `
<div class="content-gate">
  <h2>Content warning</h2>
  <p>This run reviews free-text case narratives that may describe distressing
  events. Take breaks whenever you need them; pending items wait for you.</p>
  <button id="gate-accept">Show narratives</button>
</div>`;
}

export function renderSummary(summary: RunSummary): string {
  return `
<div class="summary">
  <span class="run-id">${escapeHtml(summary.run_id)}</span>
  <span class="status">${escapeHtml(summary.status)}</span>
  <span>iteration ${summary.t}</span>
  <span>validated ${summary.guide_size}</span>
  <span>budget remaining ${summary.budget_remaining}</span>
  <span>codebook v${summary.codebook_version}</span>
</div>`;
}

export function renderQueue(queue: PendingItem[], selectedIndex: number): string {
  if (queue.length === 0) {
    return `<div class="queue empty">no items pending</div>`;
  }
  const rows = queue
    .map((item, index) => {
      const selected = index === selectedIndex ? " selected" : "";
      return `<li class="queue-item${selected}" data-index="${index}">
        ${escapeHtml(item.narrative_id)} &mdash; ${escapeHtml(item.model_label)}</li>`;
    })
    .join("\n");
  return `<ul class="queue">${rows}</ul>`;
}

export function renderReview(view: ReviewView): string {
  const narrative = view.segments
    .map((segment) =>
      segment.highlighted
        ? `<mark class="model-span">${escapeHtml(segment.text)}</mark>`
        : escapeHtml(segment.text),
    )
    .join("");
  const banner = view.spanBanner
    ? `<div class="span-banner">${escapeHtml(view.spanBanner)}</div>`
    : "";
  const parseWarning = view.parseOk
    ? ""
    : `<div class="parse-banner">the model reply could not be parsed; please label from scratch</div>`;
  const options = view.options
    .map(
      (option) => `
    <label><input type="radio" name="label" value="${escapeHtml(option)}"
      ${option === view.modelLabel ? "data-model-label=\"true\"" : ""}/>
      ${escapeHtml(option)}</label>`,
    )
    .join("\n");
  return `
<div class="review" data-feedback-id="${escapeHtml(view.feedbackId)}">
  ${banner}${parseWarning}
  <div class="narrative">${narrative}</div>
  <div class="model-answer">
    <div class="model-label">model label: <b>${escapeHtml(view.modelLabel)}</b></div>
    <div class="model-reason">${escapeHtml(view.modelReason)}</div>
  </div>
  <form class="feedback-form">
    <fieldset class="label-choice">${options}</fieldset>
    <textarea name="rationale" placeholder="rationale (required when you correct the label)"></textarea>
    <label class="rationale-only">
      <input type="checkbox" name="rationale-only"/> label is right, reasoning is flawed
    </label>
    <div class="form-error" role="alert"></div>
    <button type="submit" id="submit-feedback">Submit</button>
    <button type="button" id="accept-as-correct">Accept model answer</button>
  </form>
</div>`;
}

export function renderSynthesizing(): string {
  return `<div class="synthesizing">synthesizing guidelines&hellip;</div>`;
}

export function renderTerminal(summary: RunSummary | null): string {
  const reason = summary?.stop_reason ? escapeHtml(summary.stop_reason) : "finished";
  return `<div class="terminal">run complete: ${reason}</div>`;
}

export function renderCodebook(view: CodebookView): string {
  const bullets = view.bullets
    .map(
      (bullet) =>
        `<li class="bullet${bullet.added ? " added" : ""}">${escapeHtml(bullet.text)}</li>`,
    )
    .join("\n");
  const removed = view.removed
    .map((text) => `<li class="bullet removed">${escapeHtml(text)}</li>`)
    .join("\n");
  return `
<div class="codebook">
  <h3>${escapeHtml(view.variable)} &mdash; v${view.version}</h3>
  <ul>${bullets}</ul>
  ${removed ? `<h4>removed since v${view.versus}</h4><ul>${removed}</ul>` : ""}
</div>`;
}

export function renderChartSvg(chart: ConvergenceChart): string {
  if (chart.empty) {
    return `<div class="chart placeholder">${escapeHtml(chart.placeholder ?? "")}</div>`;
  }
  const parts: string[] = [
    `<svg class="chart" viewBox="0 0 ${chart.width} ${chart.height}" role="img">`,
  ];
  for (const tick of chart.yTicks) {
    parts.push(
      `<text class="tick y" x="4" y="${tick.pos}">${escapeHtml(tick.label)}</text>`,
    );
  }
  for (const tick of chart.xTicks) {
    parts.push(
      `<text class="tick x" x="${tick.pos}" y="${chart.height - 8}">${escapeHtml(tick.label)}</text>`,
    );
  }
  if (chart.targetLine) {
    parts.push(
      `<line class="target" x1="0" x2="${chart.width}" y1="${chart.targetLine.y}" ` +
        `y2="${chart.targetLine.y}" stroke-dasharray="6 4"/>`,
      `<text class="target-label" x="${chart.width - 4}" y="${chart.targetLine.y - 4}" ` +
        `text-anchor="end">${escapeHtml(chart.targetLine.label)}</text>`,
    );
  }
  for (const series of chart.series) {
    parts.push(
      `<path class="series ${escapeHtml(series.name)}" d="${series.path}" fill="none"` +
        `${series.dashed ? ' stroke-dasharray="3 3"' : ""}/>`,
    );
    for (const point of series.points) {
      parts.push(
        `<circle class="point ${escapeHtml(series.name)}${point.hollow ? " carried" : ""}" ` +
          `cx="${point.x}" cy="${point.y}" r="3.5"` +
          `${point.hollow ? ' fill="none"' : ""}><title>${escapeHtml(point.label)}</title></circle>`,
      );
    }
  }
  for (const annotation of chart.annotations) {
    parts.push(
      `<text class="annotation" x="${annotation.x}" y="${annotation.y}" ` +
        `text-anchor="middle">${escapeHtml(annotation.text)}</text>`,
    );
  }
  parts.push("</svg>");
  return parts.join("\n");
}
