/** Codebook panel view model: current bullets plus the diff vs the previous version. */

import type { CodebookResponse } from "./types.js";

export interface CodebookView {
  variable: string;
  version: number;
  latestVersion: number;
  versus: number;
  bullets: { text: string; added: boolean }[];
  added: string[];
  removed: string[];
}

export function buildCodebookView(response: CodebookResponse): CodebookView {
  const added = new Set(response.diff.added);
  return {
    variable: response.codebook.variable,
    version: response.codebook.version,
    latestVersion: response.latest_version,
    versus: response.diff.versus,
    bullets: response.codebook.bullets.map((b) => ({
      text: b.text,
      added: added.has(b.text),
    })),
    added: response.diff.added,
    removed: response.diff.removed,
  };
}
