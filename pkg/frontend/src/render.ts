// Pure rendering helpers: server JSON in, HTML/SVG strings out. Post content
// is always escaped; code blocks and line breaks survive via <pre> wrapping.

import type {
  AgreementStats,
  ConflictView,
  DecisionAction,
  Frequencies,
  NegotiationTurn,
} from "./types.js";

export function escapeHtml(raw: string): string {
  return raw
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

export function queueBadge(openCount: number): string {
  return openCount === 0 ? "all resolved" : `${openCount} open`;
}

/** Client-side mirror of the server's decision validation (422 guard). */
export function validateDecision(action: DecisionAction, rationale: string | undefined): string | null {
  if (action === "hold" && !(rationale ?? "").trim()) {
    return "Holding your label requires a rationale.";
  }
  return null;
}

export function renderTranscript(turns: NegotiationTurn[]): string {
  if (turns.length === 0) return '<p class="muted">No negotiation turns yet.</p>';
  const rows = turns.map((turn) => {
    const proposal = turn.proposed_category
      ? `<span class="proposal">&rarr; ${escapeHtml(turn.proposed_category)}</span>`
      : "";
    return `<li class="turn turn-${turn.speaker}"><strong>${turn.speaker}</strong> ${proposal}<pre>${escapeHtml(turn.message)}</pre></li>`;
  });
  return `<ol class="transcript">${rows.join("")}</ol>`;
}

export function renderConflictCard(view: ConflictView): string {
  const post = view.post;
  const title = post ? escapeHtml(post.title) : escapeHtml(view.post_id);
  const body = post ? `<pre class="post-body">${escapeHtml(post.body_text)}</pre>` : "";
  const answers = post && post.answers.length
    ? `<details><summary>${post.answers.length} answer(s) (context only)</summary>${post.answers
        .map((a) => `<pre>${escapeHtml(a)}</pre>`)
        .join("")}</details>`
    : "";
  const defs = Object.entries(view.definitions)
    .map(([name, def]) => `<dt>${escapeHtml(name)}</dt><dd>${escapeHtml(def)}</dd>`)
    .join("");
  const review = view.needs_senior_review
    ? '<span class="flag">needs senior review</span>'
    : "";
  const resolution = view.resolution
    ? `<p class="resolved">Resolved: <strong>${escapeHtml(view.resolution.final_label)}</strong> (conceded by ${view.resolution.conceded_by})</p>`
    : "";
  return [
    `<article class="conflict" data-post-id="${escapeHtml(view.post_id)}" data-status="${view.status}">`,
    `<h3>${title} ${review}</h3>`,
    body,
    answers,
    `<p>human: <strong>${escapeHtml(view.human_label)}</strong> vs llm: <strong>${escapeHtml(view.llm_label)}</strong></p>`,
    `<dl class="definitions">${defs}</dl>`,
    renderTranscript(view.turns),
    resolution,
    "</article>",
  ].join("\n");
}

export function renderFrequencyTable(freq: Frequencies): string {
  const rows = Object.entries(freq.counts)
    .map(
      ([name, count]) =>
        `<tr><td>${escapeHtml(name)}</td><td>${count}</td><td>${(freq.percentages[name] ?? 0).toFixed(2)}%</td></tr>`,
    )
    .join("");
  return `<table class="freq"><thead><tr><th>Category</th><th>Count</th><th>%</th></tr></thead><tbody>${rows}</tbody><tfoot><tr><td>Total</td><td>${freq.total}</td><td></td></tr></tfoot></table>`;
}

/** Horizontal bar chart as inline SVG; data-count carries the exact value. */
export function renderFrequencyBars(freq: Frequencies, width = 480, rowHeight = 26): string {
  const entries = Object.entries(freq.counts);
  const max = Math.max(1, ...entries.map(([, count]) => count));
  const labelWidth = 110;
  const bars = entries.map(([name, count], index) => {
    const barWidth = ((width - labelWidth - 60) * count) / max;
    const y = index * rowHeight;
    return [
      `<text x="0" y="${y + 17}" class="bar-label">${escapeHtml(name)}</text>`,
      `<rect x="${labelWidth}" y="${y + 4}" width="${barWidth.toFixed(1)}" height="${rowHeight - 8}" data-category="${escapeHtml(name)}" data-count="${count}"></rect>`,
      `<text x="${labelWidth + barWidth + 6}" y="${y + 17}" class="bar-value">${count}</text>`,
    ].join("");
  });
  const height = entries.length * rowHeight;
  return `<svg class="freq-bars" viewBox="0 0 ${width} ${height}" role="img">${bars.join("")}</svg>`;
}

export function renderAgreement(stats: AgreementStats): string {
  const [lo, hi] = stats.kappa_ci95;
  return [
    `<table class="agreement"><tbody>`,
    `<tr><td>Annotators</td><td>${escapeHtml(stats.a)} vs ${escapeHtml(stats.b)} (round ${stats.round})</td></tr>`,
    `<tr><td>Items</td><td>${stats.n_items}</td></tr>`,
    `<tr><td>Agreement</td><td>${(stats.percent_agreement * 100).toFixed(2)}% (${stats.n_agree}/${stats.n_items})</td></tr>`,
    `<tr><td>Cohen's kappa</td><td>${stats.kappa.toFixed(4)} [${lo.toFixed(4)}, ${hi.toFixed(4)}]</td></tr>`,
    `</tbody></table>`,
  ].join("");
}
