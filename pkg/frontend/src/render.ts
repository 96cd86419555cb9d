/**
 * HTML string builders for each screen. Pure functions of controller
 * state: no fetches, no globals, nothing here knows where a candidate
 * came from. Interactive elements carry data-action attributes that
 * main.ts binds through one delegated listener.
 */

import { SessionReport, TallyBlock } from "./api.js";
import { Screen } from "./controller.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderScreen(screen: Screen): string {
  switch (screen.kind) {
    case "loading":
      return `<p class="muted">Loading…</p>`;
    case "start":
      return renderStart(screen.sessions, screen.notice);
    case "judge":
      return renderJudge(screen);
    case "done":
      return renderDone(screen.judged, screen.total, screen.sessionId);
    case "report":
      return renderReport(screen.report);
  }
}

function renderNotice(notice: string | null): string {
  return notice ? `<p class="notice">${escapeHtml(notice)}</p>` : "";
}

export function renderStart(sessions: string[], notice: string | null): string {
  const options = sessions
    .map((sid) => `<option value="${escapeHtml(sid)}">${escapeHtml(sid)}</option>`)
    .join("");
  const picker = sessions.length
    ? `<select id="session-select">${options}</select>`
    : `<input id="session-select" type="text" placeholder="session id" />`;
  return `
    <h1>Rule review</h1>
    ${renderNotice(notice)}
    <form id="start-form" data-action="begin">
      <label>Session ${picker}</label>
      <label>Annotator id <input id="annotator-input" type="text" autocomplete="off" /></label>
      <button type="submit">Start judging</button>
    </form>
    <p class="muted">Operators: <button type="button" class="linkish" data-action="report">view results</button>
    for the selected session.</p>
  `;
}

function renderJudge(screen: Extract<Screen, { kind: "judge" }>): string {
  const { state, busy } = screen;
  const pair = state.pair!;
  const disabled = busy ? "disabled" : "";
  return `
    <header class="progress">Judged ${state.judged} of ${state.total}</header>
    ${renderNotice(screen.notice)}
    <section class="context">
      <h2>Content</h2>
      <p>${escapeHtml(pair.context)}</p>
    </section>
    <section class="candidates">
      <article class="candidate">
        <h2>Left</h2>
        <p>${escapeHtml(pair.left)}</p>
        <button data-action="choose-left" ${disabled}>Prefer left</button>
      </article>
      <article class="candidate">
        <h2>Right</h2>
        <p>${escapeHtml(pair.right)}</p>
        <button data-action="choose-right" ${disabled}>Prefer right</button>
      </article>
    </section>
    <footer>
      <button class="linkish" data-action="choose-tie" ${disabled}>No preference</button>
    </footer>
  `;
}

export function renderDone(judged: number, total: number, sessionId: string): string {
  return `
    <h1>All done</h1>
    <p>You judged ${judged} of ${total} pairs. Thank you.</p>
    <p>
      <button data-action="report" data-session="${escapeHtml(sessionId)}">View results</button>
      <button class="linkish" data-action="back">Back to start</button>
    </p>
  `;
}

function tallyRows(block: TallyBlock): string {
  return Object.keys(block.counts)
    .sort()
    .map((name) => {
      const pct = block.percentages[name] ?? 0;
      return `<tr><td>${escapeHtml(name)}</td><td>${block.counts[name]}</td><td>${pct.toFixed(1)}%</td></tr>`;
    })
    .join("");
}

export function renderReport(report: SessionReport): string {
  const majority = report.majority_per_pair;
  const majorityRows = Object.keys(majority.counts)
    .sort()
    .map((name) => {
      const pct = majority.percentages[name] ?? 0;
      return `<tr><td>${escapeHtml(name)}</td><td>${majority.counts[name]}</td><td>${pct.toFixed(1)}%</td></tr>`;
    })
    .join("");
  const agreement = report.agreement;
  const unanimous =
    agreement.unanimous_fraction === null
      ? "n/a"
      : `${(agreement.unanimous_fraction * 100).toFixed(1)}%`;
  return `
    <h1>Results</h1>
    <p class="muted">Session ${escapeHtml(report.session_id)}, ${report.verdict_count} verdicts.</p>
    <h2>Pooled preferences</h2>
    <table>
      <thead><tr><th>Name</th><th>Verdicts</th><th>Share of non-ties</th></tr></thead>
      <tbody>${tallyRows(report.pooled)}</tbody>
    </table>
    <p class="muted">${report.pooled.ties} ties excluded.</p>
    <h2>Majority per pair</h2>
    <table>
      <thead><tr><th>Name</th><th>Pairs won</th><th>Share</th></tr></thead>
      <tbody>${majorityRows}</tbody>
    </table>
    <p class="muted">${majority.split_pairs} split pairs of ${majority.decided_pairs} decided;
    unanimity ${unanimous} over ${agreement.pairs_with_multiple_judgments} multiply judged pairs.</p>
    <p><button class="linkish" data-action="back">Back to start</button></p>
  `;
}
