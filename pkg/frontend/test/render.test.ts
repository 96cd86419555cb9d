import { readFileSync, readdirSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { describe, expect, it } from "vitest";

import type { SessionReport } from "../src/api.js";
import type { Screen } from "../src/controller.js";
import { escapeHtml, renderDone, renderReport, renderScreen, renderStart } from "../src/render.js";

function judgeScreen(overrides: Partial<Extract<Screen, { kind: "judge" }>> = {}): Screen {
  return {
    kind: "judge",
    sessionId: "sess-a",
    annotator: "casey",
    state: {
      done: false,
      judged: 3,
      total: 10,
      pair: {
        pair_id: "pair-7",
        context: "the post under review",
        left: "first candidate wording",
        right: "second candidate wording",
      },
    },
    busy: false,
    notice: null,
    ...overrides,
  };
}

function reportFixture(): SessionReport {
  return {
    session_id: "sess-a",
    methods: ["wording-one", "wording-two"],
    verdict_count: 20,
    pooled: {
      counts: { "wording-two": 3, "wording-one": 17 },
      ties: 2,
      non_tie: 20,
      percentages: { "wording-two": 15.0, "wording-one": 85.0 },
    },
    per_annotator: {},
    majority_per_pair: {
      counts: { "wording-one": 9, "wording-two": 1 },
      split_pairs: 1,
      decided_pairs: 10,
      percentages: { "wording-one": 90.0, "wording-two": 10.0 },
    },
    agreement: {
      pairs_with_multiple_judgments: 10,
      unanimous_pairs: 5,
      unanimous_fraction: 0.5,
    },
  };
}

describe("escapeHtml", () => {
  it("escapes markup characters", () => {
    expect(escapeHtml(`<b a="x">&`)).toBe("&lt;b a=&quot;x&quot;&gt;&amp;");
  });

  it("leaves ordinary text alone", () => {
    expect(escapeHtml("plain text, no markup")).toBe("plain text, no markup");
  });
});

describe("renderStart", () => {
  it("offers a dropdown when sessions exist", () => {
    const html = renderStart(["sess-a", "sess-b"], null);
    expect(html).toContain('<select id="session-select">');
    expect(html).toContain('<option value="sess-a">sess-a</option>');
    expect(html).toContain('id="annotator-input"');
    expect(html).toContain('data-action="begin"');
  });

  it("falls back to a text field with no sessions", () => {
    const html = renderStart([], null);
    expect(html).not.toContain("<select");
    expect(html).toContain('placeholder="session id"');
  });

  it("escapes session ids and notices", () => {
    const html = renderStart([`<x>&"y"`], `bad <news>`);
    expect(html).not.toContain("<x>");
    expect(html).toContain("&lt;x&gt;&amp;&quot;y&quot;");
    expect(html).toContain("bad &lt;news&gt;");
  });
});

describe("judge screen", () => {
  it("shows progress, context and both candidates", () => {
    const html = renderScreen(judgeScreen());
    expect(html).toContain("Judged 3 of 10");
    expect(html).toContain("the post under review");
    expect(html).toContain("first candidate wording");
    expect(html).toContain("second candidate wording");
    expect(html).toContain('data-action="choose-left"');
    expect(html).toContain('data-action="choose-right"');
    expect(html).toContain('data-action="choose-tie"');
  });

  it("disables the buttons while a submission is in flight", () => {
    const idle = renderScreen(judgeScreen());
    expect(idle).not.toContain("disabled");
    const busy = renderScreen(judgeScreen({ busy: true }));
    expect(busy.match(/disabled/g)).toHaveLength(3);
  });

  it("neutralises hostile candidate text", () => {
    const screen = judgeScreen();
    const judge = screen as Extract<Screen, { kind: "judge" }>;
    judge.state.pair!.left = `<script>alert(1)</script>`;
    judge.state.pair!.context = `<img src=x onerror=steal()>`;
    const html = renderScreen(screen);
    expect(html).not.toContain("<script");
    expect(html).not.toContain("<img");
    expect(html).toContain("&lt;script&gt;alert(1)&lt;/script&gt;");
  });

  it("renders the notice when present", () => {
    const html = renderScreen(judgeScreen({ notice: "ties are disabled for this session" }));
    expect(html).toContain('class="notice"');
    expect(html).toContain("ties are disabled for this session");
  });
});

describe("renderDone", () => {
  it("summarises progress and links to the report", () => {
    const html = renderDone(8, 8, "sess-a");
    expect(html).toContain("8 of 8");
    expect(html).toContain('data-action="report" data-session="sess-a"');
    expect(html).toContain('data-action="back"');
  });

  it("escapes the session id attribute", () => {
    const html = renderDone(1, 1, `s"1`);
    expect(html).toContain('data-session="s&quot;1"');
  });
});

describe("renderReport", () => {
  it("tabulates pooled and majority tallies under server-chosen names", () => {
    const html = renderReport(reportFixture());
    expect(html).toContain("20 verdicts");
    expect(html).toContain("wording-one");
    expect(html).toContain("85.0%");
    expect(html).toContain("15.0%");
    expect(html).toContain("2 ties excluded");
    expect(html).toContain("90.0%");
    expect(html).toContain("1 split pairs of 10 decided");
    expect(html).toContain("unanimity 50.0%");
  });

  it("sorts names so row order is stable", () => {
    const html = renderReport(reportFixture());
    expect(html.indexOf("wording-one")).toBeLessThan(html.indexOf("wording-two"));
  });

  it("shows n/a when no pair was judged twice", () => {
    const report = reportFixture();
    report.agreement.unanimous_fraction = null;
    expect(renderReport(report)).toContain("unanimity n/a");
  });
});

describe("renderScreen dispatch", () => {
  it("covers the loading screen", () => {
    expect(renderScreen({ kind: "loading" })).toContain("Loading");
  });
});

describe("blinding", () => {
  // The client must not be able to leak which method produced a
  // candidate: no identifier in the payload types, no identifier
  // hard-coded anywhere in the shipped page.
  const forbidden = [
    "method_a",
    "method_b",
    "method-alpha",
    "method-beta",
    "rule_a",
    "rule_b",
    "anchored",
    "provenance",
    "origin",
  ];

  it("keeps method identifiers out of the client source", () => {
    const here = dirname(fileURLToPath(import.meta.url));
    const srcDir = join(here, "..", "src");
    const files = readdirSync(srcDir)
      .filter((name) => name.endsWith(".ts"))
      .map((name) => join(srcDir, name));
    files.push(join(here, "..", "public", "index.html"));
    expect(files.length).toBeGreaterThanOrEqual(5);
    for (const file of files) {
      const text = readFileSync(file, "utf-8").toLowerCase();
      for (const token of forbidden) {
        expect(text, `${file} mentions ${token}`).not.toContain(token);
      }
    }
  });

  it("renders a judge screen with only positional labels", () => {
    const html = renderScreen(judgeScreen()).toLowerCase();
    for (const token of forbidden) {
      expect(html).not.toContain(token);
    }
    expect(html).toContain("left");
    expect(html).toContain("right");
  });
});
