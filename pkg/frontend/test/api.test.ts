import { afterEach, describe, expect, it, vi } from "vitest";

import { ApiError, ReviewApi } from "../src/api.js";

interface Recorded {
  url: string;
  init?: RequestInit;
}

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

// Replace global fetch with a recorder so each test can inspect the
// exact request the client produced.
function stubFetch(handler: (url: string, init?: RequestInit) => Response | Promise<Response>): Recorded[] {
  const calls: Recorded[] = [];
  vi.stubGlobal("fetch", (url: string, init?: RequestInit) => {
    calls.push({ url, init });
    return Promise.resolve(handler(url, init));
  });
  return calls;
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe("ReviewApi", () => {
  it("lists sessions from the index endpoint", async () => {
    const calls = stubFetch(() => jsonResponse({ sessions: ["sess-a", "sess-b"] }));
    const api = new ReviewApi();
    expect(await api.listSessions()).toEqual(["sess-a", "sess-b"]);
    expect(calls).toHaveLength(1);
    expect(calls[0].url).toBe("/sessions");
    expect(calls[0].init).toBeUndefined();
  });

  it("encodes session and annotator into the next-pair url", async () => {
    const state = { done: false, judged: 0, total: 5, pair: null };
    const calls = stubFetch(() => jsonResponse(state));
    const api = new ReviewApi();
    await api.next("sess/42", "ann one&two");
    expect(calls[0].url).toBe("/session/sess%2F42/next?annotator=ann%20one%26two");
  });

  it("posts verdicts as json", async () => {
    const calls = stubFetch(() => jsonResponse({ ok: true, judged: 1, total: 5 }));
    const api = new ReviewApi();
    const ack = await api.submit("sess-a", "casey", "pair-3", "left");
    expect(ack.judged).toBe(1);
    const init = calls[0].init!;
    expect(calls[0].url).toBe("/session/sess-a/verdict");
    expect(init.method).toBe("POST");
    expect((init.headers as Record<string, string>)["Content-Type"]).toBe("application/json");
    expect(JSON.parse(init.body as string)).toEqual({
      annotator: "casey",
      pair_id: "pair-3",
      choice: "left",
    });
  });

  it("prefixes the configured base url", async () => {
    const calls = stubFetch(() => jsonResponse(reportFixture()));
    const api = new ReviewApi("http://localhost:8100");
    await api.report("sess-a");
    expect(calls[0].url).toBe("http://localhost:8100/session/sess-a/report");
  });

  it("surfaces the server error body", async () => {
    stubFetch(() => jsonResponse({ error: "already judged" }, 409));
    const api = new ReviewApi();
    const err = await api.submit("sess-a", "casey", "pair-3", "left").catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(409);
    expect((err as ApiError).message).toBe("already judged");
  });

  it("falls back to a status message when the error body is not json", async () => {
    stubFetch(() => new Response("bad gateway", { status: 502 }));
    const api = new ReviewApi();
    const err = await api.listSessions().catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(502);
    expect((err as ApiError).message).toBe("request failed with status 502");
  });

  it("wraps a network failure as status zero", async () => {
    vi.stubGlobal("fetch", () => Promise.reject(new TypeError("fetch failed")));
    const api = new ReviewApi();
    const err = await api.next("sess-a", "casey").catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(0);
    expect((err as ApiError).message).toContain("cannot reach the review service");
  });
});

function reportFixture() {
  return {
    session_id: "sess-a",
    methods: ["wording-one", "wording-two"],
    verdict_count: 0,
    pooled: { counts: {}, ties: 0, non_tie: 0, percentages: {} },
    per_annotator: {},
    majority_per_pair: { counts: {}, split_pairs: 0, decided_pairs: 0, percentages: {} },
    agreement: {
      pairs_with_multiple_judgments: 0,
      unanimous_pairs: 0,
      unanimous_fraction: null,
    },
  };
}
