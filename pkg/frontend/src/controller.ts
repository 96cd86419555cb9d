/**
 * Screen state machine, kept free of DOM access so the judging flow can
 * be tested headlessly. Views subscribe through onChange and read
 * `screen`; all transitions happen through the async methods below.
 */

import { ApiError, Choice, NextState, ReviewApi, SessionReport } from "./api.js";

export type Screen =
  | { kind: "loading" }
  | { kind: "start"; sessions: string[]; notice: string | null }
  | {
      kind: "judge";
      sessionId: string;
      annotator: string;
      state: NextState;
      busy: boolean;
      notice: string | null;
    }
  | { kind: "done"; sessionId: string; annotator: string; judged: number; total: number }
  | { kind: "report"; sessionId: string; report: SessionReport };

export class AppController {
  screen: Screen = { kind: "loading" };

  private listeners: Array<() => void> = [];
  private submitting = false;

  constructor(private readonly api: ReviewApi) {}

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private set(screen: Screen): void {
    this.screen = screen;
    for (const listener of this.listeners) listener();
  }

  async init(): Promise<void> {
    try {
      const sessions = await this.api.listSessions();
      this.set({ kind: "start", sessions, notice: null });
    } catch (err) {
      this.set({ kind: "start", sessions: [], notice: describe(err) });
    }
  }

  async begin(sessionId: string, annotator: string): Promise<void> {
    sessionId = sessionId.trim();
    annotator = annotator.trim();
    if (!sessionId || !annotator) {
      if (this.screen.kind === "start") {
        this.set({ ...this.screen, notice: "pick a session and enter your annotator id" });
      }
      return;
    }
    try {
      const state = await this.api.next(sessionId, annotator);
      this.applyNext(sessionId, annotator, state);
    } catch (err) {
      if (this.screen.kind === "start") {
        this.set({ ...this.screen, notice: describe(err) });
      }
    }
  }

  /** Submit the verdict for the pair on screen. Re-entry is a no-op while
   * a submission is in flight, so double clicks cost one request. */
  async choose(choice: Choice): Promise<void> {
    if (this.submitting || this.screen.kind !== "judge" || this.screen.state.pair === null) {
      return;
    }
    const { sessionId, annotator, state } = this.screen;
    const pair = state.pair!;
    this.submitting = true;
    this.set({ ...this.screen, busy: true, notice: null });
    try {
      await this.api.submit(sessionId, annotator, pair.pair_id, choice);
      this.applyNext(sessionId, annotator, await this.api.next(sessionId, annotator));
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // someone already recorded this one; move along
        try {
          this.applyNext(sessionId, annotator, await this.api.next(sessionId, annotator));
        } catch (refreshErr) {
          this.set({ ...this.screen, busy: false, notice: describe(refreshErr) });
        }
      } else {
        this.set({ ...this.screen, busy: false, notice: describe(err) });
      }
    } finally {
      this.submitting = false;
    }
  }

  async showReport(sessionId: string): Promise<void> {
    try {
      const report = await this.api.report(sessionId);
      this.set({ kind: "report", sessionId, report });
    } catch (err) {
      if (this.screen.kind === "start" || this.screen.kind === "judge") {
        this.set({ ...this.screen, notice: describe(err) });
      }
    }
  }

  async backToStart(): Promise<void> {
    await this.init();
  }

  private applyNext(sessionId: string, annotator: string, state: NextState): void {
    if (state.done) {
      this.set({ kind: "done", sessionId, annotator, judged: state.judged, total: state.total });
    } else {
      this.set({ kind: "judge", sessionId, annotator, state, busy: false, notice: null });
    }
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) {
    return err.status > 0 ? `${err.message} (status ${err.status})` : err.message;
  }
  return String(err);
}
