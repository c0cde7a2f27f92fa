import { ApiError, ReviewApi } from "./api.js";
import type { LiveStats, ReviewCard, Verdict } from "./types.js";

export type Phase = "idle" | "loading" | "labeling" | "complete";

export interface ControllerState {
  phase: Phase;
  sessionId: string | null;
  card: ReviewCard | null;
  stats: LiveStats | null;
  banner: string | null;
  submitting: boolean;
}

export type SubmitOutcome = "submitted" | "ignored" | "duplicate" | "failed";

type Listener = (state: ControllerState) => void;

/**
 * Session flow state machine, free of any DOM knowledge.
 *
 * Statistics always come from the API verbatim. A submission in flight
 * blocks further submissions, so a double-click produces exactly one POST.
 */
export class ReviewController {
  readonly state: ControllerState = {
    phase: "idle",
    sessionId: null,
    card: null,
    stats: null,
    banner: null,
    submitting: false,
  };

  private listeners: Listener[] = [];

  constructor(
    private readonly api: ReviewApi,
    private readonly reviewer: string = "anonymous",
  ) {}

  subscribe(listener: Listener): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }

  async start(sessionId: string): Promise<void> {
    this.state.sessionId = sessionId;
    this.state.phase = "loading";
    this.state.banner = null;
    this.notify();
    try {
      await this.refreshStats();
      await this.advance();
    } catch (error) {
      this.state.banner = describe(error);
      this.state.phase = "idle";
      this.notify();
    }
  }

  async refreshStats(): Promise<void> {
    if (!this.state.sessionId) {
      return;
    }
    this.state.stats = await this.api.stats(this.state.sessionId);
    this.notify();
  }

  private async advance(): Promise<void> {
    if (!this.state.sessionId) {
      return;
    }
    const card = await this.api.nextCard(this.state.sessionId, this.reviewer);
    this.state.card = card;
    this.state.phase = card === null ? "complete" : "labeling";
    this.notify();
  }

  async submit(verdict: Verdict): Promise<SubmitOutcome> {
    const { sessionId, card } = this.state;
    if (this.state.submitting || !sessionId || !card) {
      return "ignored";
    }
    this.state.submitting = true;
    this.state.banner = null;
    this.notify();
    try {
      await this.api.submitLabel(sessionId, card.pair_id, verdict, this.reviewer);
      await this.refreshStats();
      await this.advance();
      return "submitted";
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        // Someone already labeled this card; surface it and move on.
        this.state.banner = `Already labeled: ${error.message}`;
        await this.refreshStats();
        await this.advance();
        return "duplicate";
      }
      // Network trouble or server rejection: keep the card, nothing is lost.
      this.state.banner = `Submission failed (${describe(error)}); retry when ready.`;
      this.notify();
      return "failed";
    } finally {
      this.state.submitting = false;
      this.notify();
    }
  }
}

function describe(error: unknown): string {
  if (error instanceof ApiError) {
    return `${error.status}: ${error.message}`;
  }
  return error instanceof Error ? error.message : String(error);
}
