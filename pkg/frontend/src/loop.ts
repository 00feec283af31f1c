/** Fixed-cadence interaction loop: every period it posts the currently held
 * action and applies the response. At most one step is ever in flight; if
 * the service is still working when the next tick fires, that tick is
 * skipped rather than queued, honoring the server's serialized-step
 * contract. A failed step pauses the loop with the error on screen. */

import { ApiError, Client } from "./api.js";
import { decodeB64Png, RawImage } from "./png.js";
import { applyOracleStep, applyStep, pauseWith, ViewState } from "./view.js";

export const TICK_MS = 500; // 2 Hz, the shared control rate

export interface LoopDeps {
  client: Client;
  getAction(): number[];
  onState(v: ViewState): void;
  decode?(b64: string): Promise<RawImage>;
  now?(): number;
}

export class TickLoop {
  state: ViewState;
  private timer: ReturnType<typeof setInterval> | null = null;
  private inFlight = false;
  private readonly decode: (b64: string) => Promise<RawImage>;
  private readonly now: () => number;

  constructor(private readonly deps: LoopDeps, initial: ViewState,
              readonly periodMs: number = TICK_MS) {
    this.state = initial;
    this.decode = deps.decode ?? decodeB64Png;
    this.now = deps.now ?? (() => performance.now());
  }

  start(): void {
    if (this.timer === null) {
      this.timer = setInterval(() => void this.tick(), this.periodMs);
    }
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  private publish(v: ViewState): void {
    this.state = v;
    this.deps.onState(v);
  }

  /** One cadence beat. Exposed for tests and for single-step UIs. */
  async tick(): Promise<void> {
    if (this.inFlight || this.state.paused) return;
    this.inFlight = true;
    try {
      const action = this.deps.getAction();
      const resp = await this.deps.client.step(this.state.sessionId, action);
      let next = applyStep(this.state, resp, await this.decode(resp.frame),
                           this.now());
      if (next.sideBySide) {
        const oracle = await this.deps.client.oracleStep(next.sessionId,
                                                         action);
        next = applyOracleStep(next, await this.decode(oracle.frame));
      }
      this.publish(next);
    } catch (e) {
      const msg = e instanceof ApiError
        ? `${e.code}: ${e.message}` : String(e);
      this.publish(pauseWith(this.state, msg));
    } finally {
      this.inFlight = false;
    }
  }
}
