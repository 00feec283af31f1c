/** Pure view-state reducers. Everything shown on screen is a function of
 * server responses, so a refreshed page only needs to reconnect; nothing is
 * reconstructed from client-side bookkeeping. */

import type { DomainInfo, SessionResponse, StepResponse } from "./api.js";
import type { RawImage } from "./png.js";
import { psnr } from "./psnr.js";

export const FPS_WINDOW = 8;

export interface ViewState {
  sessionId: string;
  domain: DomainInfo;
  frame: RawImage | null;
  oracleFrame: RawImage | null;
  stepIndex: number;
  latencyMs: number | null;
  /** Acknowledgement timestamps of recent steps, for the rolling FPS. */
  ticks: number[];
  fps: number | null;
  paused: boolean;
  sideBySide: boolean;
  oracleBacked: boolean;
  psnrDb: number | null;
  error: string | null;
}

export function fromSession(resp: SessionResponse, prompt: RawImage,
                            oracleBacked: boolean): ViewState {
  return {
    sessionId: resp.session_id,
    domain: resp.domain,
    frame: prompt,
    oracleFrame: null,
    stepIndex: resp.step_index,
    latencyMs: null,
    ticks: [],
    fps: null,
    paused: false,
    sideBySide: false,
    oracleBacked,
    psnrDb: null,
    error: null,
  };
}

function rollingFps(ticks: number[]): number | null {
  if (ticks.length < 2) return null;
  const span = ticks[ticks.length - 1] - ticks[0];
  return span > 0 ? (1000 * (ticks.length - 1)) / span : null;
}

function withPsnr(v: ViewState): ViewState {
  if (v.frame && v.oracleFrame) {
    return { ...v, psnrDb: psnr(v.frame.rgb, v.oracleFrame.rgb) };
  }
  return { ...v, psnrDb: null };
}

export function applyStep(v: ViewState, resp: StepResponse, frame: RawImage,
                          now: number): ViewState {
  const ticks = [...v.ticks, now].slice(-FPS_WINDOW);
  return withPsnr({
    ...v,
    frame,
    stepIndex: resp.step_index,
    latencyMs: resp.latency_ms,
    ticks,
    fps: rollingFps(ticks),
  });
}

export function applyOracleStep(v: ViewState, frame: RawImage): ViewState {
  return withPsnr({ ...v, oracleFrame: frame });
}

export function pauseWith(v: ViewState, error: string | null): ViewState {
  return { ...v, paused: true, error };
}

export function setPaused(v: ViewState, paused: boolean): ViewState {
  return { ...v, paused, error: paused ? v.error : null };
}

export function canSideBySide(v: ViewState): boolean {
  return v.oracleBacked;
}

export function toggleSideBySide(v: ViewState): ViewState {
  if (!canSideBySide(v)) return v;
  const on = !v.sideBySide;
  return withPsnr({ ...v, sideBySide: on,
                    oracleFrame: on ? v.oracleFrame : null });
}
