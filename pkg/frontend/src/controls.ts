/** Maps held keys and slider positions onto an action vector. The first two
 * action dimensions ride the arrow keys (x = column grows right, y = row
 * grows down, matching the renderer), any further dimensions get sliders.
 * Composed actions always sit inside the domain bounds. */

import type { DomainInfo } from "./api.js";

export interface KeyAxis {
  dim: number;
  negKey: string; // KeyboardEvent.key that drives the dimension negative
  posKey: string;
}

export interface ControlLayout {
  keyAxes: KeyAxis[];
  sliderDims: number[];
}

export function layoutFor(actionDim: number): ControlLayout {
  const keyAxes: KeyAxis[] = [];
  if (actionDim >= 1) {
    keyAxes.push({ dim: 0, negKey: "ArrowLeft", posKey: "ArrowRight" });
  }
  if (actionDim >= 2) {
    keyAxes.push({ dim: 1, negKey: "ArrowUp", posKey: "ArrowDown" });
  }
  const sliderDims = [];
  for (let d = keyAxes.length; d < actionDim; d++) sliderDims.push(d);
  return { keyAxes, sliderDims };
}

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(Math.max(v, lo), hi);
}

/** Neutral slider position: zero when the bounds allow it. */
export function sliderDefault(bounds: [number, number]): number {
  return clamp(0, bounds[0], bounds[1]);
}

/** Current action under held keys and slider values. No input composes the
 * zero action (clamped into bounds); a held key pushes its dimension to the
 * corresponding bound; opposite keys cancel. */
export function composeAction(domain: DomainInfo, held: ReadonlySet<string>,
                              sliders: ReadonlyMap<number, number>): number[] {
  const layout = layoutFor(domain.action_dim);
  const action: number[] = [];
  for (let d = 0; d < domain.action_dim; d++) {
    const [lo, hi] = domain.action_bounds[d];
    action.push(clamp(0, lo, hi));
  }
  for (const axis of layout.keyAxes) {
    const [lo, hi] = domain.action_bounds[axis.dim];
    let v = 0;
    if (held.has(axis.negKey)) v += lo;
    if (held.has(axis.posKey)) v += hi;
    action[axis.dim] = clamp(v, lo, hi);
  }
  for (const d of layout.sliderDims) {
    const [lo, hi] = domain.action_bounds[d];
    action[d] = clamp(sliders.get(d) ?? sliderDefault([lo, hi]), lo, hi);
  }
  return action;
}
