/** Page wiring: connect panel, canvases, keyboard and slider capture, and
 * the readouts. All simulator state lives on the server; this file only
 * routes inputs into the tick loop and paints what comes back. */

import { ApiError, Client, DomainInfo } from "./api.js";
import { composeAction, layoutFor, sliderDefault } from "./controls.js";
import { TickLoop } from "./loop.js";
import { decodeB64Png } from "./png.js";
import { drawFrame } from "./render.js";
import { canSideBySide, fromSession, setPaused, toggleSideBySide,
         ViewState } from "./view.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const held = new Set<string>();
const sliders = new Map<number, number>();
let loop: TickLoop | null = null;
let client: Client | null = null;

function banner(message: string | null): void {
  const el = $("banner");
  el.textContent = message ?? "";
  el.classList.toggle("hidden", message === null);
}

function renderState(v: ViewState): void {
  if (v.frame) drawFrame($("learned"), v.frame);
  const sideOn = v.sideBySide && v.oracleFrame !== null;
  $("oracle-fig").classList.toggle("hidden", !v.sideBySide);
  if (sideOn && v.oracleFrame) drawFrame($("oracle"), v.oracleFrame);
  $("psnr").textContent =
    v.psnrDb === null ? "" : `PSNR ${v.psnrDb.toFixed(2)} dB`;
  $("step").textContent = String(v.stepIndex);
  $("latency").textContent =
    v.latencyMs === null ? "-" : v.latencyMs.toFixed(1);
  $("fps").textContent = v.fps === null ? "-" : v.fps.toFixed(2);
  $("paused-flag").textContent = v.paused ? "paused" : "";
  ($("pause") as HTMLButtonElement).textContent =
    v.paused ? "Resume" : "Pause";
  ($("side") as HTMLButtonElement).disabled = !canSideBySide(v);
  banner(v.error);
}

function buildSliders(domain: DomainInfo): void {
  const box = $("sliders");
  box.textContent = "";
  sliders.clear();
  for (const dim of layoutFor(domain.action_dim).sliderDims) {
    const [lo, hi] = domain.action_bounds[dim];
    const start = sliderDefault([lo, hi]);
    sliders.set(dim, start);
    const label = document.createElement("label");
    const value = document.createElement("span");
    value.textContent = start.toFixed(2);
    const input = document.createElement("input");
    input.type = "range";
    input.min = String(lo);
    input.max = String(hi);
    input.step = "0.01";
    input.value = String(start);
    input.addEventListener("input", () => {
      sliders.set(dim, Number(input.value));
      value.textContent = Number(input.value).toFixed(2);
    });
    label.append(`a[${dim}] `, input, value);
    box.append(label);
  }
}

async function connect(): Promise<void> {
  const base = ($("base") as HTMLInputElement).value;
  const domain = Number(($("domain") as HTMLSelectElement).value);
  const seed = Number(($("seed") as HTMLInputElement).value) || 0;
  client = new Client(base);
  banner(null);
  try {
    const resp = await client.createSession(domain, seed);
    const prompt = await decodeB64Png(resp.frames[resp.frames.length - 1]);
    buildSliders(resp.domain);
    const c = client;
    loop?.stop();
    loop = new TickLoop({
      client: c,
      getAction: () => composeAction(resp.domain, held, sliders),
      onState: renderState,
    }, fromSession(resp, prompt, true));
    renderState(loop.state);
    $("stage").classList.remove("hidden");
    loop.start();
  } catch (e) {
    banner(e instanceof ApiError ? `${e.code}: ${e.message}` : String(e));
  }
}

async function disconnect(): Promise<void> {
  loop?.stop();
  const sid = loop?.state.sessionId;
  loop = null;
  $("stage").classList.add("hidden");
  if (client && sid) {
    try {
      await client.deleteSession(sid);
    } catch {
      // the session will idle out server-side anyway
    }
  }
}

async function init(): Promise<void> {
  const baseInput = $("base") as HTMLInputElement;
  baseInput.value = baseInput.value ||
    (location.protocol.startsWith("http")
      ? `${location.protocol}//${location.hostname}:8000`
      : "http://127.0.0.1:8000");
  ($("seed") as HTMLInputElement).value =
    String(Math.floor(Math.random() * 10_000));

  $("refresh-domains").addEventListener("click", () => void loadDomains());
  $("connect").addEventListener("click", () => void connect());
  $("disconnect").addEventListener("click", () => void disconnect());
  $("pause").addEventListener("click", () => {
    if (!loop) return;
    loop.state = setPaused(loop.state, !loop.state.paused);
    renderState(loop.state);
  });
  $("side").addEventListener("click", () => {
    if (!loop) return;
    loop.state = toggleSideBySide(loop.state);
    renderState(loop.state);
  });

  window.addEventListener("keydown", (e) => {
    if (e.key.startsWith("Arrow")) {
      held.add(e.key);
      e.preventDefault();
    }
  });
  window.addEventListener("keyup", (e) => held.delete(e.key));
  window.addEventListener("blur", () => held.clear());

  async function loadDomains(): Promise<void> {
    const select = $("domain") as HTMLSelectElement;
    banner(null);
    try {
      const domains = await new Client(baseInput.value).listDomains();
      select.textContent = "";
      for (const d of domains) {
        const opt = document.createElement("option");
        opt.value = String(d.id);
        opt.textContent = `${d.name} (${d.action_dim}-dof)`;
        select.append(opt);
      }
    } catch (e) {
      banner(e instanceof ApiError
        ? `${e.code}: ${e.message}` : String(e));
    }
  }
  await loadDomains();
}

void init();
