// Browser entry: wires the canvas, tool buttons, and the WebSocket session.

import { SessionClient, WsTransport } from "./client.js";
import type { Vec } from "./protocol.js";
import { defaultView, draw } from "./render.js";
import type { SceneState, Setpoint } from "./state.js";

type Tool = "obstacle" | "via" | "none";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el as T;
};

const canvas = $<HTMLCanvasElement>("scene");
const ctx = canvas.getContext("2d")!;
const statusEl = $<HTMLSpanElement>("status");
const banner = $<HTMLDivElement>("banner");
const view = defaultView();

let client: SessionClient | null = null;
let tool: Tool = "none";
let pendingSetpoints: Setpoint[] = [];
let shown = 0;

function canvasToWorld(ev: MouseEvent): Vec {
  const rect = canvas.getBoundingClientRect();
  const fx = (ev.clientX - rect.left) / rect.width;
  const fy = 1 - (ev.clientY - rect.top) / rect.height;
  return [
    view.lo[0] + fx * (view.hi[0] - view.lo[0]),
    view.lo[1] + fy * (view.hi[1] - view.lo[1]),
  ];
}

function render(state: SceneState): void {
  // playback speed throttles how fast queued setpoints appear
  const visible: SceneState = {
    ...state,
    committed: state.committed.slice(0, Math.max(1, shown)),
  };
  draw(ctx, visible, view);
  statusEl.textContent = `${state.status}` +
    (state.lastError ? ` — ${state.lastError}` : "") +
    (state.metrics ? ` — done in ${(state.metrics as any).steps} steps` : "");
}

function tick(): void {
  if (client) {
    const total = client.state.committed.length;
    const rate = client.state.playbackRate;
    shown = Math.min(total, shown + Math.max(1, Math.round(rate)));
    render(client.state);
  }
  requestAnimationFrame(tick);
}
requestAnimationFrame(tick);

$<HTMLButtonElement>("connect").onclick = async () => {
  const url = $<HTMLInputElement>("server-url").value;
  const transport = new WsTransport(url);
  await transport.ready();
  client = new SessionClient(transport);
  client.subscribe((state) => {
    pendingSetpoints = state.committed;
    void pendingSetpoints;
  });
  client.onDisconnect(() => {
    banner.hidden = false;
    banner.textContent = "connection lost — committed prefix kept; reconnect to start a new session";
  });
  banner.hidden = true;
  statusEl.textContent = "connected";
};

$<HTMLButtonElement>("start").onclick = () => {
  if (!client) return;
  const p = (id: string): Vec =>
    $<HTMLInputElement>(id).value.split(",").map((v) => parseFloat(v.trim()));
  shown = 1;
  client.startSession(p("start-point"), p("goal-point"), {
    T: parseInt($<HTMLInputElement>("horizon").value, 10),
    temperature: parseFloat($<HTMLInputElement>("temperature").value),
    seed: parseInt($<HTMLInputElement>("seed").value, 10),
  });
};

$<HTMLButtonElement>("pause").onclick = () => client?.pause();
$<HTMLButtonElement>("resume").onclick = () => client?.resume();
$<HTMLButtonElement>("reset").onclick = () => {
  shown = 1;
  client?.reset();
};

$<HTMLSelectElement>("tool").onchange = (ev) => {
  tool = (ev.target as HTMLSelectElement).value as Tool;
};

$<HTMLInputElement>("speed").oninput = (ev) => {
  if (client) {
    client.state = { ...client.state, playbackRate: parseFloat((ev.target as HTMLInputElement).value) };
  }
};

$<HTMLButtonElement>("set-vel-bound").onclick = () => {
  const v = parseFloat($<HTMLInputElement>("vel-limit").value);
  client?.setBounds({ type: "velocity", v_min: -v, v_max: v });
};

let dragStart: Vec | null = null;
canvas.onmousedown = (ev) => {
  if (tool === "obstacle") dragStart = canvasToWorld(ev);
};
canvas.onmouseup = (ev) => {
  if (!client) return;
  const pt = canvasToWorld(ev);
  if (tool === "obstacle" && dragStart) {
    const r = Math.hypot(pt[0] - dragStart[0], pt[1] - dragStart[1]);
    client.placeObstacle(dragStart, Math.max(r, 0.02), 200.0);
    dragStart = null;
  } else if (tool === "via") {
    const s = parseInt($<HTMLInputElement>("via-step").value, 10);
    client.placeVia(s, pt, 0.02);
  }
};
