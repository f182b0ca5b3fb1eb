// Canvas renderer: committed path, obstacles as circles, via markers with
// step labels, box bounds as shaded exteriors. 3-D scenes pick a coordinate
// plane to project onto.

import type { ConstraintEntry, SceneState } from "./state.js";
import type { Vec } from "./protocol.js";

export interface View {
  lo: Vec; // workspace corner mapped to canvas origin
  hi: Vec;
  axes: [number, number]; // projection plane for d >= 3
}

export function defaultView(): View {
  return { lo: [0, 0], hi: [1, 1], axes: [0, 1] };
}

function toCanvas(v: Vec, view: View, w: number, h: number): [number, number] {
  const [ax, ay] = view.axes;
  const px = ((v[ax] - view.lo[0]) / (view.hi[0] - view.lo[0])) * w;
  const py = h - ((v[ay] - view.lo[1]) / (view.hi[1] - view.lo[1])) * h;
  return [px, py];
}

function scaleLen(r: number, view: View, w: number): number {
  return (r / (view.hi[0] - view.lo[0])) * w;
}

export function draw(ctx: CanvasRenderingContext2D, state: SceneState, view: View): void {
  const { width: w, height: h } = ctx.canvas;
  ctx.clearRect(0, 0, w, h);
  ctx.fillStyle = "#10131a";
  ctx.fillRect(0, 0, w, h);

  for (const c of state.constraints) {
    drawConstraint(ctx, c, view, w, h);
  }

  if (state.lastBeams) {
    ctx.fillStyle = "rgba(120, 160, 255, 0.35)";
    for (const cand of state.lastBeams) {
      const [px, py] = toCanvas(cand, view, w, h);
      ctx.fillRect(px - 1.5, py - 1.5, 3, 3);
    }
  }

  if (state.committed.length > 0) {
    ctx.strokeStyle = "#6ee7a8";
    ctx.lineWidth = 2;
    ctx.beginPath();
    state.committed.forEach((sp, i) => {
      const [px, py] = toCanvas(sp.x, view, w, h);
      if (i === 0) ctx.moveTo(px, py);
      else ctx.lineTo(px, py);
    });
    ctx.stroke();
    ctx.fillStyle = "#6ee7a8";
    for (const sp of state.committed) {
      const [px, py] = toCanvas(sp.x, view, w, h);
      ctx.fillRect(px - 1.5, py - 1.5, 3, 3);
    }
  }

  if (state.start) marker(ctx, state.start, view, w, h, "#ffd166", "S");
  if (state.goal) marker(ctx, state.goal, view, w, h, "#ef6461", "G");
}

function marker(
  ctx: CanvasRenderingContext2D, v: Vec, view: View, w: number, h: number,
  color: string, label: string,
): void {
  const [px, py] = toCanvas(v, view, w, h);
  ctx.fillStyle = color;
  ctx.beginPath();
  ctx.arc(px, py, 6, 0, 2 * Math.PI);
  ctx.fill();
  ctx.fillStyle = "#10131a";
  ctx.font = "9px sans-serif";
  ctx.textAlign = "center";
  ctx.textBaseline = "middle";
  ctx.fillText(label, px, py);
}

function drawConstraint(
  ctx: CanvasRenderingContext2D, c: ConstraintEntry, view: View, w: number, h: number,
): void {
  const alpha = c.pending ? 0.35 : 0.8;
  const spec = c.spec;
  if (spec.type === "sphere") {
    const [px, py] = toCanvas(spec.center, view, w, h);
    ctx.strokeStyle = `rgba(239, 100, 97, ${alpha})`;
    ctx.fillStyle = `rgba(239, 100, 97, ${alpha * 0.25})`;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    ctx.arc(px, py, scaleLen(spec.radius, view, w), 0, 2 * Math.PI);
    ctx.fill();
    ctx.stroke();
  } else if (spec.type === "via") {
    const [px, py] = toCanvas(spec.point, view, w, h);
    ctx.strokeStyle = `rgba(255, 209, 102, ${alpha})`;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    ctx.moveTo(px - 6, py);
    ctx.lineTo(px + 6, py);
    ctx.moveTo(px, py - 6);
    ctx.lineTo(px, py + 6);
    ctx.stroke();
    ctx.fillStyle = `rgba(255, 209, 102, ${alpha})`;
    ctx.font = "10px sans-serif";
    ctx.textAlign = "left";
    ctx.fillText(`s=${spec.s}`, px + 8, py - 4);
  } else if (spec.type === "box") {
    const [x0, y0] = toCanvas(spec.lo, view, w, h);
    const [x1, y1] = toCanvas(spec.hi, view, w, h);
    ctx.fillStyle = `rgba(110, 231, 168, ${alpha * 0.12})`;
    ctx.fillRect(0, 0, w, h);
    ctx.clearRect(Math.min(x0, x1), Math.min(y0, y1), Math.abs(x1 - x0), Math.abs(y1 - y0));
    ctx.strokeStyle = `rgba(110, 231, 168, ${alpha})`;
    ctx.strokeRect(Math.min(x0, x1), Math.min(y0, y1), Math.abs(x1 - x0), Math.abs(y1 - y0));
  }
  // velocity/accel bounds have no spatial footprint; badges are HTML-side
}
