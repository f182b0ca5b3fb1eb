// Scene state is a pure fold over the (sent, received) message log, so any
// view can be rebuilt by replaying the log. Committed setpoints are
// append-only; constraint edits only ever affect future steps (the server
// enforces that; the fold just mirrors it).

import type { ClientMsg, ConstraintSpec, ServerMsg, Vec } from "./protocol.js";

export type Status = "idle" | "running" | "paused" | "done" | "error";

export interface ConstraintEntry {
  id: number;
  spec: ConstraintSpec;
  pending: boolean; // optimistic until the server acks
  removing: boolean;
}

export interface Setpoint {
  t: number;
  x: Vec;
}

export interface SceneState {
  start: Vec | null;
  goal: Vec | null;
  committed: Setpoint[];
  constraints: ConstraintEntry[];
  status: Status;
  playbackRate: number;
  lastError: string | null;
  lastBeams: Vec[] | null;
  metrics: Record<string, unknown> | null;
}

export type Event =
  | { dir: "sent"; msg: ClientMsg }
  | { dir: "received"; msg: ServerMsg };

export function initialState(): SceneState {
  return {
    start: null,
    goal: null,
    committed: [],
    constraints: [],
    status: "idle",
    playbackRate: 1,
    lastError: null,
    lastBeams: null,
    metrics: null,
  };
}

export function reduce(s: SceneState, e: Event): SceneState {
  if (e.dir === "sent") {
    return reduceSent(s, e.msg);
  }
  return reduceReceived(s, e.msg);
}

function reduceSent(s: SceneState, m: ClientMsg): SceneState {
  switch (m.type) {
    case "start": {
      const inline = (m.constraints ?? []).map((spec, i) => ({
        id: -(i + 1), // inline constraints carry no server id
        spec,
        pending: false,
        removing: false,
      }));
      return {
        ...s,
        start: m.x1,
        goal: m.xT,
        committed: [{ t: 1, x: m.x1 }],
        constraints: inline,
        status: "running",
        lastError: null,
        metrics: null,
      };
    }
    case "add_constraint": {
      const id = m.id ?? -1;
      return {
        ...s,
        constraints: [
          ...s.constraints,
          { id, spec: m.constraint, pending: true, removing: false },
        ],
      };
    }
    case "remove_constraint":
      return {
        ...s,
        constraints: s.constraints.map((c) =>
          c.id === m.id ? { ...c, removing: true, pending: true } : c,
        ),
      };
    case "pause":
    case "resume":
      return s; // status flips on the server's ack
    case "reset":
      return s; // cleared on ack
  }
}

function reduceReceived(s: SceneState, m: ServerMsg): SceneState {
  switch (m.type) {
    case "setpoint": {
      const last = s.committed[s.committed.length - 1];
      if (last && m.t <= last.t) {
        return s; // duplicate/out-of-order frames never rewrite history
      }
      return {
        ...s,
        committed: [...s.committed, { t: m.t, x: m.x }],
        status: s.status === "paused" ? "paused" : "running",
      };
    }
    case "beams":
      return { ...s, lastBeams: m.candidates };
    case "ack":
      switch (m.op) {
        case "add_constraint":
          return {
            ...s,
            constraints: s.constraints.map((c) =>
              c.pending && !c.removing && (c.id === m.id || c.id === -1)
                ? { ...c, id: m.id ?? c.id, pending: false }
                : c,
            ),
          };
        case "remove_constraint":
          return { ...s, constraints: s.constraints.filter((c) => c.id !== m.id) };
        case "pause":
          return { ...s, status: "paused" };
        case "resume":
          return { ...s, status: s.status === "done" ? "done" : "running" };
        case "reset":
          return { ...initialState(), playbackRate: s.playbackRate };
        default:
          return s;
      }
    case "done":
      return { ...s, status: "done", metrics: m.metrics };
    case "error":
      return { ...s, status: "error", lastError: `[${m.code}] ${m.msg}` };
  }
}

export function replay(log: Event[]): SceneState {
  return log.reduce(reduce, initialState());
}
