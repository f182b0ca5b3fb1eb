// Wire types for the streaming setpoint service. One JSON object per
// newline-delimited frame (TCP) or per WebSocket text message.

export type Vec = number[];

export type ConstraintSpec =
  | { type: "box"; lo: Vec; hi: Vec }
  | { type: "velocity"; v_min: Vec | number; v_max: Vec | number; dt?: number }
  | { type: "accel"; a_min: Vec | number; a_max: Vec | number; dt?: number }
  | { type: "via"; s: number; point: Vec; sigma: number; mode?: "bridge" | "likelihood" }
  | { type: "sphere"; center: Vec; radius: number; gamma?: number };

export type ClientMsg =
  | {
      type: "start";
      x1: Vec;
      xT: Vec;
      T?: number;
      temperature?: number;
      seed?: number;
      constraints?: ConstraintSpec[];
      debug?: boolean;
    }
  | { type: "add_constraint"; constraint: ConstraintSpec; id?: number }
  | { type: "remove_constraint"; id: number }
  | { type: "pause" }
  | { type: "resume" }
  | { type: "reset" };

export type ServerMsg =
  | { type: "setpoint"; t: number; x: Vec; mu: Vec; sigma: Vec }
  | { type: "beams"; t: number; candidates: Vec[] }
  | { type: "ack"; op: string; id?: number }
  | { type: "done"; metrics: Record<string, unknown> }
  | { type: "error"; code: number; msg: string };

export function encodeLine(msg: ClientMsg): string {
  return JSON.stringify(msg) + "\n";
}

export function parseServerMsg(raw: string): ServerMsg {
  const obj = JSON.parse(raw);
  if (typeof obj !== "object" || obj === null || typeof obj.type !== "string") {
    throw new Error(`malformed server message: ${raw}`);
  }
  return obj as ServerMsg;
}

/** Incremental NDJSON splitter: feed chunks, get complete lines. */
export class LineSplitter {
  private buffer = "";

  push(chunk: string): string[] {
    this.buffer += chunk;
    const lines = this.buffer.split("\n");
    this.buffer = lines.pop() ?? "";
    return lines.filter((l) => l.length > 0);
  }
}
