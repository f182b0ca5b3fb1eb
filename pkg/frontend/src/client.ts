// Session client: one user action = one protocol message; the scene state
// is the fold of everything sent and received (replayable from the log).

import type { ClientMsg, ConstraintSpec, ServerMsg, Vec } from "./protocol.js";
import { encodeLine, LineSplitter, parseServerMsg } from "./protocol.js";
import type { Event, SceneState } from "./state.js";
import { initialState, reduce, replay } from "./state.js";

export interface Transport {
  send(line: string): void;
  onMessage(cb: (raw: string) => void): void;
  onClose(cb: () => void): void;
  close(): void;
}

export class WsTransport implements Transport {
  private ws: WebSocket;
  private splitter = new LineSplitter();
  private messageCb: ((raw: string) => void) | null = null;
  private closeCb: (() => void) | null = null;

  constructor(url: string) {
    this.ws = new WebSocket(url);
    this.ws.onmessage = (ev) => {
      // a frame may carry one JSON object or newline-delimited lines
      const text = String(ev.data);
      const lines = text.includes("\n") ? this.splitter.push(text) : [text];
      for (const line of lines) this.messageCb?.(line);
    };
    this.ws.onclose = () => this.closeCb?.();
    this.ws.onerror = () => this.closeCb?.();
  }

  ready(): Promise<void> {
    if (this.ws.readyState === WebSocket.OPEN) return Promise.resolve();
    return new Promise((resolve, reject) => {
      this.ws.addEventListener("open", () => resolve(), { once: true });
      this.ws.addEventListener("error", () => reject(new Error("connect failed")), { once: true });
    });
  }

  send(line: string): void {
    this.ws.send(line.trimEnd());
  }

  onMessage(cb: (raw: string) => void): void {
    this.messageCb = cb;
  }

  onClose(cb: () => void): void {
    this.closeCb = cb;
  }

  close(): void {
    this.ws.close();
  }
}

export type Listener = (state: SceneState, event: Event) => void;

export class SessionClient {
  state: SceneState = initialState();
  readonly log: Event[] = [];
  private nextConstraintId = 1;
  private listeners: Listener[] = [];
  private closeListeners: (() => void)[] = [];

  constructor(private transport: Transport) {
    transport.onMessage((raw) => {
      this.dispatch({ dir: "received", msg: parseServerMsg(raw) });
    });
    transport.onClose(() => {
      for (const cb of this.closeListeners) cb();
    });
  }

  subscribe(cb: Listener): void {
    this.listeners.push(cb);
  }

  onDisconnect(cb: () => void): void {
    this.closeListeners.push(cb);
  }

  private dispatch(event: Event): void {
    this.log.push(event);
    this.state = reduce(this.state, event);
    for (const cb of this.listeners) cb(this.state, event);
  }

  private send(msg: ClientMsg): void {
    this.dispatch({ dir: "sent", msg });
    this.transport.send(encodeLine(msg));
  }

  startSession(x1: Vec, xT: Vec, opts: { T?: number; temperature?: number; seed?: number; debug?: boolean } = {}): void {
    this.send({ type: "start", x1, xT, constraints: [], ...opts });
  }

  placeObstacle(center: Vec, radius: number, gamma = 50.0): number {
    const id = this.nextConstraintId++;
    this.send({ type: "add_constraint", id, constraint: { type: "sphere", center, radius, gamma } });
    return id;
  }

  placeVia(s: number, point: Vec, sigma = 0.02): number {
    const id = this.nextConstraintId++;
    this.send({ type: "add_constraint", id, constraint: { type: "via", s, point, sigma, mode: "bridge" } });
    return id;
  }

  setBounds(spec: ConstraintSpec): number {
    const id = this.nextConstraintId++;
    this.send({ type: "add_constraint", id, constraint: spec });
    return id;
  }

  removeConstraint(id: number): void {
    this.send({ type: "remove_constraint", id });
  }

  pause(): void {
    this.send({ type: "pause" });
  }

  resume(): void {
    this.send({ type: "resume" });
  }

  reset(): void {
    this.send({ type: "reset" });
  }

  /** Rebuild state from the local log (e.g. after a reconnect banner). */
  replayLog(): SceneState {
    this.state = replay(this.log);
    return this.state;
  }

  close(): void {
    this.transport.close();
  }
}

export type { SceneState, Event, ServerMsg, ClientMsg, ConstraintSpec, Vec };
