import { describe, expect, it } from "vitest";

import { encodeLine, LineSplitter, parseServerMsg } from "../src/protocol.js";

describe("ndjson framing", () => {
  it("encodes one message per line", () => {
    const line = encodeLine({ type: "pause" });
    expect(line.endsWith("\n")).toBe(true);
    expect(JSON.parse(line)).toEqual({ type: "pause" });
  });

  it("splitter reassembles messages across chunk boundaries", () => {
    const s = new LineSplitter();
    const a = JSON.stringify({ type: "setpoint", t: 2, x: [0.1, 0.2], mu: [0.1, 0.2], sigma: [0.01, 0.01] });
    const b = JSON.stringify({ type: "done", metrics: {} });
    const chunks = [`${a.slice(0, 10)}`, `${a.slice(10)}\n${b.slice(0, 5)}`, `${b.slice(5)}\n`];
    const lines = chunks.flatMap((c) => s.push(c));
    expect(lines).toHaveLength(2);
    expect(parseServerMsg(lines[0]).type).toBe("setpoint");
    expect(parseServerMsg(lines[1]).type).toBe("done");
  });

  it("rejects malformed payloads", () => {
    expect(() => parseServerMsg("42")).toThrow(/malformed/);
  });
});
