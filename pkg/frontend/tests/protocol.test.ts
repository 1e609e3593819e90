import { describe, expect, it } from "vitest";

import {
  encodeControl,
  encodeFeedback,
  parseServerMessage,
} from "../src/protocol.js";

const hello = {
  type: "session_hello",
  seq: 0,
  protocol_version: 1,
  n_classes: 3,
  class_names: ["class-0", "class-1", "class-2"],
  feature_dim: 4,
  batch_size: 16,
  n_batches: 6,
  deadline_ms: 1000,
  landmarks: [
    [0.0, 1.0],
    [1.0, 0.0],
    [-1.0, -1.0],
  ],
};

const query = {
  sample_id: "42",
  rendering: { x: 0.5, y: -0.25, glyph: [0.1, -0.2, 0.3, 0.4] },
  predicted_label: 1,
  predicted_class: "class-1",
  confidence: 0.21,
};

describe("parseServerMessage", () => {
  it("accepts a well-formed hello", () => {
    const parsed = parseServerMessage(hello);
    expect(parsed?.type).toBe("session_hello");
  });

  it("accepts query batches and preserves queries", () => {
    const parsed = parseServerMessage({
      type: "query_batch",
      seq: 1,
      batch_index: 0,
      deadline_ms: 500,
      queries: [query],
    });
    expect(parsed?.type).toBe("query_batch");
    if (parsed?.type === "query_batch") {
      expect(parsed.queries[0]?.sample_id).toBe("42");
      expect(parsed.queries[0]?.confidence).toBeCloseTo(0.21);
    }
  });

  it("accepts batch results", () => {
    const parsed = parseServerMessage({
      type: "batch_result",
      seq: 2,
      batch_index: 0,
      pre_acc: 0.5,
      post_acc: 0.55,
      cumulative_acc: 0.5,
      agreement_rate: 0.8,
    });
    expect(parsed?.type).toBe("batch_result");
  });

  it("ignores unknown fields on known messages", () => {
    const parsed = parseServerMessage({ ...hello, future_field: { a: 1 } });
    expect(parsed?.type).toBe("session_hello");
  });

  it("rejects unknown message types", () => {
    expect(parseServerMessage({ type: "telemetry", seq: 3 })).toBeNull();
  });

  it("rejects malformed messages", () => {
    expect(parseServerMessage(null)).toBeNull();
    expect(parseServerMessage("boom")).toBeNull();
    expect(parseServerMessage({ type: "query_batch", seq: 1 })).toBeNull();
    expect(
      parseServerMessage({
        type: "query_batch",
        seq: 1,
        batch_index: 0,
        deadline_ms: 10,
        queries: [{ sample_id: 7 }],
      }),
    ).toBeNull();
    expect(
      parseServerMessage({ ...hello, landmarks: [[1]] }),
    ).toBeNull();
  });

  it("rejects messages without a sequence number", () => {
    const { seq: _seq, ...rest } = hello;
    expect(parseServerMessage(rest)).toBeNull();
  });
});

describe("encoders", () => {
  it("encodes feedback exactly as the wire expects", () => {
    expect(JSON.parse(encodeFeedback("42", true))).toEqual({
      sample_id: "42",
      correct: true,
    });
    expect(JSON.parse(encodeFeedback("7", false))).toEqual({
      sample_id: "7",
      correct: false,
    });
  });

  it("encodes control commands", () => {
    expect(JSON.parse(encodeControl("pause"))).toEqual({ command: "pause" });
  });
});
