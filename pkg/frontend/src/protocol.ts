/**
 * Wire protocol of the live adaptation session.
 *
 * Server messages arrive as a JSON array from `GET /api/messages?since=N`;
 * the client posts feedback and control commands as JSON bodies. All
 * numbers travel as decimal JSON, sample ids are opaque strings, and
 * unknown fields must be ignored for forward compatibility.
 */

export interface SessionHello {
  type: "session_hello";
  seq: number;
  protocol_version: number;
  n_classes: number;
  class_names: string[];
  feature_dim: number;
  batch_size: number;
  n_batches: number;
  deadline_ms: number;
  landmarks: [number, number][];
  method?: string;
}

export interface QueryRendering {
  x: number;
  y: number;
  glyph: number[];
}

export interface Query {
  sample_id: string;
  rendering: QueryRendering;
  predicted_label: number;
  predicted_class: string;
  confidence: number;
}

export interface QueryBatch {
  type: "query_batch";
  seq: number;
  batch_index: number;
  deadline_ms: number;
  queries: Query[];
}

export interface BatchResult {
  type: "batch_result";
  seq: number;
  batch_index: number;
  pre_acc: number;
  post_acc: number;
  cumulative_acc: number;
  agreement_rate: number;
  mem_correct?: number;
  mem_incorrect?: number;
  n_fallback?: number;
}

export interface SnapshotSaved {
  type: "snapshot_saved";
  seq: number;
  path: string;
}

export interface SessionDone {
  type: "session_done";
  seq: number;
  n_batches: number;
}

export type ServerMessage =
  | SessionHello
  | QueryBatch
  | BatchResult
  | SnapshotSaved
  | SessionDone;

export interface FeedbackMessage {
  sample_id: string;
  correct: boolean;
}

export type ControlCommand = "pause" | "resume" | "snapshot";

const isNum = (v: unknown): v is number => typeof v === "number" && isFinite(v);
const isStr = (v: unknown): v is string => typeof v === "string";

function isQuery(v: unknown): v is Query {
  if (typeof v !== "object" || v === null) return false;
  const q = v as Record<string, unknown>;
  const r = q.rendering as Record<string, unknown> | undefined;
  return (
    isStr(q.sample_id) &&
    isNum(q.predicted_label) &&
    isNum(q.confidence) &&
    typeof r === "object" &&
    r !== null &&
    isNum(r.x) &&
    isNum(r.y) &&
    Array.isArray(r.glyph) &&
    r.glyph.every(isNum)
  );
}

/**
 * Validate one raw server message. Returns null for malformed or unknown
 * messages; extra fields on known messages are preserved but untyped.
 */
export function parseServerMessage(raw: unknown): ServerMessage | null {
  if (typeof raw !== "object" || raw === null) return null;
  const m = raw as Record<string, unknown>;
  if (!isStr(m.type) || !isNum(m.seq)) return null;
  switch (m.type) {
    case "session_hello":
      if (
        isNum(m.protocol_version) &&
        isNum(m.n_classes) &&
        Array.isArray(m.class_names) &&
        m.class_names.every(isStr) &&
        isNum(m.feature_dim) &&
        isNum(m.batch_size) &&
        isNum(m.n_batches) &&
        isNum(m.deadline_ms) &&
        Array.isArray(m.landmarks) &&
        m.landmarks.every(
          (p) => Array.isArray(p) && p.length === 2 && p.every(isNum),
        )
      ) {
        return m as unknown as SessionHello;
      }
      return null;
    case "query_batch":
      if (
        isNum(m.batch_index) &&
        isNum(m.deadline_ms) &&
        Array.isArray(m.queries) &&
        m.queries.every(isQuery)
      ) {
        return m as unknown as QueryBatch;
      }
      return null;
    case "batch_result":
      if (
        isNum(m.batch_index) &&
        isNum(m.pre_acc) &&
        isNum(m.post_acc) &&
        isNum(m.cumulative_acc) &&
        isNum(m.agreement_rate)
      ) {
        return m as unknown as BatchResult;
      }
      return null;
    case "snapshot_saved":
      return isStr(m.path) ? (m as unknown as SnapshotSaved) : null;
    case "session_done":
      return isNum(m.n_batches) ? (m as unknown as SessionDone) : null;
    default:
      return null; // unknown message types are skipped, not fatal
  }
}

export function encodeFeedback(sampleId: string, correct: boolean): string {
  const message: FeedbackMessage = { sample_id: sampleId, correct };
  return JSON.stringify(message);
}

export function encodeControl(command: ControlCommand): string {
  return JSON.stringify({ command });
}
