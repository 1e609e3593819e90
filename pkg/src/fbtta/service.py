"""Live adaptation session bridging the engine to a human feedback console.

The session runs the same per-batch loop as offline experiments. When a
batch selects samples for feedback, the queries are published to the
console as one message and the loop blocks until every query is
answered or the deadline passes; unanswered queries fall back to the
simulated oracle, so an unattended session replays the fully simulated
run exactly. All state changes happen at batch boundaries, where the
session can pause, resume, or snapshot itself.

Wire protocol (JSON messages over a polled request/response endpoint):

  server -> client (via GET /api/messages?since=<seq>)
    session_hello  {protocol_version, n_classes, class_names, feature_dim,
                    batch_size, n_batches, deadline_ms, landmarks}
    query_batch    {batch_index, deadline_ms, queries: [{sample_id,
                    rendering: {x, y, glyph}, predicted_label,
                    predicted_class, confidence}]}
    batch_result   {batch_index, pre_acc, post_acc, cumulative_acc,
                    agreement_rate, mem_correct, mem_incorrect, n_fallback}
    snapshot_saved {path}
    session_done   {n_batches}

  client -> server
    POST /api/feedback {sample_id, correct}    -> {ok} | {ok: false, error}
    POST /api/control  {command: pause|resume|snapshot}
    GET  /api/status

Numbers are decimal JSON; sample ids are opaque strings; consumers must
ignore unknown fields.
"""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import nn
from .engine import StreamAdaptation
from .harness import (METRICS_COLUMNS, ExperimentConfig, MetricsRow,
                      config_from_dict, config_to_dict)
from .memory import FeedbackRecord
from .seeding import derive_seed, rng_from
from .streams import (OracleSpec, class_prototypes, make_shift_stream,
                      oracle_answer, stream_label_table)

PROTOCOL_VERSION = 1


def projection_matrix(feature_dim: int, seed: int) -> np.ndarray:
    """Fixed 2 x d orthonormal projection for console renderings."""
    rng = rng_from("projection", seed)
    q, _ = np.linalg.qr(rng.normal(size=(feature_dim, 2)))
    return q.T


class LiveOracle:
    """Feedback source fed by console answers, with simulated fallback.

    `prepare` publishes a batch's queries and blocks until they are all
    answered or the deadline passes; the per-sample calls then return
    the resolved answers. A direct call without preparation publishes a
    single-query batch, so non-engine methods work too.
    """

    def __init__(self, session: "LiveSession", fallback: OracleSpec,
                 labels_by_id: dict[int, int], deadline_ms: int):
        self.session = session
        self.fallback = fallback
        self.labels = labels_by_id
        self.deadline_ms = deadline_ms
        self._answers: dict[int, int] = {}
        self.fallback_count = 0

    def prepare(self, batch_index: int, queries) -> None:
        resolved = self.session.collect_answers(batch_index, queries,
                                                self.deadline_ms)
        self._answers = {}
        for (sample_id, _, predicted, _), answer in zip(queries, resolved):
            if answer is None:
                answer = oracle_answer(self.fallback, self.labels[sample_id],
                                       predicted, sample_id)
                self.fallback_count += 1
            self._answers[sample_id] = answer

    def __call__(self, sample_id: int, features, predicted_label: int) -> int:
        if sample_id not in self._answers:
            self.prepare(-1, [(sample_id, features, predicted_label, 0.0)])
        return self._answers.pop(sample_id)


class LiveSession:
    """One adaptation run gated on human feedback, driven batch by batch."""

    def __init__(self, config: ExperimentConfig, out_dir, deadline_ms: int = 30000,
                 clock=time.monotonic, restore=None):
        if config.method not in ("dual", "feedback_only", "agreement_only", "bn_stats"):
            raise ValueError(f"live sessions drive engine methods, not {config.method!r}")
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.deadline_ms = deadline_ms
        self.clock = clock

        self.seed = config.seeds[0]
        self.stream = make_shift_stream(config.stream, derive_seed(self.seed, "stream"))
        labels = stream_label_table(self.stream)
        fallback = OracleSpec(error_rate=config.oracle.error_rate,
                              seed=derive_seed(self.seed, "oracle", config.oracle.seed))
        self.oracle = LiveOracle(self, fallback, labels, deadline_ms)

        model = nn.load_model(config.checkpoint)
        from dataclasses import replace as dc_replace
        from .harness import _engine_preset
        adapt = dc_replace(_engine_preset(config.method, config.adapt),
                           seed=derive_seed(self.seed, "adapt"))
        self.adaptation = StreamAdaptation(model, self.oracle, adapt, config.schedule)

        self.lock = threading.Lock()
        self.wake = threading.Condition(self.lock)
        self.messages: list[dict] = []
        self.state = "running"
        self.cursor = 0
        self.total_correct = 0
        self.total_seen = 0
        self._pending: dict[int, int | None] | None = None
        self._snapshot_requested = False
        self._closing = False
        self._metrics_path = self.out_dir / "metrics.csv"
        self._metrics_fh = None

        if restore is not None:
            self._restore(Path(restore))

        projection = projection_matrix(config.stream.feature_dim,
                                       config.stream.prototype_seed)
        self._projection = projection
        landmarks = class_prototypes(config.stream) @ projection.T
        self._emit({
            "type": "session_hello",
            "protocol_version": PROTOCOL_VERSION,
            "n_classes": config.stream.n_classes,
            "class_names": [f"class-{c}" for c in range(config.stream.n_classes)],
            "feature_dim": config.stream.feature_dim,
            "batch_size": config.stream.batch_size,
            "n_batches": len(self.stream),
            "deadline_ms": deadline_ms,
            "landmarks": [[float(x), float(y)] for x, y in landmarks],
            "method": config.method,
        })
        self.thread = threading.Thread(target=self._run, daemon=True)

    def start(self) -> None:
        self.thread.start()

    # --- adaptation loop ---------------------------------------------------

    def _run(self) -> None:
        header_needed = not self._metrics_path.exists() or self.cursor == 0
        self._metrics_fh = open(self._metrics_path, "a" if self.cursor else "w",
                                encoding="utf-8", buffering=1)
        if header_needed:
            self._metrics_fh.write(",".join(METRICS_COLUMNS) + "\n")
        try:
            while True:
                with self.wake:
                    while (self.state == "paused" or self._snapshot_requested) \
                            and not self._closing:
                        if self._snapshot_requested:
                            path = self._write_snapshot()
                            self._snapshot_requested = False
                            self._emit_locked({"type": "snapshot_saved",
                                               "path": str(path)})
                            continue
                        self.wake.wait(timeout=0.1)
                    if self._closing or self.cursor >= len(self.stream):
                        break
                    batch = self.stream[self.cursor]
                fallback_before = self.oracle.fallback_count
                report = self.adaptation.step(batch)
                with self.wake:
                    self.cursor += 1
                    self.total_correct += int(round(report.pre_accuracy * report.n_samples))
                    self.total_seen += report.n_samples
                    cum = self.total_correct / self.total_seen
                    n_free = report.n_samples - report.n_queried
                    agreement_rate = report.n_agreement / n_free if n_free else 0.0
                    n_fallback = self.oracle.fallback_count - fallback_before
                    row = MetricsRow(
                        seed=self.seed, method=self.config.method,
                        batch_index=report.batch_index, segment_id=report.segment_id,
                        n_samples=report.n_samples, pre_acc=report.pre_accuracy,
                        post_acc=report.post_accuracy, cum_acc=cum,
                        n_queried=report.n_queried, n_agreement=report.n_agreement,
                        mem_correct=report.mem_correct_size,
                        mem_incorrect=report.mem_incorrect_size,
                        loss_correct=report.loss_correct,
                        loss_incorrect=report.loss_incorrect,
                        loss_agreement=report.loss_agreement,
                        mean_confidence=report.mean_confidence,
                        agreement_rate=agreement_rate, n_fallback=n_fallback)
                    self._metrics_fh.write(row.to_csv() + "\n")
                    self._emit_locked({
                        "type": "batch_result",
                        "batch_index": report.batch_index,
                        "pre_acc": report.pre_accuracy,
                        "post_acc": report.post_accuracy,
                        "cumulative_acc": cum,
                        "agreement_rate": agreement_rate,
                        "mem_correct": report.mem_correct_size,
                        "mem_incorrect": report.mem_incorrect_size,
                        "n_fallback": n_fallback,
                    })
            with self.wake:
                if self.cursor >= len(self.stream):
                    self.state = "finished"
                    self._emit_locked({"type": "session_done",
                                       "n_batches": self.cursor})
        finally:
            self._metrics_fh.close()

    # --- console-facing operations ------------------------------------------

    def collect_answers(self, batch_index: int, queries, deadline_ms: int):
        """Publish queries, wait for answers until the deadline, return them."""
        with self.wake:
            self._pending = {int(q[0]): None for q in queries}
            self._emit_locked({
                "type": "query_batch",
                "batch_index": batch_index,
                "deadline_ms": deadline_ms,
                "queries": [self._render_query(q) for q in queries],
            })
            deadline = self.clock() + deadline_ms / 1000.0
            while (any(v is None for v in self._pending.values())
                   and self.clock() < deadline and not self._closing):
                self.wake.wait(timeout=min(0.05, max(deadline_ms, 1) / 1000.0))
            resolved = [self._pending[int(q[0])] for q in queries]
            self._pending = None
            return resolved

    def _render_query(self, query) -> dict:
        sample_id, features, predicted, confidence = query
        x, y = self._projection @ np.asarray(features, dtype=np.float64)
        return {
            "sample_id": str(sample_id),
            "rendering": {
                "x": float(x),
                "y": float(y),
                "glyph": [float(v) for v in features],
            },
            "predicted_label": int(predicted),
            "predicted_class": f"class-{int(predicted)}",
            "confidence": float(confidence),
        }

    def submit_feedback(self, sample_id: str, correct: bool) -> dict:
        try:
            sid = int(sample_id)
        except (TypeError, ValueError):
            return {"ok": False, "error": "malformed_sample_id"}
        with self.wake:
            if self._pending is None or sid not in self._pending:
                return {"ok": False, "error": "not_pending"}
            if self._pending[sid] is not None:
                return {"ok": False, "error": "already_answered"}
            self._pending[sid] = 1 if correct else -1
            self.wake.notify_all()
            return {"ok": True, "sample_id": str(sample_id)}

    def control(self, command: str) -> dict:
        with self.wake:
            if command == "pause":
                if self.state == "running":
                    self.state = "paused"
                self.wake.notify_all()
                return {"ok": True, "state": self.state}
            if command == "resume":
                if self.state == "paused":
                    self.state = "running"
                self.wake.notify_all()
                return {"ok": True, "state": self.state}
            if command == "snapshot":
                if self.state == "finished":
                    # The loop is gone; serve the request synchronously.
                    path = self._write_snapshot()
                    self._emit_locked({"type": "snapshot_saved", "path": str(path)})
                else:
                    self._snapshot_requested = True
                self.wake.notify_all()
                return {"ok": True, "state": self.state}
            return {"ok": False, "error": f"unknown_command:{command}"}

    def status(self) -> dict:
        with self.wake:
            return {
                "state": self.state,
                "batch_index": self.cursor,
                "n_batches": len(self.stream),
                "pending": sorted(str(k) for k, v in (self._pending or {}).items()
                                  if v is None),
                "messages": len(self.messages),
            }

    def messages_since(self, since: int) -> dict:
        with self.wake:
            return {"messages": self.messages[since:], "next": len(self.messages)}

    def close(self) -> None:
        with self.wake:
            self._closing = True
            self.wake.notify_all()
        if self.thread.is_alive():
            self.thread.join(timeout=5.0)

    def join(self, timeout=None) -> None:
        self.thread.join(timeout=timeout)

    # --- snapshot / restore ---------------------------------------------------

    def _write_snapshot(self) -> Path:
        snap_dir = self.out_dir / f"snapshot-{self.cursor:05d}"
        snap_dir.mkdir(parents=True, exist_ok=True)
        nn.save_model(self.adaptation.model, snap_dir / "model.npz")
        state = {
            "cursor": self.cursor,
            "total_correct": self.total_correct,
            "total_seen": self.total_seen,
            "mem_correct": [_record_to_dict(r) for r in self.adaptation.mem_correct.records],
            "mem_incorrect": [_record_to_dict(r) for r in self.adaptation.mem_incorrect.records],
            "pending_records": [
                [due, _record_to_dict(r)] for due, r in self.adaptation.pending],
            "config": config_to_dict(self.config),
        }
        with open(snap_dir / "session.json", "w", encoding="utf-8") as fh:
            json.dump(state, fh, sort_keys=True, indent=1)
        return snap_dir

    def _restore(self, snap_dir: Path) -> None:
        with open(snap_dir / "session.json", "r", encoding="utf-8") as fh:
            state = json.load(fh)
        restored = config_from_dict(state["config"])
        if config_to_dict(restored) != config_to_dict(self.config):
            raise ValueError("snapshot config does not match session config")
        model = nn.load_model(snap_dir / "model.npz")
        nn.copy_state_into(model, self.adaptation.model)
        self.adaptation.mem_correct.restore(
            [_record_from_dict(d) for d in state["mem_correct"]])
        self.adaptation.mem_incorrect.restore(
            [_record_from_dict(d) for d in state["mem_incorrect"]])
        self.adaptation.pending.clear()
        self.adaptation.pending.extend(
            (due, _record_from_dict(d)) for due, d in state["pending_records"])
        self.cursor = state["cursor"]
        self.total_correct = state["total_correct"]
        self.total_seen = state["total_seen"]

    # --- internals -------------------------------------------------------------

    def _emit(self, message: dict) -> None:
        with self.wake:
            self._emit_locked(message)

    def _emit_locked(self, message: dict) -> None:
        message = dict(message)
        message["seq"] = len(self.messages)
        self.messages.append(message)
        self.wake.notify_all()


def _record_to_dict(record: FeedbackRecord) -> dict:
    return {"features": [float(v) for v in record.features],
            "predicted_label": record.predicted_label,
            "feedback": record.feedback}


def _record_from_dict(data: dict) -> FeedbackRecord:
    return FeedbackRecord(features=np.asarray(data["features"], dtype=np.float64),
                          predicted_label=int(data["predicted_label"]),
                          feedback=int(data["feedback"]))


class SessionHandler(BaseHTTPRequestHandler):
    session: LiveSession = None
    static_dir: Path | None = None

    def log_message(self, fmt, *args):  # quiet server
        pass

    def _respond(self, payload: dict, code: int = 200) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        parsed = urlparse(self.path)
        if parsed.path == "/api/messages":
            since = int(parse_qs(parsed.query).get("since", ["0"])[0])
            self._respond(self.session.messages_since(since))
        elif parsed.path == "/api/status":
            self._respond(self.session.status())
        elif self.static_dir is not None:
            self._serve_static(parsed.path)
        else:
            self._respond({"ok": False, "error": "not_found"}, code=404)

    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        try:
            payload = json.loads(self.rfile.read(length) or b"{}")
        except json.JSONDecodeError:
            self._respond({"ok": False, "error": "malformed_json"}, code=400)
            return
        if self.path == "/api/feedback":
            result = self.session.submit_feedback(
                payload.get("sample_id"), bool(payload.get("correct")))
            self._respond(result, code=200 if result.get("ok") else 409)
        elif self.path == "/api/control":
            result = self.session.control(str(payload.get("command")))
            self._respond(result, code=200 if result.get("ok") else 400)
        else:
            self._respond({"ok": False, "error": "not_found"}, code=404)

    def _serve_static(self, path: str) -> None:
        rel = "index.html" if path == "/" else path.lstrip("/")
        target = (self.static_dir / rel).resolve()
        if not str(target).startswith(str(self.static_dir.resolve())) \
                or not target.is_file():
            self._respond({"ok": False, "error": "not_found"}, code=404)
            return
        content_types = {".html": "text/html", ".js": "text/javascript",
                         ".css": "text/css", ".map": "application/json"}
        body = target.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type",
                         content_types.get(target.suffix, "application/octet-stream"))
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


def make_server(session: LiveSession, host: str = "127.0.0.1", port: int = 0,
                static_dir=None) -> ThreadingHTTPServer:
    handler = type("BoundSessionHandler", (SessionHandler,), {
        "session": session,
        "static_dir": Path(static_dir) if static_dir else None,
    })
    return ThreadingHTTPServer((host, port), handler)


def serve_session(config: ExperimentConfig, host: str, port: int,
                  deadline_ms: int, out_dir=None, restore=None,
                  static_dir=None) -> None:
    """CLI entry: run one live session until the stream is exhausted."""
    from .harness import resolve_out_dir
    out = resolve_out_dir(config, out_dir) / "session"
    session = LiveSession(config, out, deadline_ms=deadline_ms, restore=restore)
    server = make_server(session, host=host, port=port, static_dir=static_dir)
    session.start()
    print(f"session serving on http://{host}:{server.server_address[1]}/ "
          f"(method {config.method}, {len(session.stream)} batches)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        session.close()
        server.shutdown()
