"""Experiment runner: pretraining, stream runs, ablation grids, metrics files.

Online accounting is uniform across methods: the accuracy that enters
the cumulative score is always computed from the predictions a method
makes when a batch arrives, before that batch updates anything. Metrics
are written as append-only delimited text plus a JSON summary; a run
directory always contains the exact resolved config that reproduces it.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import nn
from .baselines import entropy_binary_step
from .engine import AdaptConfig, FeedbackSchedule, adapt_stream
from .policy import estimate_policy, expected_calibration_error
from .seeding import derive_seed, rng_from
from .streams import (OracleSpec, StreamSpec, make_oracle, make_shift_stream,
                      make_source_dataset, spec_from_dict, spec_to_dict,
                      stream_label_table)

METHODS = ("dual", "feedback_only", "agreement_only", "bn_stats",
           "entropy_binary", "source")

OUTPUT_ROOT_ENV = "FBTTA_OUTPUT_ROOT"

METRICS_COLUMNS = (
    "seed", "method", "batch_index", "segment_id", "n_samples", "pre_acc",
    "post_acc", "cum_acc", "n_queried", "n_agreement", "mem_correct",
    "mem_incorrect", "loss_correct", "loss_incorrect", "loss_agreement",
    "mean_confidence", "agreement_rate", "n_fallback",
)


class PretrainError(RuntimeError):
    """Source pretraining missed its accuracy gate."""


@dataclass(frozen=True)
class PretrainSettings:
    """Source recipe. Two epochs reach the accuracy gate on the desk task
    while leaving the softmax unsaturated, which preserves the dynamic
    range the dropout-based uncertainty machinery feeds on."""

    n_train: int = 8192
    n_holdout: int = 2048
    epochs: int = 2
    batch_size: int = 64
    lr: float = 0.05
    hidden: tuple[int, ...] = (64, 64)
    dropout_rate: float = 0.3
    target_accuracy: float = 0.90


@dataclass
class ExperimentConfig:
    stream: StreamSpec
    method: str = "dual"
    adapt: AdaptConfig = None
    oracle: OracleSpec = None
    schedule: FeedbackSchedule = None
    seeds: tuple[int, ...] = (0, 1, 2)
    checkpoint: str = ""
    out_dir: str | None = None

    def __post_init__(self):
        if self.adapt is None:
            self.adapt = AdaptConfig()
        if self.oracle is None:
            self.oracle = OracleSpec()
        if self.schedule is None:
            self.schedule = FeedbackSchedule()
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        self.seeds = tuple(int(s) for s in self.seeds)


@dataclass(frozen=True)
class MetricsRow:
    seed: int
    method: str
    batch_index: int
    segment_id: int
    n_samples: int
    pre_acc: float
    post_acc: float
    cum_acc: float
    n_queried: int
    n_agreement: int
    mem_correct: int
    mem_incorrect: int
    loss_correct: float
    loss_incorrect: float
    loss_agreement: float
    mean_confidence: float
    agreement_rate: float
    n_fallback: int = 0

    def to_csv(self) -> str:
        values = [getattr(self, col) for col in METRICS_COLUMNS]
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


def mean_cross_entropy(labels: np.ndarray, clip_eps: float = nn.CLIP_EPS):
    """Probability-level closure for ``nn.grad``: mean CE over a batch."""
    labels = np.asarray(labels, dtype=np.int64)

    def loss_fn(probs):
        rows = np.arange(probs.shape[0])
        p = probs[rows, labels]
        clipped = np.clip(p, clip_eps, 1.0 - clip_eps)
        value = float(-np.log(clipped).mean())
        dprobs = np.zeros_like(probs)
        live = (p > clip_eps) & (p < 1.0 - clip_eps)
        dprobs[rows, labels] = np.where(live, -1.0 / clipped, 0.0) / probs.shape[0]
        return value, dprobs

    return loss_fn


def pretrain(spec: StreamSpec, settings: PretrainSettings, seed: int,
             out_path=None) -> tuple[nn.ModelState, float]:
    """Train a source model on clean data and gate it on held-out accuracy.

    After the SGD epochs the batch-norm statistics are recomputed in one
    chained pass over the full training set, then left unfrozen so the
    adaptation loop may refresh them later.
    """
    x_train, y_train = make_source_dataset(spec, settings.n_train,
                                           derive_seed(seed, "pretrain-train"))
    x_hold, y_hold = make_source_dataset(spec, settings.n_holdout,
                                         derive_seed(seed, "pretrain-holdout"))
    arch = nn.Architecture(spec.feature_dim, settings.hidden, spec.n_classes)
    model = nn.init_model(arch, settings.dropout_rate, derive_seed(seed, "pretrain-init"))

    n = x_train.shape[0]
    for epoch in range(settings.epochs):
        perm = rng_from("pretrain-epoch", seed, epoch).permutation(n)
        for start in range(0, n, settings.batch_size):
            idx = perm[start:start + settings.batch_size]
            if idx.size < 2:
                continue
            _, gradient = nn.grad(
                model, x_train[idx],
                nn.ForwardMode.deterministic(use_batch_stats=True),
                mean_cross_entropy(y_train[idx]))
            nn.sgd_step(model, gradient, settings.lr)

    tape = nn.forward_tape(model, x_train,
                           nn.ForwardMode.deterministic(use_batch_stats=True))
    for i, (mu, var) in enumerate(tape.batch_stats):
        model.bn_mean[i][...] = mu
        model.bn_var[i][...] = np.maximum(var, nn.VAR_FLOOR)

    pred = nn.forward(model, x_hold, nn.ForwardMode.deterministic()).argmax(axis=1)
    accuracy = float((pred == y_hold).mean())
    if accuracy < settings.target_accuracy:
        raise PretrainError(
            f"holdout accuracy {accuracy:.4f} below the "
            f"{settings.target_accuracy:.2f} gate")
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        nn.save_model(model, out_path)
    return model, accuracy


def _engine_preset(method: str, adapt: AdaptConfig) -> AdaptConfig:
    if method == "dual":
        return adapt
    if method == "feedback_only":
        return replace(adapt, beta=0.0)
    if method == "agreement_only":
        return replace(adapt, alpha=0.0, k=0)
    if method == "bn_stats":
        return replace(adapt, alpha=0.0, beta=0.0, k=0)
    raise ValueError(f"{method!r} is not an engine preset")


def _det_predictions(model, features):
    probs = nn.forward(model, features, nn.ForwardMode.deterministic())
    return probs.argmax(axis=1), probs.max(axis=1)


def run_single_seed(config: ExperimentConfig, seed: int,
                    model: nn.ModelState) -> list[MetricsRow]:
    """One method over one stream under one seed. The model is consumed."""
    stream = make_shift_stream(config.stream, derive_seed(seed, "stream"))
    oracle_spec = OracleSpec(
        error_rate=config.oracle.error_rate,
        seed=derive_seed(seed, "oracle", config.oracle.seed))
    oracle = make_oracle(oracle_spec, stream_label_table(stream))
    rows: list[MetricsRow] = []
    total_correct = 0
    total_seen = 0

    def cum(pre_acc: float, n: int) -> float:
        nonlocal total_correct, total_seen
        total_correct += int(round(pre_acc * n))
        total_seen += n
        return total_correct / total_seen

    if config.method in ("dual", "feedback_only", "agreement_only", "bn_stats"):
        adapt = replace(_engine_preset(config.method, config.adapt),
                        seed=derive_seed(seed, "adapt"))
        _, reports = adapt_stream(model, stream, oracle, adapt, config.schedule)
        for report in reports:
            n_free = report.n_samples - report.n_queried
            rows.append(MetricsRow(
                seed=seed, method=config.method, batch_index=report.batch_index,
                segment_id=report.segment_id, n_samples=report.n_samples,
                pre_acc=report.pre_accuracy, post_acc=report.post_accuracy,
                cum_acc=cum(report.pre_accuracy, report.n_samples),
                n_queried=report.n_queried, n_agreement=report.n_agreement,
                mem_correct=report.mem_correct_size,
                mem_incorrect=report.mem_incorrect_size,
                loss_correct=report.loss_correct,
                loss_incorrect=report.loss_incorrect,
                loss_agreement=report.loss_agreement,
                mean_confidence=report.mean_confidence,
                agreement_rate=report.n_agreement / n_free if n_free else 0.0,
            ))
        return rows

    for batch in stream:
        pred, conf = _det_predictions(model, batch.features)
        pre_acc = float((pred == batch.hidden_labels).mean())
        n_queried = 0
        if config.method == "source":
            post_acc = pre_acc
        elif config.method == "entropy_binary":
            n_queried = min(config.adapt.k, batch.size)
            if batch.batch_index % config.schedule.skip_period != 0:
                n_queried = 0
            entropy_binary_step(model, batch, oracle, n_queried, config.adapt.lr,
                                config.adapt.bn_momentum,
                                seed=derive_seed(seed, "adapt"))
            post_pred, _ = _det_predictions(model, batch.features)
            post_acc = float((post_pred == batch.hidden_labels).mean())
        else:
            raise ValueError(f"unhandled method: {config.method}")
        rows.append(MetricsRow(
            seed=seed, method=config.method, batch_index=batch.batch_index,
            segment_id=batch.segment_id, n_samples=batch.size,
            pre_acc=pre_acc, post_acc=post_acc, cum_acc=cum(pre_acc, batch.size),
            n_queried=n_queried, n_agreement=0, mem_correct=0, mem_incorrect=0,
            loss_correct=0.0, loss_incorrect=0.0, loss_agreement=0.0,
            mean_confidence=float(conf.mean()), agreement_rate=0.0,
        ))
    return rows


def config_to_dict(config: ExperimentConfig) -> dict:
    return {
        "stream": spec_to_dict(config.stream),
        "method": config.method,
        "adapt": asdict(config.adapt),
        "oracle": asdict(config.oracle),
        "schedule": asdict(config.schedule),
        "seeds": list(config.seeds),
        "checkpoint": config.checkpoint,
        "out_dir": config.out_dir,
    }


def config_from_dict(data: dict) -> ExperimentConfig:
    return ExperimentConfig(
        stream=spec_from_dict(data["stream"]),
        method=data["method"],
        adapt=AdaptConfig(**data["adapt"]),
        oracle=OracleSpec(**data["oracle"]),
        schedule=FeedbackSchedule(**data["schedule"]),
        seeds=tuple(data["seeds"]),
        checkpoint=data.get("checkpoint", ""),
        out_dir=data.get("out_dir"),
    )


def resolve_out_dir(config: ExperimentConfig, out_dir=None) -> Path:
    root = out_dir or config.out_dir or os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root)


def summarize(rows_by_seed: dict[int, list[MetricsRow]],
              failures: dict[int, str]) -> dict:
    per_seed = {}
    finals = []
    segment_acc: dict[int, list[float]] = {}
    for seed, rows in rows_by_seed.items():
        final_cum = rows[-1].cum_acc if rows else 0.0
        finals.append(final_cum)
        per_seed[str(seed)] = {
            "cumulative_accuracy": final_cum,
            "n_batches": len(rows),
        }
        for row in rows:
            segment_acc.setdefault(row.segment_id, []).append(row.pre_acc)
    summary = {
        "per_seed": per_seed,
        "mean_cumulative_accuracy": float(np.mean(finals)) if finals else 0.0,
        "std_cumulative_accuracy": float(np.std(finals)) if finals else 0.0,
        "per_segment_pre_acc": {
            str(seg): float(np.mean(vals)) for seg, vals in sorted(segment_acc.items())
        },
        "failures": {str(s): msg for s, msg in failures.items()},
    }
    return summary


def run_experiment(config: ExperimentConfig, out_dir=None) -> dict:
    """Run every seed, write metrics/summary/resolved-config, return the summary."""
    run_dir = resolve_out_dir(config, out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    base_model = nn.load_model(config.checkpoint)

    rows_by_seed: dict[int, list[MetricsRow]] = {}
    failures: dict[int, str] = {}
    for seed in config.seeds:
        try:
            rows_by_seed[seed] = run_single_seed(config, seed,
                                                 nn.clone_model(base_model))
        except Exception as exc:  # per-seed isolation: record and continue
            failures[seed] = f"{type(exc).__name__}: {exc}"

    with open(run_dir / "metrics.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for seed in sorted(rows_by_seed):
            for row in rows_by_seed[seed]:
                fh.write(row.to_csv() + "\n")

    summary = {"method": config.method, "seeds": list(config.seeds)}
    summary.update(summarize(rows_by_seed, failures))
    with open(run_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    with open(run_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(config), fh, sort_keys=True, indent=1)
    return summary


GRID_AXES = {
    "k": ("adapt", "k", int),
    "error_rate": ("oracle", "error_rate", float),
    "beta": ("adapt", "beta", float),
    "n_passes": ("adapt", "n_passes", int),
    "selection": ("adapt", "selection", str),
}


def ablation_grid(config: ExperimentConfig, axis: str, values,
                  out_dir=None) -> dict:
    """Independent runs along one config axis, sharing seeds; collated summary."""
    if axis not in GRID_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(GRID_AXES)}")
    section, field_name, caster = GRID_AXES[axis]
    root = resolve_out_dir(config, out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cells = {}
    for value in values:
        value = caster(value)
        sub = config_from_dict(config_to_dict(config))
        setattr(sub, section, replace(getattr(sub, section), **{field_name: value}))
        cell_dir = root / f"{axis}={value}"
        cells[str(value)] = run_experiment(sub, cell_dir)
    grid_summary = {"axis": axis, "cells": cells}
    with open(root / "grid_summary.json", "w", encoding="utf-8") as fh:
        json.dump(grid_summary, fh, sort_keys=True, indent=1)
    return grid_summary


def calibration_report(model: nn.ModelState, stream, n_passes: int, seed: int,
                       n_bins: int = 15) -> dict:
    """Segment-averaged calibration of MC-dropout vs deterministic confidence.

    Predictions come from the unadapted model; correctness is judged
    against the deterministic prediction in both columns so only the
    confidence source differs.
    """
    by_segment: dict[int, dict[str, list]] = {}
    for batch in stream:
        est = estimate_policy(model, batch.features, n_passes,
                              derive_seed(seed, "calibration", batch.batch_index))
        correct = est.det_pred == batch.hidden_labels
        bucket = by_segment.setdefault(batch.segment_id, {
            "mc_conf": [], "det_conf": [], "correct": []})
        bucket["mc_conf"].append(est.confidence)
        bucket["det_conf"].append(est.det_probs.max(axis=1))
        bucket["correct"].append(correct)
    mc_eces, det_eces = [], []
    per_segment = {}
    for seg, bucket in sorted(by_segment.items()):
        correct = np.concatenate(bucket["correct"])
        mc = expected_calibration_error(np.concatenate(bucket["mc_conf"]),
                                        correct, n_bins)
        det = expected_calibration_error(np.concatenate(bucket["det_conf"]),
                                         correct, n_bins)
        per_segment[str(seg)] = {"mc_ece": mc, "det_ece": det}
        mc_eces.append(mc)
        det_eces.append(det)
    return {
        "per_segment": per_segment,
        "mean_mc_ece": float(np.mean(mc_eces)),
        "mean_det_ece": float(np.mean(det_eces)),
    }
