"""Per-instance alarm + advice decisions for a deployed classifier.

Given the fitted density bundle and the selected layer configurations, each
test instance gets a majority vote of its alarm layers against the model's
prediction, then a weighted advice vote on whichever branch (positive: raw
alarm, negative: no alarm) the instance lands on. The advice argmax can
suppress a raw alarm (advice agrees with the prediction) or raise one on the
negative branch (advice contradicts the prediction).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .advice_selection import AdviceConfig
from .alarm_selection import AlarmConfig, majority_vote
from .feature_store import FeatureTensorSet
from .kde_engine import KdeBundle, _cell_log_density


@dataclass(frozen=True)
class Verdict:
    """One instance's check outcome. ``advice`` is present iff ``alarm`` is set."""

    alarm: bool
    advice: int | None
    delta: float
    per_layer_inferred: np.ndarray  # length L
    class_scores: np.ndarray  # length C, from the branch that was evaluated
    y_hat: int

    def layer_agreement(self) -> float:
        """Fraction of all layers whose inferred class matches the prediction."""
        return float(np.count_nonzero(self.per_layer_inferred == self.y_hat)) / len(
            self.per_layer_inferred
        )


@dataclass(eq=False)
class CheckBatchResult:
    verdicts: list[Verdict]
    latencies_sec: np.ndarray

    def latency_percentiles(self) -> dict[str, float]:
        if self.latencies_sec.size == 0:
            return {"p50_ms": 0.0, "p90_ms": 0.0, "p99_ms": 0.0}
        ms = self.latencies_sec * 1e3
        return {
            "p50_ms": float(np.percentile(ms, 50)),
            "p90_ms": float(np.percentile(ms, 90)),
            "p99_ms": float(np.percentile(ms, 99)),
        }


def _branch_scores(
    inferred: np.ndarray,
    layer_row,
    weight_row: np.ndarray,
    n_classes: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted per-class advice scores plus the raw agreement vote counts."""
    scores = np.zeros(n_classes)
    raw_votes = np.zeros(n_classes, dtype=np.int64)
    for c in range(n_classes):
        layers = layer_row[c]
        votes = int(np.count_nonzero(inferred[list(layers)] == c))
        raw_votes[c] = votes
        scores[c] = votes * weight_row[c] / len(layers)
    return scores, raw_votes


def _score_argmax(scores: np.ndarray, raw_votes: np.ndarray) -> int:
    """Argmax over scores; ties fall back to raw vote count, then lowest id."""
    best = 0
    for c in range(1, len(scores)):
        if scores[c] > scores[best] or (
            scores[c] == scores[best] and raw_votes[c] > raw_votes[best]
        ):
            best = c
    return best


def _fallback_advice(inferred: np.ndarray, y_hat: int, alarm_layers) -> int:
    """Most frequent inferred class among the alarm layers, excluding y_hat."""
    votes = inferred[list(alarm_layers)]
    counts = np.bincount(votes[votes != y_hat], minlength=1)
    return int(counts.argmax())


def verdict_from_inferred(
    per_layer_inferred: np.ndarray,
    y_hat: int,
    alarm_cfg: AlarmConfig,
    advice_cfg: AdviceConfig,
) -> Verdict:
    """Run the vote + advice decision given precomputed per-layer classes."""
    inferred = np.asarray(per_layer_inferred)
    n_classes = advice_cfg.n_classes
    if not 0 <= y_hat < n_classes:
        raise ValueError(f"prediction {y_hat} out of range [0, {n_classes})")

    alarm_layers = alarm_cfg.layers_for(y_hat)
    vote = majority_vote(inferred[list(alarm_layers)], y_hat)

    if vote.alarm_raw:
        scores, raw_votes = _branch_scores(
            inferred, advice_cfg.pos_layers[y_hat], advice_cfg.w_pos[y_hat], n_classes
        )
        if not scores.any():
            advice = _fallback_advice(inferred, y_hat, alarm_layers)
            alarm = True
        else:
            candidate = _score_argmax(scores, raw_votes)
            alarm = candidate != y_hat
            advice = candidate if alarm else None
    else:
        scores, raw_votes = _branch_scores(
            inferred, advice_cfg.neg_layers[y_hat], advice_cfg.w_neg[y_hat], n_classes
        )
        if not scores.any():
            alarm = False
            advice = None
        else:
            candidate = _score_argmax(scores, raw_votes)
            alarm = candidate != y_hat
            advice = candidate if alarm else None

    return Verdict(
        alarm=alarm,
        advice=advice,
        delta=vote.delta,
        per_layer_inferred=inferred,
        class_scores=scores,
        y_hat=int(y_hat),
    )


def check(
    instance_features,
    y_hat: int,
    bundle: KdeBundle,
    alarm_cfg: AlarmConfig,
    advice_cfg: AdviceConfig,
) -> Verdict:
    """Check one instance given its per-layer full-dimension feature vectors."""
    n_layers, n_classes = bundle.n_layers, bundle.n_classes
    if len(instance_features) != n_layers:
        raise ValueError(
            f"expected {n_layers} per-layer vectors, got {len(instance_features)}"
        )
    inferred = np.empty(n_layers, dtype=np.int64)
    for l in range(n_layers):
        v = np.asarray(instance_features[l], dtype=np.float64)
        if v.shape != (bundle.layer_dims[l],):
            raise ValueError(
                f"layer {l} expects dimension {bundle.layer_dims[l]}, got {v.shape}"
            )
        dens = np.empty(n_classes)
        for c in range(n_classes):
            cell = bundle.cell(l, c)
            dens[c] = _cell_log_density(cell, v[cell.kept_indices][None, :])[0]
        inferred[l] = int(dens.argmax())
    return verdict_from_inferred(inferred, y_hat, alarm_cfg, advice_cfg)


def check_batch(
    fset: FeatureTensorSet,
    bundle: KdeBundle,
    alarm_cfg: AlarmConfig,
    advice_cfg: AdviceConfig,
) -> CheckBatchResult:
    """Element-wise :func:`check` over a split, timing each instance."""
    if fset.layer_names != bundle.layer_names:
        raise ValueError("layer names differ from the fitted bundle")
    verdicts = []
    latencies = np.empty(fset.n_instances)
    for i in range(fset.n_instances):
        features = [layer.data[i] for layer in fset.layers]
        start = time.perf_counter()
        verdicts.append(
            check(features, int(fset.predictions[i]), bundle, alarm_cfg, advice_cfg)
        )
        latencies[i] = time.perf_counter() - start
    return CheckBatchResult(verdicts=verdicts, latencies_sec=latencies)


# -- wire format -----------------------------------------------------------


def verdict_wire_dict(verdict: Verdict, idx: int) -> dict:
    return {
        "idx": idx,
        "y_hat": verdict.y_hat,
        "alarm": verdict.alarm,
        "advice": verdict.advice,
        "delta": verdict.delta,
    }


def write_verdicts_jsonl(verdicts, path: str | Path) -> None:
    lines = [
        json.dumps(verdict_wire_dict(v, i), sort_keys=True)
        for i, v in enumerate(verdicts)
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_verdicts_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
