"""Layer-combination search for the alternative-prediction (advice) tables.

Validation instances predicted as class c_p are split by the alarm vote into a
positive branch (raw alarm) and a negative branch (no alarm). Within each
branch and for each candidate true class c_t, we search for the layer subset
whose per-instance majority vote best recovers c_t, and derive a weight from
the branch composition. Weights scale the deployment-time advice vote; a zero
weight removes the class from the argmax entirely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alarm_selection import (
    EXHAUSTIVE_LAYER_LIMIT,
    AlarmConfig,
    SearchOptions,
    _BestSubset,
    _mask_indices,
)


@dataclass(frozen=True)
class AdviceConfig:
    """Per (predicted class, candidate class) layer sets and weights, per branch."""

    pos_layers: tuple[tuple[tuple[int, ...], ...], ...]  # C x C
    neg_layers: tuple[tuple[tuple[int, ...], ...], ...]
    w_pos: np.ndarray  # C x C, >= 0
    w_neg: np.ndarray

    def __post_init__(self):
        for table in (self.pos_layers, self.neg_layers):
            for row in table:
                for subset in row:
                    if len(subset) == 0:
                        raise ValueError("advice layer sets must be non-empty")
        if (self.w_pos < 0).any() or (self.w_neg < 0).any():
            raise ValueError("advice weights must be non-negative")

    @property
    def n_classes(self) -> int:
        return len(self.pos_layers)

    def to_json(self) -> str:
        payload = {
            "pos_layers": [[list(s) for s in row] for row in self.pos_layers],
            "neg_layers": [[list(s) for s in row] for row in self.neg_layers],
            "w_pos": self.w_pos.tolist(),
            "w_neg": self.w_neg.tolist(),
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "AdviceConfig":
        payload = json.loads(text)

        def table(rows):
            return tuple(tuple(tuple(int(i) for i in s) for s in row) for row in rows)

        return cls(
            pos_layers=table(payload["pos_layers"]),
            neg_layers=table(payload["neg_layers"]),
            w_pos=np.asarray(payload["w_pos"], dtype=np.float64),
            w_neg=np.asarray(payload["w_neg"], dtype=np.float64),
        )

    @classmethod
    def load(cls, path: str | Path) -> "AdviceConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def subset_vote_classes(
    classes: np.ndarray, layer_subset, log_densities: np.ndarray | None = None
) -> np.ndarray:
    """Majority-vote class per instance over ``layer_subset``.

    Count ties are broken by the highest log-density summed over the subset
    when densities are available, then by the lowest class id.
    """
    cols = np.asarray(layer_subset)
    n_classes = (
        log_densities.shape[2] if log_densities is not None else int(classes.max()) + 1
    )
    counts = _vote_counts(classes[:, cols], n_classes)
    if log_densities is None:
        return counts.argmax(axis=1)
    densum = log_densities[:, cols, :].sum(axis=1)
    return _argmax_with_density_ties(counts, densum)


def _vote_counts(subset_classes: np.ndarray, n_classes: int) -> np.ndarray:
    n = subset_classes.shape[0]
    counts = np.zeros((n, n_classes), dtype=np.int32)
    rows = np.arange(n)
    for j in range(subset_classes.shape[1]):
        counts[rows, subset_classes[:, j]] += 1
    return counts


def _argmax_with_density_ties(counts: np.ndarray, densum: np.ndarray) -> np.ndarray:
    top = counts.max(axis=1, keepdims=True)
    tied_scores = np.where(counts == top, densum, -np.inf)
    return tied_scores.argmax(axis=1)


def _subset_hits(
    counts: np.ndarray,
    cols: np.ndarray,
    log_densities: np.ndarray | None,
    target: int,
) -> int:
    """Count rows whose vote over ``cols`` lands on ``target``.

    Density sums are only computed for rows whose counts actually tie, and
    always freshly from the density tensor, so float rounding cannot depend
    on enumeration order.
    """
    winners = counts.argmax(axis=1)
    if log_densities is not None:
        top = counts.max(axis=1, keepdims=True)
        tied = (counts == top).sum(axis=1) > 1
        if tied.any():
            tied_rows = np.flatnonzero(tied)
            densum = log_densities[np.ix_(tied_rows, cols)].sum(axis=1)
            winners[tied_rows] = _argmax_with_density_ties(counts[tied_rows], densum)
    return int(np.count_nonzero(winners == target))


def _acc_search(
    classes: np.ndarray,
    log_densities: np.ndarray | None,
    target: int,
    n_layers: int,
    n_classes: int,
    opts: SearchOptions,
) -> _BestSubset:
    """Find the subset maximizing the fraction of rows voted as ``target``.

    Reuses the alarm search's exact-fraction tracker: offering (hits, n-hits,
    n-hits) stores the accuracy hits/n as the fraction 2*hits / 2*n.
    """
    n = classes.shape[0]
    best = _BestSubset()
    max_size = opts.max_subset_size or n_layers

    if opts.search == "greedy":
        chosen: list[int] = []
        while len(chosen) < max_size:
            round_best = _BestSubset()
            for layer in range(n_layers):
                if layer in chosen:
                    continue
                cols = np.array(sorted(chosen + [layer]))
                counts = _vote_counts(classes[:, cols], n_classes)
                hits = _subset_hits(counts, cols, log_densities, target)
                round_best.offer(
                    hits, n - hits, n - hits, sum(1 << int(i) for i in cols), len(cols)
                )
            prev_mask = best.mask
            best.merge(round_best)
            if best.mask == prev_mask:
                break
            chosen = list(_mask_indices(best.mask))
        return best

    rows = np.arange(n)
    counts = np.zeros((n, n_classes), dtype=np.int32)
    mask = 0
    card = 0
    for i in range(1, 1 << n_layers):
        gray = i ^ (i >> 1)
        bit = (gray ^ mask).bit_length() - 1
        col = classes[:, bit]
        if gray > mask:
            counts[rows, col] += 1
            card += 1
        else:
            counts[rows, col] -= 1
            card -= 1
        mask = gray
        if card == 0 or card > max_size:
            continue
        cols = np.array(_mask_indices(mask))
        hits = _subset_hits(counts, cols, log_densities, target)
        best.offer(hits, n - hits, n - hits, mask, card)
    return best


def select_advice_layers(
    infer_classes: np.ndarray,
    labels: np.ndarray,
    predictions: np.ndarray,
    alarm_cfg: AlarmConfig,
    n_classes: int,
    opts: SearchOptions = SearchOptions(),
    log_densities: np.ndarray | None = None,
) -> AdviceConfig:
    """Build the advice layer tables and weight matrices from validation data."""
    infer_classes = np.asarray(infer_classes)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    n, n_layers = infer_classes.shape
    if alarm_cfg.n_classes != n_classes:
        raise ValueError("alarm config does not cover every class")
    if opts.search == "exhaustive" and n_layers > EXHAUSTIVE_LAYER_LIMIT:
        raise ValueError(
            f"{n_layers} layers exceeds the exhaustive limit "
            f"({EXHAUSTIVE_LAYER_LIMIT}); use search='greedy'"
        )

    pos_layers = [[() for _ in range(n_classes)] for _ in range(n_classes)]
    neg_layers = [[() for _ in range(n_classes)] for _ in range(n_classes)]
    w_pos = np.zeros((n_classes, n_classes))
    w_neg = np.zeros((n_classes, n_classes))

    for c_p in range(n_classes):
        alarm_set = alarm_cfg.layers_for(c_p)
        idx = np.flatnonzero(predictions == c_p)
        if idx.size:
            agree = (infer_classes[np.ix_(idx, np.array(alarm_set))] == c_p).sum(axis=1)
            alarmed = (len(alarm_set) - agree) >= agree
            correct = labels[idx] == c_p
            fp_count = int(np.count_nonzero(alarmed & correct))
            tn_count = int(np.count_nonzero(~alarmed & correct))
            branches = (
                (idx[alarmed], fp_count, pos_layers, w_pos),
                (idx[~alarmed], tn_count, neg_layers, w_neg),
            )
        else:
            branches = (
                (idx, 0, pos_layers, w_pos),
                (idx, 0, neg_layers, w_neg),
            )

        for branch_idx, correct_count, table, weights in branches:
            branch_labels = labels[branch_idx]
            branch_size = int(branch_idx.size)
            for c_t in range(n_classes):
                members = branch_idx[branch_labels == c_t]
                if members.size == 0:
                    table[c_p][c_t] = alarm_set
                    weights[c_p, c_t] = 0.0
                    continue
                dens = (
                    log_densities[members] if log_densities is not None else None
                )
                best = _acc_search(
                    infer_classes[members], dens, c_t, n_layers, n_classes, opts
                )
                table[c_p][c_t] = _mask_indices(best.mask)
                acc = best.f1  # hits/total encoded in the tracker
                if c_t == c_p:
                    denom = branch_size
                else:
                    denom = branch_size - correct_count
                weights[c_p, c_t] = (
                    members.size * acc / denom if denom > 0 else 0.0
                )

    return AdviceConfig(
        pos_layers=tuple(tuple(row) for row in pos_layers),
        neg_layers=tuple(tuple(row) for row in neg_layers),
        w_pos=w_pos,
        w_neg=w_neg,
    )
