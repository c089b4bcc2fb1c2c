"""Per-class search over layer combinations for the misbehavior alarm.

For each class, every non-empty subset of layers is scored on the validation
instances predicted as that class: the subset votes (disagreements with the
prediction >= agreements raises the raw alarm) and the subset with the best
alarm F1 against true misbehavior wins. F1 comparisons use exact integer
arithmetic so ties are broken deterministically: higher F1, then smaller
subset, then lexicographically smallest index list.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EXHAUSTIVE_LAYER_LIMIT = 20


@dataclass(frozen=True)
class VoteResult:
    """Outcome of one majority vote of selected layers against a prediction."""

    alarm_raw: bool
    delta: float
    n_agree: int
    n_selected: int


@dataclass(frozen=True)
class SearchOptions:
    search: str = "exhaustive"  # "exhaustive" | "greedy"
    max_subset_size: int | None = None
    time_budget_sec: float | None = None

    def __post_init__(self):
        if self.search not in ("exhaustive", "greedy"):
            raise ValueError(f"unknown search strategy {self.search!r}")


@dataclass(frozen=True)
class ClassAlarmChoice:
    selected_layers: tuple[int, ...]
    achieved_f1: float
    n_candidates_evaluated: int


@dataclass(frozen=True)
class AlarmConfig:
    """Selected alarm layers for every class, with the validation F1 achieved."""

    n_layers: int
    classes: tuple[ClassAlarmChoice, ...]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def layers_for(self, cls: int) -> tuple[int, ...]:
        return self.classes[cls].selected_layers

    def to_json(self) -> str:
        payload = {
            "n_layers": self.n_layers,
            "classes": [
                {
                    "selected_layers": list(c.selected_layers),
                    "achieved_f1": c.achieved_f1,
                    "n_candidates_evaluated": c.n_candidates_evaluated,
                }
                for c in self.classes
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "AlarmConfig":
        payload = json.loads(text)
        return cls(
            n_layers=int(payload["n_layers"]),
            classes=tuple(
                ClassAlarmChoice(
                    selected_layers=tuple(int(i) for i in c["selected_layers"]),
                    achieved_f1=float(c["achieved_f1"]),
                    n_candidates_evaluated=int(c["n_candidates_evaluated"]),
                )
                for c in payload["classes"]
            ),
        )

    @classmethod
    def load(cls, path: str | Path) -> "AlarmConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def majority_vote(inferred, y_hat: int) -> VoteResult:
    """Vote the selected layers' inferred classes against the prediction.

    The raw alarm fires when disagreements are at least as many as agreements,
    i.e. the agreement fraction delta is <= 0.5.
    """
    inferred = np.asarray(inferred)
    n_selected = int(inferred.size)
    if n_selected == 0:
        raise ValueError("majority vote needs a non-empty layer set")
    n_agree = int(np.count_nonzero(inferred == y_hat))
    return VoteResult(
        alarm_raw=(n_selected - n_agree) >= n_agree,
        delta=n_agree / n_selected,
        n_agree=n_agree,
        n_selected=n_selected,
    )


def _f1_better(num_a: int, den_a: int, num_b: int, den_b: int) -> int:
    """Exact comparison of F1 fractions num/den (0/0 counts as 0). Returns sign."""
    if den_a == 0:
        num_a, den_a = 0, 1
    if den_b == 0:
        num_b, den_b = 0, 1
    lhs, rhs = num_a * den_b, num_b * den_a
    return (lhs > rhs) - (lhs < rhs)


class _BestSubset:
    """Tracks the best (F1, cardinality, index list) candidate seen so far."""

    def __init__(self):
        self.num = -1  # F1 numerator 2*TP; -1 means empty
        self.den = 1
        self.mask = 0
        self.card = 0
        self.n_evaluated = 0

    def _beats_current(self, num: int, den: int, mask: int, card: int) -> bool:
        if self.num < 0:
            return True
        sign = _f1_better(num, den, self.num, self.den)
        if sign != 0:
            return sign > 0
        if card != self.card:
            return card < self.card
        return _mask_indices(mask) < _mask_indices(self.mask)

    def offer(self, tp: int, fp: int, fn: int, mask: int, card: int) -> None:
        self.n_evaluated += 1
        num, den = 2 * tp, 2 * tp + fn + fp
        if self._beats_current(num, den, mask, card):
            self.num, self.den = num, den
            self.mask, self.card = mask, card

    def merge(self, other: "_BestSubset") -> None:
        """Adopt ``other``'s winner if strictly better; evaluation counts add up."""
        self.n_evaluated += other.n_evaluated
        if other.num >= 0 and self._beats_current(
            other.num, other.den, other.mask, other.card
        ):
            self.num, self.den = other.num, other.den
            self.mask, self.card = other.mask, other.card

    @property
    def f1(self) -> float:
        return self.num / self.den if self.den and self.num > 0 else 0.0


def _mask_indices(mask: int) -> tuple[int, ...]:
    return tuple(i for i in range(mask.bit_length()) if mask >> i & 1)


def _exhaustive_alarm_search(
    agree_mis: np.ndarray,
    agree_good: np.ndarray,
    n_layers: int,
    opts: SearchOptions,
) -> _BestSubset:
    """Gray-code walk over all non-empty subsets, keeping vote counts incremental."""
    n_mis = agree_mis.shape[0]
    max_size = opts.max_subset_size or n_layers
    count_mis = np.zeros(n_mis, dtype=np.int32)
    count_good = np.zeros(agree_good.shape[0], dtype=np.int32)
    best = _BestSubset()
    deadline = (
        time.monotonic() + opts.time_budget_sec if opts.time_budget_sec else None
    )

    mask = 0
    card = 0
    for i in range(1, 1 << n_layers):
        gray = i ^ (i >> 1)
        bit = (gray ^ mask).bit_length() - 1
        if gray > mask:
            count_mis += agree_mis[:, bit]
            count_good += agree_good[:, bit]
            card += 1
        else:
            count_mis -= agree_mis[:, bit]
            count_good -= agree_good[:, bit]
            card -= 1
        mask = gray
        if card == 0 or card > max_size:
            continue
        # Alarm: disagreements >= agreements  <=>  2 * agreements <= |subset|.
        tp = int(np.count_nonzero(2 * count_mis <= card))
        fp = int(np.count_nonzero(2 * count_good <= card))
        best.offer(tp, fp, n_mis - tp, mask, card)
        if deadline is not None and best.n_evaluated % 256 == 0:
            if time.monotonic() > deadline:
                warnings.warn(
                    "alarm layer search stopped early: time budget exhausted",
                    stacklevel=4,
                )
                break
    return best


def _greedy_alarm_search(
    agree_mis: np.ndarray,
    agree_good: np.ndarray,
    n_layers: int,
    opts: SearchOptions,
) -> _BestSubset:
    """Forward selection: grow the subset while F1 strictly improves."""
    max_size = opts.max_subset_size or n_layers
    n_mis = agree_mis.shape[0]
    best = _BestSubset()
    chosen: list[int] = []

    def offer(candidate: list[int], tracker: _BestSubset) -> None:
        cols = np.array(candidate)
        card = len(candidate)
        cm = agree_mis[:, cols].sum(axis=1)
        cg = agree_good[:, cols].sum(axis=1)
        tp = int(np.count_nonzero(2 * cm <= card))
        fp = int(np.count_nonzero(2 * cg <= card))
        mask = sum(1 << i for i in candidate)
        tracker.offer(tp, fp, n_mis - tp, mask, card)

    while len(chosen) < max_size:
        round_best = _BestSubset()
        for layer in range(n_layers):
            if layer in chosen:
                continue
            offer(sorted(chosen + [layer]), round_best)
        prev_mask = best.mask
        best.merge(round_best)
        if best.mask == prev_mask:
            break
        chosen = list(_mask_indices(best.mask))
    return best


def select_alarm_layers(
    infer_classes: np.ndarray,
    labels: np.ndarray,
    predictions: np.ndarray,
    n_classes: int,
    opts: SearchOptions = SearchOptions(),
) -> AlarmConfig:
    """Pick, per class, the layer subset whose vote best predicts misbehavior.

    ``infer_classes`` is the (n, L) matrix of per-layer inferred classes on the
    validation split; misbehavior ground truth is label != prediction.
    """
    infer_classes = np.asarray(infer_classes)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    n, n_layers = infer_classes.shape
    if n < 1:
        raise ValueError("need at least one validation instance")
    if predictions.max() >= n_classes or predictions.min() < 0:
        raise ValueError("prediction class-id out of range")
    if opts.search == "exhaustive" and n_layers > EXHAUSTIVE_LAYER_LIMIT:
        raise ValueError(
            f"{n_layers} layers exceeds the exhaustive limit "
            f"({EXHAUSTIVE_LAYER_LIMIT}); use search='greedy'"
        )

    choices = []
    all_layers = tuple(range(n_layers))
    for c in range(n_classes):
        idx = np.flatnonzero(predictions == c)
        if idx.size == 0:
            warnings.warn(
                f"no validation instance predicted as class {c}; "
                "falling back to the full layer set",
                stacklevel=2,
            )
            choices.append(ClassAlarmChoice(all_layers, 0.0, 0))
            continue
        mis = labels[idx] != c
        agree = infer_classes[idx] == c
        agree_mis = agree[mis].astype(np.int32)
        agree_good = agree[~mis].astype(np.int32)
        if opts.search == "greedy":
            best = _greedy_alarm_search(agree_mis, agree_good, n_layers, opts)
        else:
            best = _exhaustive_alarm_search(agree_mis, agree_good, n_layers, opts)
        choices.append(
            ClassAlarmChoice(
                selected_layers=_mask_indices(best.mask),
                achieved_f1=best.f1,
                n_candidates_evaluated=best.n_evaluated,
            )
        )
    return AlarmConfig(n_layers=n_layers, classes=tuple(choices))
