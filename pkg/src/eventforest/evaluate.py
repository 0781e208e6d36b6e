"""Detection scoring on fixed time cells and on matched events, plus tuning."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from math import ceil

import numpy as np

from .detect import DetectConfig, extract_events, filter_duration, render_tracks, smooth
from .detect import collect_votes
from .features import FeatureMatrix

# Threshold above any normalized score: selecting it means the class is
# never reported, which is the right call when every grid point does worse.
IGNORANCE_BETA = 1.01


@dataclass
class SegmentScore:
    """Error counts pooled over fixed-length time cells."""

    n_ref: int = 0
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def error_rate(self) -> float | None:
        if self.n_ref == 0:
            return None
        return (self.substitutions + self.deletions + self.insertions) / self.n_ref

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        if denom == 0:
            return 1.0
        return 2 * self.tp / denom

    def add(self, other: "SegmentScore") -> None:
        self.n_ref += other.n_ref
        self.substitutions += other.substitutions
        self.deletions += other.deletions
        self.insertions += other.insertions
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn


def _activity(events, classes, n_cells: int, resolution: float) -> np.ndarray:
    """Boolean activity grid: one row per cell, one column per class."""
    index = {label: k for k, label in enumerate(classes)}
    grid = np.zeros((n_cells, len(classes)), dtype=bool)
    for event in events:
        k = index.get(event.label)
        if k is None:
            continue
        first = int(math.floor(event.onset / resolution))
        last = int(ceil(event.offset / resolution)) - 1
        first = max(first, 0)
        last = min(last, n_cells - 1)
        if first <= last:
            grid[first : last + 1, k] = True
    return grid


def segment_metrics(
    reference,
    hypothesis,
    resolution: float = 1.0,
    duration: float | None = None,
    classes=None,
) -> SegmentScore:
    """Score detections against reference events on fixed time cells.

    Each cell of ``resolution`` seconds holds the set of active classes on
    both sides. A missing class pairs with a spurious one in the same cell as
    a substitution; unpaired misses and extras count as deletions and
    insertions.
    """
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    reference = list(reference)
    hypothesis = list(hypothesis)
    if classes is None:
        classes = sorted({e.label for e in reference} | {e.label for e in hypothesis})
    else:
        classes = list(classes)
    if duration is None:
        spans = [e.offset for e in reference + hypothesis if e.label in set(classes)]
        duration = max(spans) if spans else 0.0
    n_cells = int(ceil(duration / resolution)) if duration > 0 else 0

    score = SegmentScore()
    if n_cells == 0 or not classes:
        return score
    ref_grid = _activity(reference, classes, n_cells, resolution)
    hyp_grid = _activity(hypothesis, classes, n_cells, resolution)
    fn_cells = (ref_grid & ~hyp_grid).sum(axis=1)
    fp_cells = (hyp_grid & ~ref_grid).sum(axis=1)
    sub_cells = np.minimum(fn_cells, fp_cells)
    score.n_ref = int(ref_grid.sum())
    score.tp = int((ref_grid & hyp_grid).sum())
    score.fp = int(fp_cells.sum())
    score.fn = int(fn_cells.sum())
    score.substitutions = int(sub_cells.sum())
    score.deletions = int((fn_cells - sub_cells).sum())
    score.insertions = int((fp_cells - sub_cells).sum())
    return score


@dataclass
class EventScore:
    """Error counts over matched whole events."""

    n_ref: int = 0
    n_hyp: int = 0
    tp: int = 0
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0

    @property
    def error_rate(self) -> float | None:
        if self.n_ref == 0:
            return None
        return (self.substitutions + self.deletions + self.insertions) / self.n_ref

    @property
    def f1(self) -> float:
        denom = self.n_ref + self.n_hyp
        if denom == 0:
            return 1.0
        return 2 * self.tp / denom


def event_metrics(reference, hypothesis, onset_collar: float = 0.2) -> EventScore:
    """Score detections by one-to-one event matching on onset proximity.

    A hypothesis matches a reference of the same class when their onsets lie
    within the collar; matching is greedy in onset order. Leftovers that
    align in time but not in class count as substitutions.
    """
    if onset_collar < 0:
        raise ValueError(f"collar must be non-negative, got {onset_collar}")
    reference = sorted(reference, key=lambda e: (e.onset, e.offset, e.label))
    hypothesis = sorted(hypothesis, key=lambda e: (e.onset, e.offset, e.label))
    ref_used = [False] * len(reference)
    hyp_used = [False] * len(hypothesis)
    tp = 0
    for i, hyp in enumerate(hypothesis):
        for j, ref in enumerate(reference):
            if ref_used[j] or ref.label != hyp.label:
                continue
            if abs(hyp.onset - ref.onset) <= onset_collar:
                ref_used[j] = True
                hyp_used[i] = True
                tp += 1
                break
    subs = 0
    for i, hyp in enumerate(hypothesis):
        if hyp_used[i]:
            continue
        for j, ref in enumerate(reference):
            if ref_used[j]:
                continue
            if abs(hyp.onset - ref.onset) <= onset_collar:
                ref_used[j] = True
                hyp_used[i] = True
                subs += 1
                break
    score = EventScore(n_ref=len(reference), n_hyp=len(hypothesis), tp=tp)
    score.substitutions = subs
    score.deletions = len(reference) - tp - subs
    score.insertions = len(hypothesis) - tp - subs
    return score


def per_class_segment_metrics(
    reference, hypothesis, resolution: float = 1.0, duration: float | None = None
) -> dict:
    """Segment scores per class label, under 'overall' the pooled score."""
    classes = sorted({e.label for e in reference} | {e.label for e in hypothesis})
    report = {
        label: segment_metrics(reference, hypothesis, resolution, duration, [label])
        for label in classes
    }
    report["overall"] = segment_metrics(
        reference, hypothesis, resolution, duration, classes
    )
    return report


def per_class_event_metrics(reference, hypothesis, onset_collar: float = 0.2) -> dict:
    """Event scores per class label, under 'overall' the pooled score."""
    classes = sorted({e.label for e in reference} | {e.label for e in hypothesis})
    report = {}
    for label in classes:
        report[label] = event_metrics(
            [e for e in reference if e.label == label],
            [e for e in hypothesis if e.label == label],
            onset_collar,
        )
    report["overall"] = event_metrics(reference, hypothesis, onset_collar)
    return report


@dataclass(eq=False)
class TuneFold:
    """One held-out stream used for threshold selection."""

    features: FeatureMatrix
    reference: list
    duration: float


@dataclass
class ClassThresholds:
    alpha: float
    beta: float
    error_rate: float | None


@dataclass
class TuneResult:
    per_class: dict


def default_alpha_grid() -> list:
    return [round(0.05 * i, 10) for i in range(21)]


def default_beta_grid() -> list:
    return [round(0.025 * i, 10) for i in range(41)]


def tune_thresholds(
    folds,
    forests,
    detect_config: DetectConfig | None = None,
    alphas=None,
    betas=None,
    resolution: float = 1.0,
    allow_ignorance: bool = False,
) -> TuneResult:
    """Exhaustive per-class grid search minimizing pooled segment error rate.

    For each class the onset and offset tracks of every fold are rendered per
    alpha from cached leaf votes, then every beta is applied. The pooled
    segment error rate over all folds scores each pair; ties prefer the
    larger beta, then the larger alpha. With ``allow_ignorance`` the pair
    (0, IGNORANCE_BETA) competes too, so a class whose best grid point is
    still worse than silence is switched off.
    """
    folds = list(folds)
    if not folds:
        raise ValueError("need at least one tuning fold")
    if detect_config is None:
        detect_config = DetectConfig()
    if alphas is None:
        alphas = default_alpha_grid()
    if betas is None:
        betas = default_beta_grid()

    per_class = {}
    for forest in forests:
        label = forest.class_label
        votes = [collect_votes(fold.features, forest) for fold in folds]
        best = None  # (score, alpha, beta, error_rate)
        for alpha in alphas:
            tracks = [
                smooth(
                    render_tracks(v, alpha, forest.z_plus, forest.z_minus),
                    detect_config.smooth_window,
                )
                for v in votes
            ]
            candidate_betas = list(betas)
            if allow_ignorance and alpha == alphas[0]:
                candidate_betas.append(IGNORANCE_BETA)
            for beta in candidate_betas:
                pooled = SegmentScore()
                for track, fold in zip(tracks, folds):
                    events = extract_events(
                        track,
                        beta,
                        fold.features.config.hop_len,
                        fold.features.config.window_len,
                        label,
                    )
                    if forest.max_train_event_duration is not None:
                        events = filter_duration(
                            events,
                            forest.max_train_event_duration,
                            detect_config.duration_factor,
                        )
                    pooled.add(
                        segment_metrics(
                            fold.reference, events, resolution, fold.duration, [label]
                        )
                    )
                rate = pooled.error_rate
                if rate is None:
                    errors = pooled.substitutions + pooled.deletions + pooled.insertions
                    score = 0.0 if errors == 0 else math.inf
                else:
                    score = rate
                entry = (score, alpha, beta, rate)
                if best is None or _better(entry, best):
                    best = entry
        per_class[label] = ClassThresholds(
            alpha=best[1], beta=best[2], error_rate=best[3]
        )
    return TuneResult(per_class=per_class)


def _better(entry, best) -> bool:
    """Lower score wins; ties fall to the larger beta, then the larger alpha."""
    score, alpha, beta, _ = entry
    best_score, best_alpha, best_beta, _ = best
    if score != best_score:
        return score < best_score
    if beta != best_beta:
        return beta > best_beta
    return alpha > best_alpha


def save_thresholds(result: TuneResult, path) -> None:
    payload = {
        label: {
            "alpha": t.alpha,
            "beta": t.beta,
            "error_rate": t.error_rate,
        }
        for label, t in result.per_class.items()
    }
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_thresholds(path) -> TuneResult:
    with open(path) as handle:
        payload = json.load(handle)
    per_class = {
        label: ClassThresholds(
            alpha=entry["alpha"],
            beta=entry["beta"],
            error_rate=entry.get("error_rate"),
        )
        for label, entry in payload.items()
    }
    return TuneResult(per_class=per_class)
