"""Shared builders and fixtures for the test suite."""

from types import SimpleNamespace

import numpy as np
import pytest

from eventforest.dataset import EventAnnotation, Segment
from eventforest.detect import collect_votes, render_tracks
from eventforest.features import FeatureConfig, FeatureMatrix
from eventforest.forest import (
    OBJECTIVE_CLASSIFICATION,
    OBJECTIVE_REGRESSION,
    ForestConfig,
    SegmentSet,
    distance_variation,
    draw_candidates,
    split_test,
    train_forest,
)

FEATURE_DIM = 8


def feature_config(n_channels: int = FEATURE_DIM) -> FeatureConfig:
    return FeatureConfig(n_channels=n_channels)


def random_segments(rng, n, dim=FEATURE_DIM, d_span=12, class_shift=0.0):
    """Random labeled segments with integer distance vectors on positives.

    The first two segments get opposite labels so every set contains both
    classes; ``class_shift`` moves the positives along the first two feature
    channels to make splits discoverable when a test needs separability.
    """
    labels = rng.integers(0, 2, size=n)
    labels[0] = 1
    if n > 1:
        labels[1] = 0
    segments = []
    for i, c in enumerate(labels):
        x = rng.normal(size=dim)
        if class_shift and c == 1:
            x[:2] += class_shift
        d = rng.integers(0, d_span, size=2).astype(float) if c == 1 else None
        segments.append(Segment(x=x, c=int(c), d=d, m=i))
    return segments


def scalar_entropy(n_pos, n_neg):
    """Entropy from class counts, evaluated one candidate at a time."""
    n = n_pos + n_neg
    h = 0.0
    for count in (n_pos, n_neg):
        if count > 0:
            p = count / n
            h = h - p * np.log2(p)
    return h


def oracle_best_split(segments, n_candidates, objective, seed):
    """Reference split search: replay the candidate pool, score one by one.

    Returns (index, r, q, tau) of the winning candidate or None when no
    candidate yields two non-empty children (and, for the regression
    objective, at least one positive on each side).
    """
    sset = SegmentSet.from_segments(segments)
    r_arr, q_arr, tau_arr = draw_candidates(
        sset, n_candidates, np.random.default_rng(seed)
    )
    n = len(segments)
    best = None
    best_score = None
    for i in range(n_candidates):
        r, q, tau = int(r_arr[i]), int(q_arr[i]), float(tau_arr[i])
        went_right = [split_test(s.x, r, q, tau) == 1 for s in segments]
        n_right = sum(went_right)
        if n_right == 0 or n_right == n:
            continue
        if objective == OBJECTIVE_REGRESSION:
            pos_right = sum(
                1 for s, w in zip(segments, went_right) if w and s.c == 1
            )
            pos_left = sum(
                1 for s, w in zip(segments, went_right) if not w and s.c == 1
            )
            if pos_right == 0 or pos_left == 0:
                continue
            score = distance_variation((r, q, tau), segments)
            improves = best_score is None or score < best_score
        else:
            n_pos = sum(s.c for s in segments)
            n_pos_right = sum(
                1 for s, w in zip(segments, went_right) if w and s.c == 1
            )
            n_left = n - n_right
            score = scalar_entropy(float(n_pos), float(n - n_pos))
            score = score - (n_right / n) * scalar_entropy(
                float(n_pos_right), float(n_right - n_pos_right)
            )
            score = score - (n_left / n) * scalar_entropy(
                float(n_pos - n_pos_right), float(n_left - (n_pos - n_pos_right))
            )
            improves = best_score is None or score > best_score
        if improves:
            best = (i, r, q, tau)
            best_score = score
    return best


def blob_stream(rng, n_events=6, event_len=12, gap=20, dim=FEATURE_DIM,
                shift=2.5, noise=0.35):
    """Synthetic feature-space stream with embedded constant-signature events.

    Background rows are near-zero noise; event rows add ``shift`` on channels
    0-1 and subtract it on channel 2, so difference tests separate the two
    populations. Returns (features, annotations, labeled segments) for the
    single class "blob".
    """
    config = feature_config(dim)
    rows = []
    segments = []
    annotations = []
    base = np.zeros(dim)
    base[:2] = shift
    base[2] = -shift

    def emit_background(count):
        for _ in range(count):
            m = len(rows)
            x = rng.normal(size=dim) * noise
            rows.append(x)
            segments.append(Segment(x=x, c=0, d=None, m=m))

    emit_background(gap)
    for _ in range(n_events):
        first = len(rows)
        for j in range(event_len):
            m = len(rows)
            x = base + rng.normal(size=dim) * noise
            rows.append(x)
            segments.append(
                Segment(x=x, c=1, d=np.array([j, event_len - 1 - j], float), m=m)
            )
        last = len(rows) - 1
        hop = config.hop_len
        center = config.window_len / 2.0
        annotations.append(
            EventAnnotation(
                onset=first * hop + center - hop / 2.0,
                offset=last * hop + center + hop / 2.0,
                label="blob",
            )
        )
        emit_background(gap)

    times = np.arange(len(rows)) * config.hop_len
    features = FeatureMatrix(np.array(rows), times, config)
    return features, annotations, segments


@pytest.fixture(scope="session")
def blob_model():
    """A small trained single-class detector with matching streams.

    Provides the forest (normalized against the dev stream), its training
    segments, and dev/test streams with reference annotations.
    """
    fc = feature_config()
    train_rng = np.random.default_rng(11)
    _, _, train_segments = blob_stream(train_rng, n_events=10)
    config = ForestConfig(
        n_trees=4,
        subsample_ratio=0.5,
        n_candidate_tests=400,
        max_depth=5,
        min_segments=12,
        steer_depth=5,
        variance_floor=1.0,
        rng_seed=7,
    )
    forest = train_forest(
        train_segments, config, class_label="blob", feature_config=fc
    )
    dev_features, dev_reference, _ = blob_stream(
        np.random.default_rng(12), n_events=6
    )
    raw = render_tracks(collect_votes(dev_features, forest), alpha=0.0)
    forest.z_plus = max(float(raw.f_plus.max()), 1e-12)
    forest.z_minus = max(float(raw.f_minus.max()), 1e-12)
    test_features, test_reference, _ = blob_stream(
        np.random.default_rng(13), n_events=6
    )
    return SimpleNamespace(
        forest=forest,
        train_segments=train_segments,
        feature_config=fc,
        dev_features=dev_features,
        dev_reference=dev_reference,
        test_features=test_features,
        test_reference=test_reference,
    )
