"""Stream detection: leaf voting, score accumulation, peak extraction."""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, floor, sqrt

import numpy as np

from .features import FeatureMatrix, Waveform, gammatone_cepstra, resample
from .forest import Forest, LeafModel, gaussian_pdf


@dataclass(frozen=True)
class DetectConfig:
    """Per-class inference parameters."""

    alpha: float = 0.0
    beta: float = 0.5
    smooth_window: int = 11
    duration_factor: float = 3.0
    z_plus: float | None = None
    z_minus: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ValueError(
                f"smoothing window must be odd and positive, got {self.smooth_window}"
            )
        if self.duration_factor <= 0.0:
            raise ValueError("duration factor must be positive")


@dataclass(eq=False)
class ScoreTrack:
    """Normalized onset and offset scores, one value per segment."""

    f_plus: np.ndarray
    f_minus: np.ndarray

    def __post_init__(self):
        self.f_plus = np.asarray(self.f_plus, dtype=np.float64)
        self.f_minus = np.asarray(self.f_minus, dtype=np.float64)
        if self.f_plus.shape != self.f_minus.shape or self.f_plus.ndim != 1:
            raise ValueError("score tracks must be two equal-length vectors")
        for track in (self.f_plus, self.f_minus):
            if not np.all(np.isfinite(track)) or np.any(track < 0):
                raise ValueError("scores must be finite and non-negative")

    @property
    def n_segments(self) -> int:
        return len(self.f_plus)


@dataclass(eq=False)
class Detection:
    """One detected event with its confidence score."""

    label: str
    onset: float
    offset: float
    confidence: float


def descend(tree, x) -> LeafModel:
    """Route a feature vector to its leaf; test outcome 1 goes right."""
    node = tree
    x = np.asarray(x, dtype=np.float64)
    try:
        while not isinstance(node, LeafModel):
            node = node.right if x[node.r] - x[node.q] > node.tau else node.left
    except IndexError:
        raise ValueError(
            f"feature vector of length {len(x)} does not match the tree"
        ) from None
    return node


def vote_tree(leaf: LeafModel, m: int, alpha: float, n: int) -> tuple:
    """Onset and offset vote of one leaf for segment m at target position n.

    Leaves below the confidence gate, or without distance Gaussians, vote
    zero on both curves.
    """
    if leaf.onset is None or leaf.p_pos < alpha:
        return (0.0, 0.0)
    mean_on, var_on = leaf.onset
    mean_off, var_off = leaf.offset
    p_plus = leaf.p_pos * gaussian_pdf(n, m - mean_on, var_on)
    p_minus = leaf.p_pos * gaussian_pdf(n, m + mean_off, var_off)
    return (float(p_plus), float(p_minus))


def vote_forest(forest: Forest, x, m: int, alpha: float, n: int) -> tuple:
    """Average the per-tree votes for one segment at one target position."""
    total_plus = 0.0
    total_minus = 0.0
    for tree in forest.trees:
        p_plus, p_minus = vote_tree(descend(tree, x), m, alpha, n)
        total_plus += p_plus
        total_minus += p_minus
    n_trees = forest.n_trees
    return (total_plus / n_trees, total_minus / n_trees)


@dataclass(eq=False)
class StreamVotes:
    """Leaf assignments of a whole stream, cached for repeated rendering.

    Arrays are ordered segment-major, then tree order, so rendering is a
    fixed-order reduction regardless of the confidence gate.
    """

    p_pos: np.ndarray
    segment: np.ndarray
    mean_on: np.ndarray
    var_on: np.ndarray
    mean_off: np.ndarray
    var_off: np.ndarray
    n_segments: int
    n_trees: int


def collect_votes(features: FeatureMatrix, forest: Forest) -> StreamVotes:
    """Route every segment through every tree and keep the Gaussian leaves."""
    p_pos, segment = [], []
    mean_on, var_on, mean_off, var_off = [], [], [], []
    for m, x in enumerate(features.rows):
        for tree in forest.trees:
            leaf = descend(tree, x)
            if leaf.onset is None:
                continue
            p_pos.append(leaf.p_pos)
            segment.append(m)
            mean_on.append(leaf.onset[0])
            var_on.append(leaf.onset[1])
            mean_off.append(leaf.offset[0])
            var_off.append(leaf.offset[1])
    return StreamVotes(
        p_pos=np.array(p_pos),
        segment=np.array(segment, dtype=np.int64),
        mean_on=np.array(mean_on),
        var_on=np.array(var_on),
        mean_off=np.array(mean_off),
        var_off=np.array(var_off),
        n_segments=features.n_segments,
        n_trees=forest.n_trees,
    )


def _add_gaussian(track: np.ndarray, weight: float, mean: float, var: float) -> None:
    """Add a weighted Gaussian to the track, truncated at six standard deviations."""
    spread = 6.0 * sqrt(var)
    lo = max(0, ceil(mean - spread))
    hi = min(len(track) - 1, floor(mean + spread))
    if lo > hi:
        return
    positions = np.arange(lo, hi + 1)
    track[lo : hi + 1] += weight * gaussian_pdf(positions, mean, var)


def render_tracks(
    votes: StreamVotes,
    alpha: float,
    z_plus: float = 1.0,
    z_minus: float = 1.0,
) -> ScoreTrack:
    """Accumulate cached votes into normalized onset and offset tracks."""
    f_plus = np.zeros(votes.n_segments)
    f_minus = np.zeros(votes.n_segments)
    for i in range(len(votes.p_pos)):
        p = votes.p_pos[i]
        if p < alpha:
            continue
        m = votes.segment[i]
        _add_gaussian(f_plus, p, m - votes.mean_on[i], votes.var_on[i])
        _add_gaussian(f_minus, p, m + votes.mean_off[i], votes.var_off[i])
    scale = votes.n_trees
    f_plus /= scale * z_plus
    f_minus /= scale * z_minus
    return ScoreTrack(f_plus, f_minus)


def accumulate(
    features: FeatureMatrix,
    forest: Forest,
    alpha: float,
    z_plus: float | None = None,
    z_minus: float | None = None,
) -> ScoreTrack:
    """Onset and offset score tracks for a stream under one forest.

    Every segment's leaves cast Gaussian votes around their predicted event
    boundaries; votes are averaged over trees and divided by the forest's
    normalization constants unless overridden.
    """
    votes = collect_votes(features, forest)
    return render_tracks(
        votes,
        alpha,
        forest.z_plus if z_plus is None else z_plus,
        forest.z_minus if z_minus is None else z_minus,
    )


def smooth(track: ScoreTrack, window: int) -> ScoreTrack:
    """Centered moving average; edge windows shrink to the available samples."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"smoothing window must be odd and positive, got {window}")
    if window == 1 or track.n_segments == 0:
        return ScoreTrack(track.f_plus.copy(), track.f_minus.copy())
    kernel = np.ones(window)
    counts = np.convolve(np.ones(track.n_segments), kernel, mode="same")
    return ScoreTrack(
        np.convolve(track.f_plus, kernel, mode="same") / counts,
        np.convolve(track.f_minus, kernel, mode="same") / counts,
    )


def _peak_indices(values: np.ndarray, threshold: float) -> list:
    """Indices of local maxima at or above the threshold.

    A plateau counts once at its leftmost index; stream edges only need the
    inner side to fall away.
    """
    n = len(values)
    peaks = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[j + 1] == values[i]:
            j += 1
        rises = i == 0 or values[i - 1] < values[i]
        falls = j == n - 1 or values[j + 1] < values[i]
        if rises and falls and values[i] >= threshold:
            peaks.append(i)
        i = j + 1
    return peaks


def extract_events(
    track: ScoreTrack,
    beta: float,
    hop_len: float,
    window_len: float = 0.0,
    label: str = "",
) -> list:
    """Pair onset and offset peaks into detected events.

    Onset peaks are taken in order; each consumes the earliest unused offset
    peak at a strictly later segment. The confidence of a detection is the
    smaller of its two peak scores. Segment indices map to the center time of
    the segment.
    """
    onsets = _peak_indices(track.f_plus, beta)
    offsets = _peak_indices(track.f_minus, beta)
    detections = []
    cursor = 0
    for n_on in onsets:
        while cursor < len(offsets) and offsets[cursor] <= n_on:
            cursor += 1
        if cursor == len(offsets):
            break
        n_off = offsets[cursor]
        cursor += 1
        detections.append(
            Detection(
                label=label,
                onset=n_on * hop_len + window_len / 2.0,
                offset=n_off * hop_len + window_len / 2.0,
                confidence=float(
                    min(track.f_plus[n_on], track.f_minus[n_off])
                ),
            )
        )
    return detections


def filter_duration(detections, max_train_duration: float, factor: float = 3.0):
    """Drop detections longer than ``factor`` times the longest training event."""
    if max_train_duration <= 0.0:
        raise ValueError("maximum training duration must be positive")
    limit = factor * max_train_duration
    return [d for d in detections if d.offset - d.onset <= limit]


def detect_on_features(features: FeatureMatrix, forests, configs) -> list:
    """Run detection for several forests over precomputed features."""
    detections = []
    for forest in forests:
        config = configs[forest.class_label] if isinstance(configs, dict) else configs
        track = accumulate(features, forest, config.alpha, config.z_plus,
                           config.z_minus)
        track = smooth(track, config.smooth_window)
        events = extract_events(
            track,
            config.beta,
            features.config.hop_len,
            features.config.window_len,
            forest.class_label,
        )
        if forest.max_train_event_duration is not None:
            events = filter_duration(
                events, forest.max_train_event_duration, config.duration_factor
            )
        detections.extend(events)
    detections.sort(key=lambda d: (d.onset, d.offset, d.label))
    return detections


def detect_stream(waveform: Waveform, forests, configs) -> list:
    """Detect events of all classes in a continuous stream.

    ``configs`` is either one DetectConfig applied to every class or a
    mapping from class label to DetectConfig. All forests must share one
    feature fingerprint; the stream is resampled to the training rate and
    featurized once.
    """
    forests = list(forests)
    if not forests:
        return []
    reference = forests[0].fingerprint()
    if reference is None:
        raise ValueError("model carries no feature fingerprint")
    for forest in forests[1:]:
        if forest.fingerprint() != reference:
            raise ValueError(
                f"feature fingerprint of class {forest.class_label!r} does not "
                f"match class {forests[0].class_label!r}"
            )
    feature_config = forests[0].feature_config
    wave = resample(waveform, feature_config.sample_rate)
    features = gammatone_cepstra(wave, feature_config)
    return detect_on_features(features, forests, configs)


def write_detections(detections, path) -> None:
    """Write detections one per line as tab-separated onset, offset, label."""
    with open(path, "w") as handle:
        for d in detections:
            handle.write(f"{d.onset:.3f}\t{d.offset:.3f}\t{d.label}\n")


def write_scores_csv(track: ScoreTrack, path) -> None:
    """Write the two score tracks with their segment indices."""
    with open(path, "w") as handle:
        handle.write("segment,f_plus,f_minus\n")
        for n in range(track.n_segments):
            handle.write(
                f"{n},{float(track.f_plus[n])!r},{float(track.f_minus[n])!r}\n"
            )
