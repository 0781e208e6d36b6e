"""Detection of possibly overlapping audio events in continuous streams.

Per-class decision forests classify short analysis segments and regress
their position inside an event; leaf votes accumulate into onset and offset
score curves whose paired peaks become detections.
"""

from .dataset import (
    EventAnnotation,
    MixtureSpec,
    Segment,
    SynthBenchmark,
    build_training_segments,
    inject_background_segments,
    label_segments,
    mix_overlap,
    parse_annotations,
    scale_to_snr,
    synth_benchmark,
    write_annotations,
)
from .detect import (
    DetectConfig,
    Detection,
    ScoreTrack,
    accumulate,
    descend,
    detect_stream,
    extract_events,
    filter_duration,
    smooth,
    vote_forest,
    vote_tree,
    write_detections,
)
from .evaluate import (
    EventScore,
    SegmentScore,
    TuneFold,
    TuneResult,
    event_metrics,
    load_thresholds,
    save_thresholds,
    segment_metrics,
    tune_thresholds,
)
from .features import (
    FeatureConfig,
    FeatureMatrix,
    Waveform,
    gammatone_cepstra,
    load_audio,
    resample,
    subtract_noise_floor,
)
from .forest import (
    Forest,
    ForestConfig,
    LeafModel,
    SplitNode,
    calibrate,
    distance_variation,
    draw_candidates,
    entropy,
    info_gain,
    load_forest,
    make_leaf,
    save_forest,
    select_best_test,
    split_test,
    train_forest,
    train_tree,
)

__version__ = "0.1.0"
