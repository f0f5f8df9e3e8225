"""Picker activity recognition and efficiency analytics for cart telemetry."""

from . import annotate, efficiency, evaluate, ingest, model, synth
from .annotate import (
    DbscanParams,
    FeatureFrame,
    FieldBoundary,
    LabelSequence,
    MassBounds,
    annotate_session,
    dbscan,
    derive_speed,
    mass_valid,
    point_in_polygon,
)
from .efficiency import (
    BreakInterval,
    EfficiencyReport,
    SeasonSummary,
    compute_reports,
    count_trays,
    detect_breaks,
    iqr_filter,
    picker_efficiency,
    season_summary,
    tray_fill_time,
    trim_to_harvest,
)
from .evaluate import (
    AccuracyReport,
    ConfusionCounts,
    PRFScores,
    confusion,
    estimation_accuracy,
    ground_truth_efficiency,
    precision_recall_f1,
)
from .ingest import (
    NOPICK,
    PICK,
    UNLABELED,
    BreakRecord,
    CartSession,
    TelemetrySample,
    TrayCountRecord,
    load_break_log,
    load_session_csv,
    load_tray_counts,
    save_session_csv,
)
from .model import (
    ModelConfig,
    TrainConfig,
    TrainedModel,
    WindowBatch,
    build_model,
    classify_session,
    forward,
    load_model,
    loocv,
    save_model,
    train,
)
from .synth import SynthConfig, SynthTruth, corrupt, generate_day, generate_season

__version__ = "0.1.0"
