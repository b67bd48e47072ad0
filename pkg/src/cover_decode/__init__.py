"""Conformal calibration and decoding for autoregressive next-token
prediction: cluster-step adaptive thresholds with baseline conformal
decoders, PAC bound calculators, and a synthetic generator for checking
every guarantee by simulation."""

from .traces import ScoreTrace, CalibrationSplit, quantile, split_dataset, load_traces, save_traces
from .scorer import (
    Scorer,
    TabularARModel,
    LongTailConfig,
    make_longtail_model,
    make_uniform_model,
    sample_dataset,
    sequence_score,
    next_token_scores,
)
from .baseline import (
    DCBSCalibration,
    BeamSet,
    split_cp_calibrate,
    beam_search,
    beam_subgroup_calibrate,
    dcbs_calibrate,
    dcbs_decode,
)
from .clustering import ClusterAssignment, QuantileEmbedding, bucket_steps, build_assignment
from .cover import (
    BetaMatrix,
    CalibratedModel,
    PathEvalRecord,
    calibrate,
    cover_decode,
    optimize,
)
from .pac import (
    PairStats,
    BoundReport,
    empirical_bernstein,
    hoeffding_upper,
    pair_failure_bound,
    full_path_bound,
    beta_quantile,
    decomposition_audit,
)
from .harness import EvalReport, evaluate, compare, emit_report, dcbs_to_calibrated

__version__ = "0.1.0"
