"""Multi-frequency screaming-channel side-channel toolkit.

Simulated or recorded AES traces from several carrier frequencies are
preprocessed, attacked with a profiled correlation attack, fused at the data
or decision level, and evaluated by key rank and guessing entropy.
"""

__version__ = "0.1.0"

from .attack import (LeakageProfile, ProfileError, ScoreMatrix, attack_curve, build_profile,
                     correlation_attack, profile_similarity)
from .evaluation import (Combination, GreedyResult, SweepResult, SweepSpec, greedy_diversity_search,
                         min_traces_for_ge, sweep)
from .fusion import (AggregationFn, FusedTraceSet, FusionWarning, check_fusion_compatibility,
                     data_fusion, decision_fusion)
from .preprocess import DegenerateInputError, PoiSet, select_pois, time_diversity_average, zscore
from .rank import (EvaluationResult, averaged_ge, estimate_key_rank, evaluate,
                   exhaustive_key_rank, guessing_entropy)
from .sim import ChannelModel, SimConfig, intermediate_value, simulate
from .trace_model import (BadMagicError, ChannelMeta, Trace, TraceFormatError, TraceSet,
                          TruncatedPayloadError, VersionMismatchError, read_trace_set,
                          write_trace_set)
