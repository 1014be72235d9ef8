"""Step discovery and localization on embedding sequences.

A slot-query transformer decoder turns a video embedding sequence into K
ordered step slots; drop-aware DTW aligns slots with narration phrases for
training and with video frames for localization. Includes the synthetic
benchmark generator and the unsupervised / zero-shot evaluation protocols.
"""

from .align import (CostSpec, brute_force_align, drop_dtw, dtw,
                    match_cost_matrix, percentile_drop_cost)
from .core import (BACKGROUND, Correspondence, DataError, DatasetSample,
                   EmbeddingSequence, SegmentLabeling, StepalignError,
                   load_manifest, read_embedding_file, write_embedding_file)
from .evaluation import (MetricsReport, framewise_metrics, hungarian,
                         keep_top_fraction, kmeans, unsupervised_protocol,
                         zero_shot_protocol)
from .infer import (localize_steps, nearest_slot_baseline, zero_shot_localize,
                    zero_shot_nearest_baseline)
from .losses import (ContrastiveConfig, LossBreakdown, diversity_reg,
                     global_loss, info_nce, seq_loss, smoothness_reg, total_loss)
from .model import (ModelConfig, ModelParams, attention_map, forward,
                    init_params, load_checkpoint, save_checkpoint, sinusoidal_pe)
from .synth import SynthConfig, generate
from .training import TrainConfig, lr_at, train

__version__ = "0.1.0"
