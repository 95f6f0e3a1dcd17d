"""Multi-modal graph recommender with preserve/impair unlearning."""

from .errors import ConfigError, DataError, NumericError
from .graph import (DatasetSplit, ForgetSpec, InteractionGraph, NormAdj, Partition,
                    build_normalized_adjacency, load_forget_spec, load_interactions,
                    mark_forget, read_mmft, split_dataset, write_mmft)
from .losses import (LossReport, NodeSample, TripleBatch, bpr_divergence, bpr_loss,
                     combined_loss, contrastive_loss, impair_loss, l2_penalty,
                     preserve_loss, reverse_bpr_loss)
from .metrics import (EvalReport, PropertyGaps, evaluate, gaps_to_json, item_metrics,
                      property_gaps, report_from_json, report_to_json, user_metrics)
from .model import (HyperParams, ModelParams, PropagatedState, compute_state,
                    fuse_modalities, init_params, load_checkpoint, propagate,
                    recommend_topk, save_checkpoint, score)
from .seeding import stream_rng
from .synth import generate_synthetic, write_dataset
from .unlearn import (Adam, RunResult, TrainConfig, build_probe, make_triple_batches,
                      retrain_gold, sample_negatives, train, unlearn_amun,
                      unlearn_mmrecun)

__version__ = "0.1.0"
