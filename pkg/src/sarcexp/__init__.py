"""Multimodal sarcasm explanation: cross-modal encoder-decoder, training,
metrics and analysis."""

from .analysis import (
    ADEQUACY_SCALE,
    PosTable,
    Rating,
    RatingError,
    RatingSet,
    fleiss_kappa,
    fleiss_kappa_counts,
    human_eval_summary,
    pos_overlap_table,
)
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, resolve_config
from .data import Sample, TokenSeq, Vocabulary, build_vocabulary, decode, encode, tokenize
from .encoder import CrossModalEncoder, EncoderState, cross_modal_attention
from .estimator import SarcasmDetector, SarcasmExplainer, check_samples
from .gate import FusionGate, gate_forward
from .generator import GenerationConfig, beam_search, greedy_search, lm_loss
from .ingestion import Dataset, DatasetError, compute_stats, load_dataset, split_dataset, validate_exclusions
from .metrics import MetricReport, bleu, evaluate_corpus, meteor, rouge_l, rouge_n
from .model import ExMore, ModelConfig, build_model, decode_step, generate
from .reports import emit_report
from .training import TrainConfig, finetune, pretrain

__version__ = "0.1.0"
