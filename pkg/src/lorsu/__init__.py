"""Low-rank adaptation with structured updates, in a desk-scale continual-learning harness."""
from .adapt import LoRSU, lorsu_count, make_strategy, trainable_count
from .dataio import SyntheticSpec, generate, read_dataset, write_dataset
from .encoder import DualEncoder, EncoderConfig
from .harness import make_splits, metric_acc_bwt, metric_cc, metric_ti, run_continual
from .select import build_selection_plan, optimal_group_mask, top_c
from .train import clip_loss, train_session

__all__ = [
    "DualEncoder", "EncoderConfig", "LoRSU", "SyntheticSpec", "build_selection_plan", "clip_loss", "generate",
    "lorsu_count", "make_splits", "make_strategy", "metric_acc_bwt", "metric_cc", "metric_ti", "optimal_group_mask",
    "read_dataset", "run_continual", "top_c", "train_session", "trainable_count", "write_dataset",
]
__version__ = "0.1.0"
