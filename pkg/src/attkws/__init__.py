"""Attention-based end-to-end small-footprint keyword spotting in numpy."""
from .audio_features import FrontEndConfig, PcenConfig, featurize, read_features, write_features
from .evaluation import frr_at_fa, roc, score_dataset
from .models import (ModelConfig, build_model, count_params, detect_score, dnn_baseline_config, load_checkpoint,
                     e2e_config, save_checkpoint)
from .numerics import make_rng
from .streaming import detect, new_state, push_frame, stream_scores
from .training import TrainConfig, load_dataset, load_manifest, train

__all__ = [
    "FrontEndConfig", "PcenConfig", "featurize", "read_features", "write_features",
    "frr_at_fa", "roc", "score_dataset",
    "ModelConfig", "build_model", "count_params", "detect_score", "dnn_baseline_config", "e2e_config",
    "load_checkpoint", "save_checkpoint",
    "make_rng",
    "detect", "new_state", "push_frame", "stream_scores",
    "TrainConfig", "load_dataset", "load_manifest", "train",
]
__version__ = "0.1.0"
