"""Mixed-audio deepfake dataset construction and multi-stream prompt-tuned detection."""
from .audio_io import Waveform, fix_length, read_wav, resample, write_wav
from .evaluation import compute_eer, run_ablation, snr_bucketed_eval, subtask_labels
from .mix_engine import (MixManifest, MixSpec, SourceEntry, align_background, build_dataset,
                         generate_toy_corpus, measure_snr, mix, plan_pairs, snr_gain)
from .model import ModelConfig, PromptTuningDetector
from .training import AdamW, TrainConfig, bce_loss, train

__version__ = "0.1.0"
