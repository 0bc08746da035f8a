"""Cross-condition target speech extraction toolkit."""

from .dsp import ComplexSpectrogram, SpectroConfig, Waveform, drc_compress, drc_expand, istft, stft
from .errors import ConfigError, DataError, DomainError, ShapeError, TrainingFailure, XtseError
from .metrics import MetricRow, pesq_external, si_sdr, stoi
from .losses import LossBundle, consistency_loss, si_sdr_loss, total_loss
from .data import (
    ALL_CONDITIONS,
    COND_BOTH,
    COND_CLEAN,
    COND_SINGLE,
    ConditionTriplet,
    SourceClip,
    TrainingMode,
    build_pool,
    load_libri2mix_manifest,
    make_triplet,
    mix_min,
    sample_batch,
    synth_corpus,
)
from .model import BackboneParams, DenoiserParams, Extractor, context_interaction, parallel_forward
from .training import ScheduleConfig, StageConfig, TrainConfig, clip_gradients, lr_at, run_training, train_step
from .report import EvalReport, consistency_gap, denoiser_probe, evaluate, render_report

__version__ = "0.1.0"
