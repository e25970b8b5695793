"""Robustness diagnostics for multichannel physiological time-series models.

The toolkit reproduces a full diagnostic loop at desk scale: apply
acquisition-style data shifts to raw signals, embed epochs with spectral
or small neural encoders, score latent-space integrity with
neighborhood-graph edge heterogeneity, and quantify predictive
uncertainty with Monte Carlo dropout.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, parse_config, serialize_config
from .encoders import BANDS, Embedding, EmbeddingSet, band_power, psd_encode
from .latent_topology import (
    build_neighborhood_graph,
    delaunay_exact_2d,
    gabriel_graph,
    integrity_score,
    quality,
)
from .metrics_report import EvaluationRow, auc, emit_report, evaluate_condition, mae
from .shifts import ShiftKind, ShiftSpec, apply, default_grid, parse_shift
from .signal_core import (
    ChannelLayout,
    MultichannelEpoch,
    RawRecording,
    Recording,
    bandpass,
    clip,
    epoch_split,
    normalize_per_channel,
    preprocess,
    reject_bad_epochs,
    resample,
)
from .synth import SyntheticSpec, synth_generate
from .training import Model, TrainConfig, build_model, loss_bce, loss_smooth_l1, train
from .uncertainty import (
    AgreementConfig,
    McdPredictionSet,
    agreement_index,
    aggregate_recording,
    mc_mean,
    mc_var,
    mcd_predict,
)

__all__ = [name for name in dir() if not name.startswith("_")]
