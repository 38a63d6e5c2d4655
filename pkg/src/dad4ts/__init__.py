"""Rectified-flow data augmentation with RL sample selection for forecasting."""

from .conditioner import (
    Condition,
    ExecutableProvider,
    MoeGate,
    ProviderRegistry,
    RandomProjectionProvider,
    cfg_dropout,
    embed,
    moe_gate,
    null_condition,
)
from .data import (
    SplitDataset,
    TimeSeriesDataset,
    WindowBatch,
    load_series,
    split_normalize,
    stl_gaussian_augment,
    window_batches,
)
from .forecast import (
    Forecaster,
    TrainConfig,
    evaluate_split,
    make_forecaster,
    train_with_early_stopping,
)
from .geometry import (
    GeometricSample,
    PcaState,
    decode_sample,
    encode_batch,
    fit_pca,
    gram_matrix,
)
from .metrics import ResultCell, dtw, improvement_stats, rmse
from .pipeline import ExperimentConfig, dvrlg_epoch, run_experiment, warmup_baseline_loss
from .rectflow import (
    SamplerConfig,
    VelocityModel,
    VelocityModelConfig,
    cfg_generate,
    cfg_sample_state,
    rf_loss,
    sample_trajectory,
)
from .selector import (
    RewardState,
    SelectionDecision,
    SelectorParams,
    compute_reward,
    draw_mask,
    score_samples,
    selector_update,
)

__version__ = "0.1.0"
