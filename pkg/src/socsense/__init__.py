"""Multi-sensor battery SOC estimation with an explainable LSTM regressor."""

from .errors import (
    ChannelSetError,
    ConfigError,
    DivergenceError,
    NonFiniteError,
    ProtocolError,
    SchemaError,
    ShapeError,
    SocsenseError,
)
from .evaluation import (
    AblationConfig,
    AblationResult,
    MetricReport,
    evaluate_predictions,
    mae,
    rmse,
    run_ablation,
    steady_state_filter,
)
from .lstm import (
    LstmLayerParams,
    LstmModel,
    TrainConfig,
    backward,
    cell_step,
    forward_batch,
    forward_sequence,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
    train,
)
from .numerics import AdamState, adam_update, affine, sigmoid, tanh_act, uniform_init
from .sensitivity import (
    IntervalPartition,
    SensitivityProfile,
    SensitivitySummary,
    build_partition,
    build_partitions,
    profile,
    sensitivity_at,
    summarize,
)
from .signals import (
    ChannelSet,
    ChannelStats,
    SignalMatrix,
    WindowedDataset,
    add_temperature_decomposition,
    decompose_temperature,
    load_csv,
    load_manifest,
    make_windows,
    normalize,
    prepare_dataset,
    resolve_channel_set,
    split_train_test,
)
from .synthcell import CellConfig, Protocol, SCENARIOS, generate_suite, simulate

__version__ = "0.1.0"
