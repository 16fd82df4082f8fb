"""Single-branch, weight-shared multimodal classification robust to missing modalities."""

from .data import (
    EmbeddingBank,
    MaskSpec,
    NoiseSpec,
    PairedDataset,
    apply_mask,
    corrupt,
    gen_synthetic,
    pair_banks,
    read_bank,
    split,
    write_bank,
)
from .evaluate import (
    accuracy,
    auroc,
    degradation_delta,
    dump_block2,
    format_delta,
    sweep_corruption,
    sweep_missing,
)
from .models import (
    Model,
    ModelConfig,
    OptimizerConfig,
    build_model,
    build_two_branch,
    forward,
    load_model,
    predict,
    predict_dataset,
    save_model,
    train,
)
from .switch import SwitchStrategy, plan_epoch, strategy_stats

__version__ = "0.1.0"
