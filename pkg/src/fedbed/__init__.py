"""fedbed: a desk-scale federated learning testbed for studying backdoor
attacks against robust aggregation defenses."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import (
    ClientDataset,
    DataError,
    PartitionConfig,
    SampleSet,
    TriggerSpec,
    apply_trigger,
    corner_trigger,
    generate_dataset,
    partition_noniid,
    split_four_way,
)
from .defenses import AggregationResult, DefenseParams, DefenseError, make_defense
from .engine import FLConfig, History, Hyper, RoundRecord, Update, World, run_training
from .metrics import MetricsSummary, accuracy, compute_bsr, compute_mar_bar
from .nn import (
    ArchSpec,
    FlatVector,
    GradientSet,
    LayerBlock,
    Model,
    ShapeError,
    backward,
    build_model,
    flatten,
    forward,
    load_model,
    save_model,
    sgd_step,
    substitute_layers,
    train_local,
    unflatten,
)
from .attacks import (
    AttackConfig,
    AttackError,
    CriticalLayerReport,
    SelectionVector,
    craft_lsa_update,
    finetune_frozen,
    identify_bc_layers,
    make_adversary,
    rank_critical_layers,
)
from .runner import analyze_layers, run, run_experiment, run_matrix, sweep

__version__ = "0.1.0"
