from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .experiments import (
    RunRecord,
    TrainingDiverged,
    baseline_pretrain,
    evaluate_adaptation,
    run_experiment,
    run_order_check,
    streams,
)
