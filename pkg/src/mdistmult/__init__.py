"""MDistMult: several DistMult scorers sharing one tail table, trained jointly."""
from .evaluation import EvalConfig, MetricsReport, RankingResult, compute_metrics, evaluate, rank_tail
from .kg import (
    DataError,
    FilterIndex,
    Triple,
    TripleSet,
    Vocab,
    augment_with_inverses,
    build_filter_index,
    build_vocab,
    load_triples,
)
from .model import (
    ModelConfig,
    ParameterSet,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
    score_all,
    score_all_tails,
    score_module,
)
from .synthetic import ToySpec, generate
from .training import (
    AdamState,
    DivergenceError,
    TrainConfig,
    adam_step,
    compute_gradients,
    finite_difference_check,
    joint_loss,
    train,
)

__version__ = "0.1.0"
