"""deskml: a desk-scale deep-learning research micro-framework.

Plug-in models (architecture + loss + metrics) behind a registry,
sharded synthetic data pipelines, simulated data-parallel trainers with
normalizer-weighted metric aggregation, bipartite matchers, and six
baseline models, all on a small numpy autodiff core.
"""

from . import baselines  # noqa: F401  (registers the baseline catalog)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, load_config, override
from .matchers import Assignment, greedy_match, hungarian, sinkhorn_match
from .data import Dataset, DatasetMetaData, ShardSpec, build_dataset
from .models import ModelContract, get_model_cls, register_model, registered_models
from .rng import RngKey
from .tensor import Tensor, grad, value_and_grad
from .train import OptimizerSpec, Topology, TrainState, run_trainer

__all__ = [
    "Assignment", "greedy_match", "hungarian", "sinkhorn_match",
    "load_checkpoint", "save_checkpoint",
    "Config", "load_config", "override",
    "Dataset", "DatasetMetaData", "ShardSpec", "build_dataset",
    "ModelContract", "get_model_cls", "register_model", "registered_models",
    "RngKey", "Tensor", "grad", "value_and_grad",
    "OptimizerSpec", "Topology", "TrainState", "run_trainer",
]

__version__ = "0.1.0"
