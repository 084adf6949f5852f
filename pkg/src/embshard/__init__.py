"""Cost-model driven sharding of embedding tables across devices."""

from .errors import ConfigurationError, InvalidArgument, NotSplittable, PlanInvalid, TrainingDiverged
from .oracle import DEFAULT_PARAMS, OracleParams, eval_plan
from .plan import ShardingPlan
from .search import PredictionCache, SearchHyper, beam_search, greedy_grid_search
from .tables import ShardingTask, TableConfig, TablePool, gen_pool, gen_tasks

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "InvalidArgument", "NotSplittable", "PlanInvalid", "TrainingDiverged",
    "DEFAULT_PARAMS", "OracleParams", "eval_plan", "ShardingPlan", "PredictionCache",
    "SearchHyper", "beam_search", "greedy_grid_search", "ShardingTask", "TableConfig",
    "TablePool", "gen_pool", "gen_tasks",
]
