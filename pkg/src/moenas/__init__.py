"""Multiobjective evolutionary architecture search for 2D/3D encoder-decoder
segmentation networks, with the surrounding ensembling and metric machinery."""

__version__ = "0.1.0"

from .genome import (  # noqa: F401
    Genome, SearchSpace, default_search_space, discretized_search_space,
    random_genome, crossover, mutate, mutation_rate, validate_genome,
)
from .archmodel import (  # noqa: F401
    ArchitecturePlan, LayerSpec, build_plan, count_parameters, describe,
    filters_per_block,
)
from .objectives import (  # noqa: F401
    EvalResult, ObjectiveVector, dice_coefficient, f1_objective, objective_vector,
)
from .moead import (  # noqa: F401
    ParetoArchive, Search, SearchConfig, run_search, select_final, update_archive,
)
from .evaluator import (  # noqa: F401
    CachedEvaluator, EvaluationError, ProtocolError, SurrogateEvaluator,
    WorkerClient, WorkerPool,
)
