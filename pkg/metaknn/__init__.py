"""Top-level package for metaknn."""

from importlib.metadata import PackageNotFoundError, version

from .analysis import GoldProbSeries, NeighborQuality, WordStats
from .contexts import ContextPairs
from .datastore import Datastore, Metric, NeighborSet
from .exceptions import DatastoreFormatError, EmptyDatastoreError, MetaKnnError, MissingInputError, NumericError
from .finetune import FtHyper, GridSpec, finetune_full, opl_gradient
from .meta_optimizer import GradMatrix, dual_residual, meta_gradient
from .prediction import Hyper, ProbVector, Projection, ScoredToken, Variant, score_sequence
from .synthdata import SynthConfig, SynthTask, base_projection, gen_task

try:
    __version__ = version("metaknn")
except PackageNotFoundError:
    __version__ = "unknown"

__all__ = [
    "ContextPairs",
    "Datastore",
    "DatastoreFormatError",
    "EmptyDatastoreError",
    "FtHyper",
    "GoldProbSeries",
    "GradMatrix",
    "GridSpec",
    "Hyper",
    "MetaKnnError",
    "Metric",
    "MissingInputError",
    "NeighborQuality",
    "NeighborSet",
    "NumericError",
    "ProbVector",
    "Projection",
    "ScoredToken",
    "SynthConfig",
    "SynthTask",
    "Variant",
    "WordStats",
    "base_projection",
    "dual_residual",
    "finetune_full",
    "gen_task",
    "meta_gradient",
    "opl_gradient",
    "score_sequence",
    "__version__",
]
