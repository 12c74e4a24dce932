"""Self-supervised incremental instance learning on a numpy autodiff core."""

from .config import ExperimentConfig
from .runner import RunRecord, run_experiment

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "RunRecord", "run_experiment", "__version__"]
