"""Limited-labeled sketch-to-photo retrieval with attribute-guided
adversarial domain adaptation, at desk scale."""

__version__ = "0.1.0"

from .losses import LossWeights
from .training import LossToggles, RunPlan, TrainConfig, run_pipeline

__all__ = ["LossWeights", "LossToggles", "RunPlan", "TrainConfig", "run_pipeline",
           "__version__"]
