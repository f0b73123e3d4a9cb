"""Federated continual learning at desk scale.

Simulates a synchronous federation of clients that each learn a private
sequence of classification tasks. Past knowledge is retained through a
conditional normalizing flow trained in the classifier's feature space;
replayed features are re-weighted by their density under the current
task so that off-distribution (biased or noisy) memories are forgotten
instead of reinforced.
"""

__version__ = "0.1.0"

from affcl.errors import ConfigError
from affcl.flow import FlowModel, GeneratedBatch, nf_loss
from affcl.classifier import SplitClassifier, FrozenSnapshot
from affcl.metrics import AccuracyMatrix, average_accuracy, average_forgetting

__all__ = [
    "ConfigError",
    "FlowModel",
    "GeneratedBatch",
    "nf_loss",
    "SplitClassifier",
    "FrozenSnapshot",
    "AccuracyMatrix",
    "average_accuracy",
    "average_forgetting",
    "__version__",
]
