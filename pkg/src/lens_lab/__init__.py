"""Language subspace probing and manipulation (LENS) on a toy multilingual transformer.

The numerical core (:mod:`subspace`, :mod:`losses`) works on plain numpy
arrays and accepts hidden states from any model. The rest of the package is
a small end-to-end testbed: a synthetic parallel corpus, a numpy decoder-only
transformer with manual backprop, training loops and evaluation metrics.
"""

from .errors import ArgumentError, ConfigError, FormatError, LensError, NumericalError
from .losses import LensWeights, total_loss
from .model import ModelConfig, ToyTransformer, load_checkpoint, save_checkpoint
from .subspace import LanguageSet, MeanEmbeddings, SubspaceModel, mean_embeddings, probe

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "ConfigError", "FormatError", "LensError", "NumericalError",
    "LensWeights", "total_loss", "ModelConfig", "ToyTransformer", "load_checkpoint", "save_checkpoint",
    "LanguageSet", "MeanEmbeddings", "SubspaceModel", "mean_embeddings", "probe",
]
