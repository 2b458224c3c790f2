"""dollkit: pseudo segmentation labels distilled from classifier explanations.

Weak multi-label classifiers are explained with integrated gradients, their
maps are combined with boosting weights and binarized into per-observation
masks (DoLL labels), and those masks pre-train a segmentation model whose
frozen backbone then serves few-shot downstream tasks.
"""
__version__ = "0.1.0"

from .datagen import CorpusConfig, generate_corpus  # noqa: E402,F401
from .doll import BoostWeights, DoLLMask, PipelineConfig, generate_doll, generate_dolls  # noqa: E402,F401
from .explain import integrated_gradients  # noqa: E402,F401
