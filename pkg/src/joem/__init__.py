"""Joint-embedding zero-shot semantic segmentation in numpy.

Submodules: ``resample``, ``embedding``, ``losses``, ``model``,
``inference``, ``data``, ``evaluate``, ``pipeline`` and the ``cli``.
"""

from joem.data import SceneSpec, SplitSpec, default_split, gen_semantic_table, make_benchmark
from joem.embedding import PrototypeSet, SemanticTable
from joem.errors import JoemError
from joem.evaluate import hiou
from joem.model import ModelParams, TrainConfig, train

__version__ = "0.1.0"
