"""Rehearsal-free continual learning with Mahalanobis class prototypes."""

from .ilfr import IlfrConfig, LayerFeatures, build_representation, standardize_layer
from .linalg import (
    MomentPack,
    SpdInverse,
    batch_moments,
    cosine_sim,
    invert_spd,
    mahalanobis,
    merge_moments,
    minmax01,
    normalize_corr,
    shrink,
)
from .prototypes import (
    ClassKey,
    Prediction,
    PreparedClassifier,
    Prototype,
    PrototypeStore,
    StoreConfig,
    classify,
    classify_fused,
    observe_batch,
    prepare,
)
from .storage import load_store, save_store

__version__ = "0.1.0"
