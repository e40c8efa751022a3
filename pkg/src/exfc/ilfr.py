"""Intra-layer feature representation.

Features tapped from several layers of a frozen extractor are resized to
fixed lengths, concatenated (earliest layer first) and range-normalized
into the vector the prototype classifier consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import DimensionError
from .linalg import minmax01


@dataclass(frozen=True)
class LayerFeatures:
    layers: tuple[NDArray[np.float64], ...]
    layer_ids: tuple[int, ...] = ()

    def __post_init__(self):
        layers = tuple(np.asarray(v, dtype=np.float64) for v in self.layers)
        if not layers:
            raise ValueError("at least one layer is required")
        for v in layers:
            if v.ndim != 1 or v.size == 0:
                raise DimensionError(f"layer features must be non-empty vectors, got {v.shape}")
        ids = tuple(self.layer_ids) or tuple(range(len(layers)))
        if len(ids) != len(layers):
            raise ValueError("layer_ids must match the number of layers")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "layer_ids", ids)


@dataclass(frozen=True)
class IlfrConfig:
    k: int = 2
    target_dims: tuple[int, ...] = field(default_factory=tuple)
    normalize: bool = True
    per_layer_normalize: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        dims = tuple(int(t) for t in self.target_dims)
        if dims and len(dims) != self.k:
            raise ValueError(f"need {self.k} target dims, got {len(dims)}")
        if any(t < 1 for t in dims):
            raise ValueError("target dims must be positive")
        object.__setattr__(self, "target_dims", dims)

    def output_dim(self, layer_dims: Sequence[int] | None = None) -> int:
        if self.target_dims:
            return sum(self.target_dims)
        if layer_dims is None:
            raise ValueError("target_dims unset; pass the layer dims")
        return sum(layer_dims[-self.k :])


def standardize_layer(v, target_dim: int) -> NDArray[np.float64]:
    """Resize a vector by contiguous average pooling or index repetition."""
    v = np.asarray(v, dtype=np.float64)
    dim = v.size
    if dim < 1 or target_dim < 1:
        raise ValueError("dims must be positive")
    if target_dim == dim:
        return v.copy()
    if target_dim > dim:
        return v[(np.arange(target_dim) * dim) // target_dim]
    bounds = (np.arange(target_dim + 1) * dim) // target_dim
    sums = np.add.reduceat(v, bounds[:-1])
    return sums / np.diff(bounds)


def standardize_block(x: NDArray, target_dim: int) -> NDArray[np.float64]:
    """:func:`standardize_layer` applied to every row of ``(n, dim)``."""
    x = np.asarray(x, dtype=np.float64)
    dim = x.shape[1]
    if target_dim == dim:
        return x.copy()
    if target_dim > dim:
        return x[:, (np.arange(target_dim) * dim) // target_dim]
    bounds = (np.arange(target_dim + 1) * dim) // target_dim
    return np.add.reduceat(x, bounds[:-1], axis=1) / np.diff(bounds)


def _minmax_rows(x: NDArray) -> NDArray:
    return np.stack([minmax01(row) for row in x]) if len(x) else x


def build_block(layers: Sequence[NDArray], cfg: IlfrConfig) -> NDArray[np.float64]:
    """Representation for ``n`` samples given per-layer ``(n, d_l)`` blocks."""
    if len(layers) < cfg.k:
        raise ValueError(f"need at least {cfg.k} layers, got {len(layers)}")
    chosen = list(layers)[-cfg.k :]
    targets = cfg.target_dims or tuple(np.shape(b)[1] for b in chosen)
    parts = [standardize_block(b, t) for b, t in zip(chosen, targets)]
    if cfg.normalize and cfg.per_layer_normalize:
        return np.concatenate([_minmax_rows(p) for p in parts], axis=1)
    out = np.concatenate(parts, axis=1)
    return _minmax_rows(out) if cfg.normalize else out


def build_representation(lf: LayerFeatures, cfg: IlfrConfig) -> NDArray[np.float64]:
    return build_block([v[None, :] for v in lf.layers], cfg)[0]
