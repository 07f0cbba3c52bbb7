"""The two caches: class-text rows with an instance-wise additive bias, and
support-image rows with learnable offsets (or a free linear layer).

Renormalization after bias addition defaults ON for both caches. Without it
the textual branch is degenerate: adding the same bias vector to every text
row shifts every class logit by one identical scalar, so the softmax, the
argmax, and the gradient into the bias are all unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import EmbeddingSet
from .errors import ContractError, ShapeError, ValidationError
from .numerics import l2_normalize_rows, one_hot

VISUAL_MODES = ("fixed", "linear", "biases")


@dataclass
class TextualCache:
    class_texts: np.ndarray         # (c, dim) unit-norm rows, class order
    renormalize: bool = True

    @property
    def num_classes(self) -> int:
        return self.class_texts.shape[0]

    @property
    def dim(self) -> int:
        return self.class_texts.shape[1]


def build_textual_cache(text_set: EmbeddingSet,
                        renormalize: bool = True) -> TextualCache:
    if text_set.role != "text":
        raise ValidationError(f"expected a text set, got role {text_set.role!r}")
    text_set.validate()
    return TextualCache(np.array(text_set.features), renormalize)


def adapt_textual_cache(cache: TextualCache, s: np.ndarray) -> np.ndarray:
    """Add the same bias vector s to every text row; renormalize if enabled."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (cache.dim,):
        raise ShapeError(f"bias length {s.shape} != (dim,) = ({cache.dim},)")
    if not s.any():
        # exact identity at zero bias (rows are already unit)
        return cache.class_texts.copy()
    adapted = cache.class_texts + s[None, :]
    if cache.renormalize:
        adapted, _ = l2_normalize_rows(adapted)
    return adapted


@dataclass
class VisualCache:
    support: np.ndarray              # (n*k, dim) unit-norm rows, frozen
    labels_onehot: np.ndarray        # (n*k, c), frozen
    mode: str = "biases"             # fixed | linear | biases
    renormalize: bool = True
    biases: np.ndarray | None = None       # (n*k, dim), zero at init (mode=biases)
    linear: np.ndarray | None = None       # (n*k, dim), copy of support (mode=linear)

    @property
    def rows(self) -> int:
        return self.support.shape[0]

    @property
    def dim(self) -> int:
        return self.support.shape[1]


def build_visual_cache(support_set: EmbeddingSet, num_classes: int,
                       mode: str = "biases",
                       renormalize: bool = True) -> VisualCache:
    if mode not in VISUAL_MODES:
        raise ValidationError(f"unknown visual cache mode {mode!r}")
    support_set.validate()
    present = np.unique(support_set.labels)
    if present.size != num_classes:
        missing = sorted(set(range(num_classes)) - set(present.tolist()))
        raise ValidationError(f"support set missing classes {missing}")
    support = np.array(support_set.features)
    cache = VisualCache(support, one_hot(support_set.labels, num_classes),
                        mode, renormalize)
    if mode == "biases":
        cache.biases = np.zeros_like(support)
    elif mode == "linear":
        # free weight rows initialized from the support
        # rows, no additive decomposition and no renormalization afterwards.
        cache.linear = np.array(support)
    return cache


def effective_visual_cache(cache: VisualCache) -> tuple[np.ndarray, int]:
    """support + biases (renormalized if enabled) and the advisory count of
    rows that collapsed to zero norm. Linear mode bypasses this op."""
    if cache.mode == "linear":
        raise ContractError("effective_visual_cache does not apply in linear mode")
    if cache.mode == "fixed" or not cache.biases.any():
        return cache.support.copy(), 0
    rows = cache.support + cache.biases
    zero_rows = 0
    if cache.renormalize:
        rows, zero_rows = l2_normalize_rows(rows)
    return rows, zero_rows
