import numpy as np
import pytest

from atc.caches import (TextualCache, VisualCache, adapt_textual_cache,
                        build_textual_cache, build_visual_cache,
                        effective_visual_cache)
from atc.dataio import EmbeddingSet, SynthConfig, synth_dataset
from atc.errors import ContractError, ShapeError, ValidationError
from atc.numerics import Rng, l2_normalize_rows


def _sets(n=3, dim=8, k=2, seed=1):
    return synth_dataset(SynthConfig(num_classes=n, dim=dim, shots=k,
                                     queries_per_class=2, seed=seed))


def test_build_textual_cache_role_check():
    sets = _sets()
    with pytest.raises(ValidationError):
        build_textual_cache(sets["support"])


def test_build_textual_cache_shape():
    sets = _sets(n=10, dim=64)
    cache = build_textual_cache(sets["text"])
    assert cache.class_texts.shape == (10, 64)


def test_adapt_zero_bias_is_identity():
    cache = build_textual_cache(_sets()["text"])
    adapted = adapt_textual_cache(cache, np.zeros(8))
    assert np.array_equal(adapted, cache.class_texts)


def test_adapt_shape_error():
    cache = build_textual_cache(_sets()["text"])
    with pytest.raises(ShapeError):
        adapt_textual_cache(cache, np.zeros(5))


def test_uniform_bias_shifts_all_logits_equally_without_renorm():
    cache = build_textual_cache(_sets(n=4, dim=8)["text"])
    cache.renormalize = False
    f = Rng(2).normal(8)
    f /= np.linalg.norm(f)
    s = Rng(3).normal(8)
    base = cache.class_texts @ f
    adapted = adapt_textual_cache(cache, s) @ f
    deltas = adapted - base
    assert np.max(np.abs(deltas - float(f @ s))) < 1e-12
    assert np.max(deltas) - np.min(deltas) < 1e-12


def test_renorm_hand_computed_instance():
    cache = TextualCache(np.eye(2), renormalize=True)
    adapted = adapt_textual_cache(cache, np.array([0.0, 0.5]))
    # rows [1, .5] and [0, 1.5] with norms sqrt(1.25) and 1.5
    assert abs(adapted[0] @ np.array([1.0, 0.0]) - 1 / np.sqrt(1.25)) < 1e-12
    assert abs(adapted[1] @ np.array([1.0, 0.0]) - 0.0) < 1e-12


def test_renorm_can_flip_argmax():
    cache = TextualCache(np.eye(2), renormalize=True)
    f = np.array([0.6, 0.8])
    base = np.argmax(adapt_textual_cache(cache, np.zeros(2)) @ f)
    flipped = np.argmax(adapt_textual_cache(cache, np.array([-0.4, 0.8])) @ f)
    assert base == 1 and flipped == 0


def test_build_visual_cache_counts():
    sets = _sets(n=3, dim=8, k=2)
    cache = build_visual_cache(sets["support"], 3)
    assert cache.support.shape == (6, 8)
    assert cache.labels_onehot.shape == (6, 3)
    assert np.array_equal(cache.labels_onehot.sum(axis=0), [2.0, 2.0, 2.0])
    assert np.all(cache.biases == 0.0)


def test_build_visual_cache_missing_class():
    sets = _sets(n=3)
    with pytest.raises(ValidationError, match="missing"):
        build_visual_cache(sets["support"], 4)


def test_effective_cache_zero_biases_bitwise():
    cache = build_visual_cache(_sets()["support"], 3)
    rows, zeros = effective_visual_cache(cache)
    assert np.array_equal(rows, cache.support)
    assert zeros == 0


def test_effective_cache_cancellation_counts_zero_rows():
    cache = build_visual_cache(_sets()["support"], 3)
    cache.biases = -cache.support
    rows, zeros = effective_visual_cache(cache)
    assert np.all(rows == 0.0)
    assert zeros == cache.rows


def test_effective_cache_linear_mode_rejected():
    cache = build_visual_cache(_sets()["support"], 3, mode="linear")
    with pytest.raises(ContractError):
        effective_visual_cache(cache)


def test_fixed_mode_has_no_trainable_tensors():
    cache = build_visual_cache(_sets()["support"], 3, mode="fixed")
    assert cache.biases is None and cache.linear is None


def test_linear_mode_initialized_from_support():
    cache = build_visual_cache(_sets()["support"], 3, mode="linear")
    assert np.array_equal(cache.linear, cache.support)
    assert cache.linear is not cache.support
