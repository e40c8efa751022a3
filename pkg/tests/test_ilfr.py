import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from exfc.errors import DimensionError
from exfc.ilfr import (
    IlfrConfig,
    LayerFeatures,
    build_block,
    build_representation,
    standardize_block,
    standardize_layer,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def naive_pool(v, target):
    """Oracle: explicit chunk loop."""
    dim = len(v)
    if target >= dim:
        return np.array([v[(j * dim) // target] for j in range(target)], dtype=float)
    out = []
    for j in range(target):
        lo, hi = (j * dim) // target, ((j + 1) * dim) // target
        out.append(sum(v[lo:hi]) / (hi - lo))
    return np.array(out)


class TestStandardizeLayer:
    def test_downsample_example(self):
        np.testing.assert_array_equal(standardize_layer([1, 2, 3, 4], 2), [1.5, 3.5])

    def test_upsample_example(self):
        np.testing.assert_array_equal(standardize_layer([1, 2], 4), [1, 1, 2, 2])

    def test_identity(self):
        v = np.array([3.0, -1.0, 2.5])
        out = standardize_layer(v, 3)
        np.testing.assert_array_equal(out, v)
        assert out is not v

    def test_uneven_chunks(self):
        # bounds 0, 1, 3, 5
        np.testing.assert_allclose(standardize_layer([1, 2, 3, 4, 5], 3), [1.0, 2.5, 4.5])

    def test_bad_target(self):
        with pytest.raises(ValueError):
            standardize_layer([1.0], 0)

    @given(arrays(np.float64, st.integers(1, 40), elements=finite), st.integers(1, 60))
    @settings(max_examples=80, deadline=None)
    def test_matches_oracle(self, v, target):
        np.testing.assert_allclose(standardize_layer(v, target), naive_pool(list(v), target),
                                   rtol=1e-12, atol=1e-9)

    @given(arrays(np.float64, st.integers(1, 8), elements=finite), st.integers(1, 6))
    @settings(max_examples=50, deadline=None)
    def test_mean_preserved_for_integer_ratio(self, base, ratio):
        v = np.repeat(base, ratio)[np.random.default_rng(0).permutation(base.size * ratio)]
        out = standardize_layer(v, base.size)
        assert out.mean() == pytest.approx(v.mean(), rel=1e-9, abs=1e-9)

    def test_block_matches_rows(self):
        x = np.random.default_rng(1).normal(size=(6, 11))
        for t in (3, 11, 17):
            block = standardize_block(x, t)
            for i in range(6):
                np.testing.assert_allclose(block[i], standardize_layer(x[i], t), rtol=1e-14)


class TestBuildRepresentation:
    def test_single_layer_normalized(self):
        lf = LayerFeatures(([2.0, 4.0, 6.0],))
        np.testing.assert_allclose(build_representation(lf, IlfrConfig(k=1)), [0, 0.5, 1])

    def test_concat_without_normalize(self):
        lf = LayerFeatures(([1.0, 1.0], [3.0, 3.0]))
        out = build_representation(lf, IlfrConfig(k=2, target_dims=(2, 2), normalize=False))
        np.testing.assert_array_equal(out, [1, 1, 3, 3])

    def test_concat_with_normalize(self):
        lf = LayerFeatures(([1.0, 1.0], [3.0, 3.0]))
        out = build_representation(lf, IlfrConfig(k=2, target_dims=(2, 2)))
        np.testing.assert_array_equal(out, [0, 0, 1, 1])

    def test_per_layer_normalize(self):
        lf = LayerFeatures(([1.0, 2.0], [10.0, 30.0]))
        out = build_representation(lf, IlfrConfig(k=2, per_layer_normalize=True))
        np.testing.assert_array_equal(out, [0, 1, 0, 1])

    def test_last_k_layers_used(self):
        lf = LayerFeatures(([9.0], [1.0], [2.0]))
        out = build_representation(lf, IlfrConfig(k=2, normalize=False))
        np.testing.assert_array_equal(out, [1, 2])

    def test_too_few_layers(self):
        with pytest.raises(ValueError, match="at least 3"):
            build_representation(LayerFeatures(([1.0], [2.0])), IlfrConfig(k=3))

    def test_order_sensitive(self):
        a, b = [1.0, 5.0], [2.0, 3.0, 4.0]
        cfg = IlfrConfig(k=2, target_dims=(2, 2), normalize=False)
        assert not np.array_equal(build_representation(LayerFeatures((a, b)), cfg),
                                  build_representation(LayerFeatures((b, a)), cfg))

    @given(st.lists(arrays(np.float64, st.integers(1, 20), elements=finite), min_size=1, max_size=4),
           st.data())
    @settings(max_examples=60, deadline=None)
    def test_length_and_range(self, layers, data):
        k = data.draw(st.integers(1, len(layers)))
        targets = tuple(data.draw(st.lists(st.integers(1, 16), min_size=k, max_size=k)))
        out = build_representation(LayerFeatures(tuple(layers)), IlfrConfig(k, targets))
        assert out.size == sum(targets)
        if np.ptp(out) > 0:
            assert out.min() == 0.0 and out.max() == 1.0

    def test_block_equals_per_sample(self):
        rng = np.random.default_rng(3)
        l1, l2 = rng.normal(size=(5, 7)), rng.normal(size=(5, 4))
        cfg = IlfrConfig(k=2, target_dims=(3, 6))
        block = build_block([l1, l2], cfg)
        for i in range(5):
            np.testing.assert_array_equal(block[i], build_representation(LayerFeatures((l1[i], l2[i])), cfg))


class TestConfig:
    def test_output_dim(self):
        assert IlfrConfig(k=2, target_dims=(3, 4)).output_dim() == 7
        assert IlfrConfig(k=2).output_dim([5, 6, 7]) == 13

    def test_validation(self):
        with pytest.raises(ValueError):
            IlfrConfig(k=0)
        with pytest.raises(ValueError):
            IlfrConfig(k=2, target_dims=(3,))
        with pytest.raises(ValueError):
            IlfrConfig(k=1, target_dims=(0,))

    def test_layer_features_validation(self):
        with pytest.raises(ValueError):
            LayerFeatures(())
        with pytest.raises(DimensionError):
            LayerFeatures(([],))
        with pytest.raises(ValueError):
            LayerFeatures(([1.0],), layer_ids=(0, 1))
