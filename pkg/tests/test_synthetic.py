import warnings

import numpy as np
import pytest

from exfc.synthetic import (
    ConditioningWarning,
    LayerSpec,
    SyntheticSpec,
    class_means,
    generate_synthetic,
)


class TestClassMeans:
    @pytest.mark.parametrize("n,dim", [(10, 32), (10, 4), (3, 2), (5, 5)])
    def test_min_distance(self, n, dim):
        m = class_means(n, dim, 7.0, np.random.default_rng(0))
        d = np.linalg.norm(m[:, None] - m[None, :], axis=2)[np.triu_indices(n, 1)]
        assert d.min() == pytest.approx(7.0, rel=1e-12)

    def test_zero_distance(self):
        assert not class_means(4, 3, 0.0, np.random.default_rng(0)).any()


class TestGenerate:
    def test_structure(self):
        ds = generate_synthetic(SyntheticSpec(seed=0))
        assert ds.manifest.domain_ids == [0, 1]
        for d in (0, 1):
            dom = ds.manifest.domain(d)
            assert [t.class_ids for t in dom.tasks] == [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
            assert ds.features[d][0].shape == (1000, 32)
            for c in range(10):
                sel = dom.samples.cls == c
                assert dom.samples.is_test[sel].sum() == 20

    def test_shared_split_across_domains(self):
        ds = generate_synthetic(SyntheticSpec(seed=2))
        a, b = (ds.manifest.domain(d).samples for d in (0, 1))
        np.testing.assert_array_equal(a.is_test, b.is_test)
        np.testing.assert_array_equal(a.cls, b.cls)

    def test_deterministic(self):
        a = generate_synthetic(SyntheticSpec(seed=5, dim=6))
        b = generate_synthetic(SyntheticSpec(seed=5, dim=6))
        for d in (0, 1):
            assert a.features[d][0].tobytes() == b.features[d][0].tobytes()
        c = generate_synthetic(SyntheticSpec(seed=6, dim=6))
        assert a.features[0][0].tobytes() != c.features[0][0].tobytes()

    def test_cluster_moments(self):
        spec = SyntheticSpec(domains=1, tasks=1, dim=3, samples_per_class=20000, seed=1,
                             anisotropy=1.0, sigma=2.0)
        ds = generate_synthetic(spec)
        x = ds.features[0][0]
        cls = ds.manifest.domain(0).samples.cls
        for c in (0, 1):
            cov = np.cov(x[cls == c].T)
            np.testing.assert_allclose(cov, 4.0 * np.eye(3), atol=0.2)
        gap = np.linalg.norm(x[cls == 0].mean(0) - x[cls == 1].mean(0))
        assert gap == pytest.approx(20.0, rel=0.02)

    def test_layers_and_collapse(self):
        spec = SyntheticSpec(domains=1, tasks=2, dim=4, samples_per_class=4000, seed=0,
                             layers=(LayerSpec(5), LayerSpec(3, collapse=2)))
        ds = generate_synthetic(spec)
        l0, l1 = ds.features[0]
        assert l0.shape[1] == 5 and l1.shape[1] == 3
        cls = ds.manifest.domain(0).samples.cls
        m = np.stack([l1[cls == c].mean(0) for c in range(4)])
        assert np.linalg.norm(m[0] - m[1]) < 0.3
        assert np.linalg.norm(m[0] - m[2]) > 5

    def test_objects_cycle(self):
        ds = generate_synthetic(SyntheticSpec(domains=1, objects_per_class=3, seed=0))
        obj = ds.manifest.domain(0).samples.obj
        assert set(obj.tolist()) == {0, 1, 2}

    def test_conditioning_warning(self):
        with pytest.warns(ConditioningWarning):
            generate_synthetic(SyntheticSpec(dim=64, samples_per_class=10, tasks=1))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            generate_synthetic(SyntheticSpec(dim=8, samples_per_class=10, tasks=1))

    @pytest.mark.parametrize("kw", [{"dim": 0}, {"separation": -1}, {"samples_per_class": 1},
                                    {"test_fraction": 1.0}, {"domain_separation": (1.0,)},
                                    {"test_spread": 0.0}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            SyntheticSpec(**kw)
