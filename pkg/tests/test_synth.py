import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from labelshift.core import IGNORE, LabelDistribution
from labelshift.rectify import adjust_posterior
from labelshift.synth import (DomainDataset, Scene, SceneSpec, bayes_posterior, derive_seed,
                              empirical_image_marginal, empirical_pixel_marginal,
                              generate_dataset, generate_label_map, make_rng, sample_features,
                              simplex_means, splitmix64)


def _spec(**kw):
    base = dict(height=16, width=16, class_means=simplex_means(4, 5, 1.0), noise_sigma=0.5,
                label_marginal=LabelDistribution([0.4, 0.3, 0.2, 0.1]), blob_count=3, seed=7)
    base.update(kw)
    return SceneSpec(**base)


def _scene(labels, d=2):
    labels = np.asarray(labels, dtype=np.uint8)
    return Scene(np.zeros(labels.shape + (d,)), labels)


class TestSeeds:
    def test_splitmix_reference(self):
        # first output of the reference SplitMix64 generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_derived_seeds_differ(self):
        keys = {derive_seed(s, i) for s in range(4) for i in range(100)}
        assert len(keys) == 400


class TestSceneSpec:
    def test_rejects_bad(self):
        with pytest.raises(ValueError):
            _spec(noise_sigma=0.0)
        with pytest.raises(ValueError):
            _spec(blob_count=0)
        with pytest.raises(ValueError):
            _spec(class_means=np.zeros((4, 5)))

    def test_dict_round_trip(self):
        s = _spec(conditional_shift=np.arange(5.0))
        assert SceneSpec.from_dict(s.to_dict()) == s


class TestLabelMap:
    def test_single_blob_is_one_class(self):
        labels = generate_label_map(_spec(blob_count=1), make_rng(3))
        assert len(np.unique(labels)) == 1

    def test_one_hot_marginal(self):
        spec = _spec(label_marginal=LabelDistribution([0, 0, 1, 0]))
        assert np.all(generate_label_map(spec, make_rng(0)) == 2)

    def test_deterministic(self):
        spec = _spec()
        a = generate_label_map(spec, make_rng(11))
        b = generate_label_map(spec, make_rng(11))
        np.testing.assert_array_equal(a, b)

    def test_cell_classes_follow_marginal(self):
        # with one blob per scene each scene is a single multinomial draw
        spec = _spec(height=4, width=4, blob_count=1)
        ds = generate_dataset(spec, 4000)
        counts = np.bincount([s.labels[0, 0] for s in ds], minlength=4)
        expected = 4000 * spec.label_marginal.probs
        assert stats.chisquare(counts, expected).pvalue > 1e-3


class TestFeatures:
    def test_tiny_noise_hits_means(self):
        spec = _spec(noise_sigma=1e-9)
        labels = generate_label_map(spec, make_rng(1))
        scene = sample_features(labels, spec, make_rng(2))
        np.testing.assert_allclose(scene.features, spec.class_means[labels], atol=1e-6)

    def test_shift_moves_only_the_mean(self):
        shift = np.array([0.5, -1.0, 0.0, 0.0, 2.0])
        a = _spec()
        b = _spec(conditional_shift=shift)
        labels = generate_label_map(a, make_rng(1))
        fa = sample_features(labels, a, make_rng(5)).features
        fb = sample_features(labels, b, make_rng(5)).features
        np.testing.assert_allclose(fb - fa, np.broadcast_to(shift, fa.shape), atol=1e-12)

    def test_ignore_pixels_zero(self):
        spec = _spec()
        labels = np.full((16, 16), IGNORE, dtype=np.uint8)
        labels[0, 0] = 1
        feats = sample_features(labels, spec, make_rng(0)).features
        assert np.all(feats[1:] == 0) and np.any(feats[0, 0] != 0)

    def test_class_means_law_of_large_numbers(self):
        spec = _spec(height=100, width=100, blob_count=4)
        ds = generate_dataset(spec, 40)
        for k in range(4):
            x = np.concatenate([s.features[s.labels == k] for s in ds])
            if len(x) < 1000:
                continue
            bound = 3 * spec.noise_sigma / np.sqrt(len(x))
            assert np.all(np.abs(x.mean(axis=0) - spec.class_means[k]) < bound)


class TestBayesPosterior:
    def _one_d(self, prior=(0.5, 0.5)):
        return SceneSpec(1, 1, np.array([[-1.0], [1.0]]), 1.0, LabelDistribution(prior))

    def test_symmetric_point(self):
        np.testing.assert_allclose(bayes_posterior(np.array([0.0]), self._one_d()), [0.5, 0.5])

    def test_logistic_value(self):
        expected = 1.0 / (1.0 + np.exp(-2.0))
        np.testing.assert_allclose(bayes_posterior(np.array([1.0]), self._one_d()),
                                   [1 - expected, expected], rtol=1e-14)
        np.testing.assert_allclose(bayes_posterior(np.array([1.0]), self._one_d()),
                                   [0.1192, 0.8808], atol=5e-5)

    def test_equal_likelihood_returns_prior(self):
        post = bayes_posterior(np.array([0.0]), self._one_d((0.9, 0.1)))
        np.testing.assert_allclose(post, [0.9, 0.1], rtol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=5, max_size=5))
    def test_simplex(self, x):
        p = bayes_posterior(np.array(x), _spec())
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12

    def test_prior_exchange_identity(self):
        spec = _spec()
        target = LabelDistribution([0.1, 0.2, 0.3, 0.4])
        x = make_rng(4).normal(size=(1000, 5))
        post_s = bayes_posterior(x, spec)
        post_t = bayes_posterior(x, spec, target)
        moved = adjust_posterior(post_s, target.probs / spec.label_marginal.probs)
        np.testing.assert_allclose(moved, post_t, atol=1e-12)


class TestMarginals:
    def test_pixel_single_class(self):
        ds = DomainDataset([_scene(np.zeros((3, 3)))], _two_d_spec(3, 3))
        np.testing.assert_array_equal(np.asarray(empirical_pixel_marginal(ds)), [1, 0, 0, 0])

    def test_pixel_two_scenes(self):
        spec = _two_d_spec(2, 2)
        ds = DomainDataset([_scene(np.zeros((2, 2))), _scene(np.ones((2, 2)))], spec)
        np.testing.assert_array_equal(np.asarray(empirical_pixel_marginal(ds)), [0.5, 0.5, 0, 0])

    def test_pixel_marginal_converges(self):
        spec = SceneSpec(16, 16, simplex_means(2, 2, 1.0), 0.5, LabelDistribution([0.7, 0.3]),
                         blob_count=16, seed=3)
        marg = empirical_pixel_marginal(generate_dataset(spec, 200))
        assert abs(marg.probs[0] - 0.7) < 0.02

    def test_all_ignore_rejected(self):
        spec = _two_d_spec(2, 2)
        ds = DomainDataset([_scene(np.full((2, 2), IGNORE))], spec)
        with pytest.raises(ValueError):
            empirical_pixel_marginal(ds)
        with pytest.raises(ValueError):
            empirical_pixel_marginal(DomainDataset([], spec))

    def test_image_two_classes(self):
        spec = _two_d_spec(2, 2)
        ds = DomainDataset([_scene([[0, 0], [1, 1]])], spec)
        np.testing.assert_array_equal(np.asarray(empirical_image_marginal(ds, 1)),
                                      [0.5, 0.5, 0, 0])

    def test_image_threshold(self):
        spec = _two_d_spec(2, 2)
        ds = DomainDataset([_scene([[0, 0], [0, 1]])], spec)
        np.testing.assert_array_equal(np.asarray(empirical_image_marginal(ds, 1)), [1, 0, 0, 0])

    def test_image_hand_count(self):
        spec = _two_d_spec(2, 2)
        ds = DomainDataset([_scene([[0, 0], [1, 1]]), _scene([[1, 1], [1, 1]]),
                            _scene([[1, 1], [2, 2]])], spec)
        np.testing.assert_allclose(np.asarray(empirical_image_marginal(ds, 0)),
                                   [0.2, 0.6, 0.2, 0.0])


def _two_d_spec(h, w):
    return SceneSpec(h, w, np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), 0.5,
                     LabelDistribution.uniform(4))


def test_dataset_reproducible_and_order_free():
    spec = _spec()
    a = generate_dataset(spec, 5)
    b = generate_dataset(spec, 3, start=2)
    for sa, sb in zip(a.scenes[2:], b.scenes):
        np.testing.assert_array_equal(sa.features, sb.features)
        np.testing.assert_array_equal(sa.labels, sb.labels)
