import math

import numpy as np
import pytest

from retina_align.adapters import (AdapterConfig, ClipAdapterHead,
                                   adapter_predict, build_tip_cache,
                                   clip_adapter_logits, clip_adapter_predict,
                                   extract_features, fit_adapter,
                                   fit_clip_adapter, fit_linear_probe,
                                   fit_tip_adapter_f, init_clip_adapter,
                                   linear_probe_scores, make_adapter_config,
                                   predict_linear_probe, tip_adapter_logits,
                                   tip_adapter_predict, LinearProbe)
from retina_align.consts import Category, FeatureChoice, Method
from retina_align.embedding import (ModelState, ProjectionHead,
                                    project_normalize)
from retina_align.exceptions import ConfigError, InsufficientSamplesError
from retina_align.zeroshot import ClassPrototype, zero_shot_logits


def identity_model(dim, log_tau=math.log(10.0)):
    head = ProjectionHead(np.eye(dim), np.zeros(dim))
    return ModelState(head, head, log_tau)


def prototypes_from(vectors):
    vectors = np.asarray(vectors, dtype=np.float64)
    units = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    return [ClassPrototype(Category(i, 'c{}'.format(i), 'c{}'.format(i)),
                           unit, 1) for i, unit in enumerate(units)]


def one_per_class(labels):
    labels = np.asarray(labels)
    return np.array([np.flatnonzero(labels == c)[0]
                     for c in np.unique(labels)])


def support_accuracy(logits, labels):
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def test_feature_choices(small_model, rng):
    raw = rng.standard_normal((3, 6))
    np.testing.assert_array_equal(
        extract_features(small_model, raw, FeatureChoice.VISION), raw)
    head = small_model.vision_head
    np.testing.assert_allclose(
        extract_features(small_model, raw, FeatureChoice.PROJECTED),
        [head.weights.dot(x) + head.bias for x in raw], atol=1e-12)
    np.testing.assert_array_equal(
        extract_features(small_model, raw,
                         FeatureChoice.PROJECTED_NORMALIZED),
        project_normalize(head, raw))
    with pytest.raises(ConfigError):
        extract_features(small_model, raw, 'pixels')


def test_make_adapter_config():
    config = make_adapter_config({'alpha': '2', 'bottleneck': '3'}, seed=5)
    assert config.alpha == 2.0
    assert config.bottleneck == 3
    assert config.seed == 5
    assert config.feature_choice == FeatureChoice.VISION
    with pytest.raises(ConfigError):
        make_adapter_config({'residual_ratio': '1.5'})


def test_probe_on_symmetric_points():
    features = np.array([[1.0, 0.0], [-1.0, 0.0]])
    probe = fit_linear_probe(features, [1, 0], l2_lambda=1e-3)
    scores = linear_probe_scores(probe, features)
    assert list(np.argmax(scores, axis=1)) == [1, 0]
    w = probe.weights[1] - probe.weights[0]
    b = probe.bias[1] - probe.bias[0]
    # boundary w[0] * x + b = 0 along the first axis
    assert abs(b / w[0]) < 1e-3
    cls, probabilities = predict_linear_probe(probe, [3.0, 0.0])
    assert cls == 1
    assert probabilities[1] > 0.99


def test_probe_objective_never_increases(clustered):
    probe = fit_linear_probe(clustered.features, clustered.labels,
                             config=AdapterConfig(max_iter=200))
    trace = np.array(probe.objective_trace)
    assert len(trace) == probe.n_iter + 1
    assert np.all(np.diff(trace) <= 0)
    assert probe.l2_lambda == pytest.approx(1.0 / len(clustered.labels))


def test_one_shot_probe_fits_its_support(clustered):
    idx = one_per_class(clustered.labels)
    probe = fit_linear_probe(clustered.features[idx],
                             clustered.labels[idx], l2_lambda=1e-3)
    scores = linear_probe_scores(probe, clustered.features[idx])
    assert list(np.argmax(scores, axis=1)) == [0, 1, 2]


def test_heavy_regularization_gives_uniform_probabilities(clustered):
    probe = fit_linear_probe(clustered.features, clustered.labels,
                             l2_lambda=1e6)
    assert np.abs(probe.weights).max() < 1e-3
    for x in clustered.features[:5]:
        _, probabilities = predict_linear_probe(probe, x)
        np.testing.assert_allclose(probabilities, 1.0 / 3, atol=1e-3)


def test_zero_probe_is_uniform():
    probe = LinearProbe(np.zeros((4, 2)), np.zeros(4), FeatureChoice.VISION,
                        0.1)
    cls, probabilities = predict_linear_probe(probe, [1.0, -2.0])
    assert cls == 0
    np.testing.assert_allclose(probabilities, 0.25)


def test_probe_needs_every_class():
    with pytest.raises(InsufficientSamplesError) as excinfo:
        fit_linear_probe(np.eye(2), [0, 2], n_classes=3)
    assert '[1]' in str(excinfo.value)


def tip_setup(clustered):
    model = identity_model(8)
    idx = one_per_class(clustered.labels)
    protos = prototypes_from(clustered.centers)
    return model, protos, clustered.features[idx], clustered.labels[idx]


def test_tip_adapter_without_cache_weight_is_zero_shot(clustered):
    model, protos, support, labels = tip_setup(clustered)
    cache = build_tip_cache(model, support, labels, 3, alpha=0.0)
    queries = clustered.features[::7]
    np.testing.assert_array_equal(
        tip_adapter_logits(cache, model, protos, queries),
        zero_shot_logits(model, queries, protos))


def test_tip_adapter_query_on_a_key(clustered):
    model, protos, support, labels = tip_setup(clustered)
    cache = build_tip_cache(model, support, labels, 3, alpha=2.0,
                            beta=1e4)
    logits = tip_adapter_logits(cache, model, protos, support[1])
    cache_term = logits - zero_shot_logits(model, support[1], protos)
    np.testing.assert_allclose(cache_term[0], [0.0, 2.0, 0.0], atol=1e-6)
    cls, _ = tip_adapter_predict(cache, model, protos, support[1])
    assert cls == 1


def test_tip_adapter_matches_direct_formula(small_model, rng):
    protos = prototypes_from(rng.standard_normal((3, 8)))
    support = rng.standard_normal((5, 6))
    labels = np.array([0, 1, 2, 1, 0])
    cache = build_tip_cache(small_model, support, labels, 3, alpha=1.3,
                            beta=4.0)
    queries = rng.standard_normal((4, 6))
    keys = project_normalize(small_model.vision_head, support)
    q = project_normalize(small_model.vision_head, queries)
    affinity = np.exp(-4.0 * (1.0 - q @ keys.T))
    expected = (np.exp(small_model.log_tau) *
                q @ np.stack([p.embedding for p in protos]).T +
                1.3 * affinity @ np.eye(3)[labels])
    np.testing.assert_allclose(
        tip_adapter_logits(cache, small_model, protos, queries), expected,
        atol=1e-10)


def test_tip_adapter_f_without_steps(clustered):
    model, protos, support, labels = tip_setup(clustered)
    cache = build_tip_cache(model, support, labels, 3,
                            keys_trainable=True)
    tuned = fit_tip_adapter_f(cache, model, protos, support, labels,
                              AdapterConfig(epochs=0))
    np.testing.assert_array_equal(tuned.keys, cache.keys)
    assert len(tuned.loss_trace) == 1


def test_tip_adapter_f_lowers_support_loss(clustered):
    model = identity_model(8)
    # prototypes of the wrong classes leave the cache to do the work
    protos = prototypes_from(np.roll(clustered.centers, 1, axis=0))
    cache = build_tip_cache(model, clustered.features, clustered.labels, 3,
                            keys_trainable=True)
    config = AdapterConfig(epochs=10, lr=1e-2)
    tuned = fit_tip_adapter_f(cache, model, protos, clustered.features,
                              clustered.labels, config)
    assert len(tuned.loss_trace) == 11
    assert min(tuned.loss_trace) <= tuned.loss_trace[0]
    np.testing.assert_allclose(np.linalg.norm(tuned.keys, axis=1), 1.0)
    again = fit_tip_adapter_f(cache, model, protos, clustered.features,
                              clustered.labels, config)
    np.testing.assert_array_equal(tuned.keys, again.keys)


def test_tip_adapter_f_needs_trainable_keys(clustered):
    model, protos, support, labels = tip_setup(clustered)
    cache = build_tip_cache(model, support, labels, 3)
    with pytest.raises(ConfigError):
        fit_tip_adapter_f(cache, model, protos, support, labels)


def test_clip_adapter_without_residual_is_zero_shot(small_model, rng):
    protos = prototypes_from(rng.standard_normal((3, 8)))
    head = init_clip_adapter(8, residual_ratio=0.0, seed=1)
    images = rng.standard_normal((6, 6))
    np.testing.assert_allclose(
        clip_adapter_logits(head, small_model, protos, images),
        zero_shot_logits(small_model, images, protos), atol=1e-12)


def test_clip_adapter_with_zero_map_keeps_predictions(small_model, rng):
    protos = prototypes_from(rng.standard_normal((3, 8)))
    head = ClipAdapterHead(np.zeros((2, 8)), np.zeros((8, 2)), 0.7, 2)
    images = rng.standard_normal((6, 6))
    zero_shot = np.argmax(zero_shot_logits(small_model, images, protos),
                          axis=1)
    adapted = [clip_adapter_predict(head, small_model, protos, x)[0]
               for x in images]
    assert adapted == zero_shot.tolist()


def test_clip_adapter_dead_rows_keep_their_features(small_model, rng):
    protos = prototypes_from(rng.standard_normal((3, 8)))
    head = ClipAdapterHead(np.ones((2, 8)), -np.ones((8, 2)), 1.0, 2)
    images = rng.standard_normal((6, 6))
    np.testing.assert_allclose(
        clip_adapter_logits(head, small_model, protos, images),
        zero_shot_logits(small_model, images, protos), atol=1e-12)


def test_clip_adapter_fit_without_residual(clustered):
    model = identity_model(8)
    protos = prototypes_from(clustered.centers)
    config = AdapterConfig(epochs=2, residual_ratio=1.0, bottleneck=2)
    head = fit_clip_adapter(model, protos, clustered.features[::4],
                            clustered.labels[::4], config)
    assert np.all(np.isfinite(head.loss_trace))
    logits = clip_adapter_logits(head, model, protos, clustered.features)
    assert np.all(np.isfinite(logits))


def test_clip_adapter_bottleneck_default():
    head = init_clip_adapter(16, seed=0)
    assert head.r == 4
    assert head.down.shape == (4, 16)
    assert head.up.shape == (16, 4)


def test_clip_adapter_fit_on_support(clustered):
    model = identity_model(8)
    protos = prototypes_from(np.roll(clustered.centers, 1, axis=0))
    config = AdapterConfig(epochs=100, lr=1e-2, residual_ratio=0.5,
                           bottleneck=4)
    head = fit_clip_adapter(model, protos, clustered.features,
                            clustered.labels, config)
    zero_shot = support_accuracy(
        zero_shot_logits(model, clustered.features, protos),
        clustered.labels)
    adapted = support_accuracy(
        clip_adapter_logits(head, model, protos, clustered.features),
        clustered.labels)
    assert adapted >= zero_shot
    assert len(head.loss_trace) == 101
    assert min(head.loss_trace) < head.loss_trace[0]


@pytest.mark.parametrize('method', Method.ALL)
def test_fit_adapter_dispatch(method, clustered):
    model = identity_model(8)
    protos = prototypes_from(clustered.centers)
    config = AdapterConfig(epochs=2, max_iter=50)
    adapter = fit_adapter(method, model, protos, clustered.features,
                          clustered.labels, config)
    assert adapter.method == method
    assert (adapter.state is None) == (method == Method.ZERO_SHOT)
    classes, probabilities, logits = adapter_predict(
        adapter, model, protos, clustered.features)
    assert classes.shape == (90,)
    assert logits.shape == (90, 3)
    np.testing.assert_allclose(probabilities.sum(axis=1), 1.0)


def test_fit_adapter_projected_probe(small_model, rng):
    protos = prototypes_from(rng.standard_normal((2, 8)))
    config = AdapterConfig(feature_choice=FeatureChoice.PROJECTED,
                           max_iter=20)
    adapter = fit_adapter(Method.LINEAR_PROBE, small_model, protos,
                          rng.standard_normal((6, 6)), [0, 1] * 3, config)
    assert adapter.state.weights.shape == (2, 8)
    assert adapter.feature_choice == FeatureChoice.PROJECTED


def test_fit_adapter_checks_support(clustered):
    model = identity_model(8)
    protos = prototypes_from(clustered.centers)
    idx = np.flatnonzero(clustered.labels < 2)
    for method in Method.ADAPTERS:
        with pytest.raises(InsufficientSamplesError):
            fit_adapter(method, model, protos, clustered.features[idx],
                        clustered.labels[idx])
    with pytest.raises(ConfigError):
        fit_adapter('knn', model, protos, clustered.features,
                    clustered.labels)
