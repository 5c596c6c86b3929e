import math

import numpy as np
import pytest

from retina_align.consts import Category, PromptMode
from retina_align.embedding import (ModelState, ProjectionHead,
                                    project_normalize)
from retina_align.exceptions import (ConfigError, NumericalError,
                                     PromptBankError)
from retina_align.prompt_bank import load_bank
from retina_align.zeroshot import (ClassPrototype, class_prototypes, predict,
                                   predict_batch, prompts_for, prototype)
from utils import write_json

GLAUCOMA = Category(0, 'glaucoma', 'G')


def identity_model(dim, log_tau=0.0):
    head = ProjectionHead(np.eye(dim), np.zeros(dim))
    return ModelState(head, head, log_tau)


def unit_prototype(cat_id, vector):
    vector = np.asarray(vector, dtype=np.float64)
    return ClassPrototype(Category(cat_id, 'c{}'.format(cat_id),
                                   'c{}'.format(cat_id)),
                          vector / np.linalg.norm(vector), 1)


def test_naive_prototype(bank, featurizer, small_model):
    cataract = Category(3, 'cataract', 'CT')
    prompts = prompts_for(bank, cataract, PromptMode.NAIVE)
    assert prompts == ['A fundus photograph of cataract']
    proto = prototype(small_model, featurizer, cataract, prompts)
    expected = project_normalize(small_model.text_head,
                                 featurizer('A fundus photograph of cataract'))
    np.testing.assert_allclose(proto.embedding, expected, atol=1e-15)
    assert proto.prompt_count == 1


def test_duplicate_prompts_give_the_single_prompt(tmpdir, featurizer,
                                                  small_model):
    path = tmpdir.join('bank.json')
    write_json(path, {'categories': {'glaucoma': ['cupping', 'cupping']}})
    bank = load_bank(str(path))
    proto = prototype(small_model, featurizer, GLAUCOMA,
                      prompts_for(bank, GLAUCOMA, PromptMode.EK))
    expected = project_normalize(small_model.text_head, featurizer('cupping'))
    np.testing.assert_allclose(proto.embedding, expected, atol=1e-15)
    assert proto.prompt_count == 2


def test_ek_prototype_is_normalized_mean(bank, featurizer, small_model,
                                         registry):
    cat = registry.by_name('no diabetic retinopathy')
    prompts = prompts_for(bank, cat, PromptMode.EK)
    assert len(prompts) == 3
    units = [project_normalize(small_model.text_head, featurizer(p))
             for p in prompts]
    mean = sum(units) / 3.0
    proto = prototype(small_model, featurizer, cat, prompts)
    np.testing.assert_allclose(proto.embedding, mean / np.linalg.norm(mean),
                               atol=1e-12)


def test_ek_without_descriptions(tmpdir):
    path = tmpdir.join('bank.json')
    write_json(path, {'categories': {'glaucoma': []}})
    with pytest.raises(PromptBankError):
        prompts_for(load_bank(str(path)), GLAUCOMA, PromptMode.EK)


def test_unknown_mode(bank):
    with pytest.raises(ConfigError):
        prompts_for(bank, GLAUCOMA, 'clever')


def test_cancelling_prompts():
    model = identity_model(2)
    vectors = {'up': np.array([0.0, 1.0]), 'down': np.array([0.0, -1.0])}
    with pytest.raises(NumericalError):
        prototype(model, vectors.get, GLAUCOMA, ['up', 'down'])


def test_class_prototypes_keep_order(bank, featurizer, small_model,
                                     registry):
    cats = [registry.by_name('glaucoma'), registry.by_name('normal')]
    protos = class_prototypes(bank, featurizer, small_model, cats,
                              PromptMode.EK)
    assert [p.category for p in protos] == cats
    for proto in protos:
        assert np.linalg.norm(proto.embedding) == pytest.approx(1.0)


def test_anomaly_prototypes(bank, featurizer, small_model):
    protos = class_prototypes(bank, featurizer, small_model, None,
                              PromptMode.ANOMALY)
    assert [p.category.name for p in protos] == ['normal', 'disease']
    assert [p.category.id for p in protos] == [0, 1]


def test_single_prototype_is_certain(rng):
    model = identity_model(3)
    prediction = predict(model, rng.standard_normal(3),
                         [unit_prototype(7, [1.0, 2.0, 0.0])])
    assert prediction.class_id == 7
    assert prediction.probabilities[0] == 1.0


def test_closed_form_probability():
    model = identity_model(2, log_tau=math.log(10.0))
    protos = [unit_prototype(0, [1.0, 0.0]), unit_prototype(1, [0.0, 1.0])]
    prediction = predict(model, [1.0, 0.0], protos)
    assert prediction.class_id == 0
    assert prediction.probabilities[0] == pytest.approx(
        math.exp(10) / (math.exp(10) + 1.0), abs=1e-12)
    np.testing.assert_allclose(prediction.logits, [10.0, 0.0])


def test_temperature_does_not_change_the_class(rng):
    protos = [unit_prototype(i, rng.standard_normal(4)) for i in range(3)]
    images = rng.standard_normal((20, 4))
    cold = predict_batch(identity_model(4, 0.0), images, protos)
    hot = predict_batch(identity_model(4, math.log(50.0)), images, protos)
    assert [p.class_id for p in cold] == [p.class_id for p in hot]
    assert not np.allclose(cold[0].probabilities, hot[0].probabilities)


def test_zero_image_projection(rng):
    with pytest.raises(NumericalError):
        predict(identity_model(2), [0.0, 0.0],
                [unit_prototype(0, [1.0, 0.0])])


def test_prompt_centroid_beats_a_single_prompt():
    model = identity_model(32)
    wins = 0
    for trial in range(20):
        rng = np.random.default_rng(trial)
        directions = rng.standard_normal((6, 32))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        texts = {}
        for c in range(6):
            for k in range(3):
                texts['c{} prompt {}'.format(c, k)] = (
                    directions[c] + 0.21 * rng.standard_normal(32))
        labels = np.repeat(np.arange(6), 20)
        images = directions[labels] + 0.18 * rng.standard_normal((120, 32))

        def accuracy(n_prompts):
            protos = [prototype(model, texts.get,
                                Category(c, 'c{}'.format(c), 'c{}'.format(c)),
                                ['c{} prompt {}'.format(c, k)
                                 for k in range(n_prompts)])
                      for c in range(6)]
            predicted = [p.class_id
                         for p in predict_batch(model, images, protos)]
            return np.mean(np.array(predicted) == labels)

        wins += accuracy(3) >= accuracy(1)
    assert wins >= 16
