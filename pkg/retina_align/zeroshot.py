"""Prompt-driven classification against per-category text prototypes."""
import collections

import numpy as np
from scipy.special import softmax

from retina_align.consts import ANOMALY_PROMPTS, PromptMode
from retina_align.embedding import (normalize_rows, project_normalize,
                                    scaled_logits, similarity_matrix)
from retina_align.exceptions import (ConfigError, NumericalError,
                                     PromptBankError)
from retina_align.prompt_bank import ek_prompts, naive_prompt, task_categories

ClassPrototype = collections.namedtuple(
    'ClassPrototype', 'category embedding prompt_count')
ZeroShotPrediction = collections.namedtuple(
    'ZeroShotPrediction', 'class_id probabilities logits')


def prompts_for(bank, cat, mode):
    if mode == PromptMode.NAIVE:
        return [naive_prompt(bank, cat)]
    if mode == PromptMode.EK:
        prompts = ek_prompts(bank, cat)
        if not prompts:
            raise PromptBankError('no expert-knowledge descriptions for {!r}'
                                  ''.format(cat.name), position=cat.name)
        return prompts
    raise ConfigError('unknown prompt mode {!r}'.format(mode))


def prototype(model, text_featurizer, cat, prompts):
    """Renormalized centroid of the unit text embeddings of ``prompts``."""
    text = np.stack([text_featurizer(p) for p in prompts])
    units = project_normalize(model.text_head, text)
    centroid = units.mean(axis=0)
    if not np.linalg.norm(centroid) > 0:
        raise NumericalError('prompt embeddings of {!r} cancel out'
                             ''.format(cat.name))
    embedding = normalize_rows(centroid[np.newaxis])[0][0]
    return ClassPrototype(cat, embedding, len(prompts))


def class_prototypes(bank, text_featurizer, model, categories, mode):
    """One prototype per category, in ``categories`` order.

    Anomaly mode ignores ``categories`` and returns the two prototypes of
    the raw prompts ``normal`` and ``disease``.
    """
    if mode == PromptMode.ANOMALY:
        return [prototype(model, text_featurizer, cat, [cat.name])
                for cat in task_categories(ANOMALY_PROMPTS)]
    return [prototype(model, text_featurizer, cat,
                      prompts_for(bank, cat, mode))
            for cat in categories]


def prototype_matrix(prototypes):
    if not prototypes:
        raise ConfigError('at least one class prototype is required')
    return np.stack([p.embedding for p in prototypes])


def zero_shot_logits(model, image_features, prototypes):
    """tau-scaled cosine similarities, one row per image."""
    units = project_normalize(model.vision_head,
                              np.atleast_2d(image_features))
    return scaled_logits(similarity_matrix(units,
                                           prototype_matrix(prototypes)),
                         model.log_tau)


def predictions_from_logits(logits, prototypes):
    probabilities = softmax(logits, axis=1)
    # argmax returns the first maximum, i.e. the lowest class index
    best = np.argmax(logits, axis=1)
    return [ZeroShotPrediction(prototypes[k].category.id, p, l)
            for k, p, l in zip(best, probabilities, logits)]


def predict_batch(model, image_features, prototypes):
    logits = zero_shot_logits(model, image_features, prototypes)
    return predictions_from_logits(logits, prototypes)


def predict(model, image_feature, prototypes):
    return predict_batch(model, np.asarray(image_feature)[np.newaxis],
                         prototypes)[0]
