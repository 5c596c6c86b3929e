"""Mini-batch optimization of the contrastive objective.

AdamW with decoupled weight decay, linear warm-up followed by cosine decay,
and a fresh prompt draw for every sample occurrence.
"""
import collections
import math

import numpy as np
import trafaret as t

from retina_align.consts import DEFAULT_LOG_TAU, Precision
from retina_align.contrastive import gradients_to_blocks, total_loss_and_grads
from retina_align.embedding import (blocks_to_model, cast_model,
                                    clamp_log_tau, model_to_blocks)
from retina_align.exceptions import ConfigError, NumericalError
from retina_align.prompt_bank import naive_prompt, sample_training_prompt
from retina_align.utils import OptKey, float_dtype, make_rng, validate


class PromptStrategy(object):
    EK = 'ek'
    NAIVE = 'naive'


TrainConfig = collections.namedtuple(
    'TrainConfig',
    'batch_size epochs base_lr weight_decay warmup_epochs seed precision '
    'd_out init_log_tau beta1 beta2 eps prompt_strategy',
    defaults=(128, 15, 1e-4, 1e-2, 1.0, 0, Precision.F64,
              512, DEFAULT_LOG_TAU, 0.9, 0.999, 1e-8, PromptStrategy.EK))

OptimizerState = collections.namedtuple(
    'OptimizerState', 'first_moment second_moment step_count')

EpochRecord = collections.namedtuple('EpochRecord', 'epoch mean_loss lr tau')

NO_DECAY_BLOCKS = ('log_tau',)


train_config_validator = t.Dict({
    OptKey('batch_size'): t.ToInt(gte=1),
    OptKey('epochs'): t.ToInt(gte=1),
    OptKey('base_lr'): t.ToFloat(gt=0),
    OptKey('weight_decay'): t.ToFloat(gte=0),
    OptKey('warmup_epochs'): t.ToFloat(gte=0),
    OptKey('seed'): t.ToInt,
    OptKey('precision'): t.Enum(*Precision.DTYPES),
    OptKey('d_out'): t.ToInt(gte=1),
    OptKey('init_log_tau'): t.ToFloat,
    OptKey('beta1'): t.ToFloat(gte=0, lt=1),
    OptKey('beta2'): t.ToFloat(gte=0, lt=1),
    OptKey('eps'): t.ToFloat(gt=0),
    OptKey('prompt_strategy'): t.Enum(PromptStrategy.EK,
                                      PromptStrategy.NAIVE),
})


def make_train_config(data=None, source='train config', **overrides):
    """Validated TrainConfig from a (string-valued) dict plus overrides."""
    values = dict(data or {})
    values.update((k, v) for k, v in overrides.items() if v is not None)
    return TrainConfig(**validate(train_config_validator, values, source))


def lr_schedule(step, total_steps, warmup_steps, base_lr):
    """Linear ramp to ``base_lr`` then cosine decay to zero.

    The ramp is ``base_lr * (step + 1) / warmup_steps`` so the very first
    update already moves the parameters.
    """
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    decay_steps = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / decay_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def init_optimizer(params):
    return OptimizerState(
        collections.OrderedDict((k, np.zeros_like(np.asarray(v)))
                                for k, v in params.items()),
        collections.OrderedDict((k, np.zeros_like(np.asarray(v)))
                                for k, v in params.items()),
        0)


def adamw_step(params, grads, opt, lr, weight_decay, betas=(0.9, 0.999),
               eps=1e-8, no_decay=NO_DECAY_BLOCKS):
    """One decoupled-weight-decay Adam update over named parameter blocks.

    Returns the updated blocks and optimizer state; inputs are not mutated.
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericalError('non-finite gradient in {}'.format(name),
                                 block=name)
    beta1, beta2 = betas
    step_count = opt.step_count + 1
    bias1 = 1.0 - beta1 ** step_count
    bias2 = 1.0 - beta2 ** step_count
    new_params = collections.OrderedDict()
    first = collections.OrderedDict()
    second = collections.OrderedDict()
    for name, value in params.items():
        value = np.asarray(value)
        grad = np.asarray(grads[name], dtype=value.dtype)
        m = beta1 * opt.first_moment[name] + (1.0 - beta1) * grad
        v = beta2 * opt.second_moment[name] + (1.0 - beta2) * grad * grad
        if weight_decay and name not in no_decay:
            value = value * (1.0 - lr * weight_decay)
        value = value - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        new_params[name] = value.astype(grad.dtype, copy=False)
        first[name] = m
        second[name] = v
    return new_params, OptimizerState(first, second, step_count)


def _category(categories, label):
    lookup = getattr(categories, 'by_id', None)
    return lookup(label) if lookup else categories[label]


def training_text(record, category, bank, rng, strategy):
    if record.raw_text:
        return record.raw_text
    if strategy == PromptStrategy.NAIVE:
        return naive_prompt(bank, category)
    return sample_training_prompt(bank, category, rng)


def schedule_steps(n_samples, config):
    """``(steps_per_epoch, total_steps, warmup_steps)``; the final partial
    batch counts as a step."""
    steps_per_epoch = int(math.ceil(n_samples / float(config.batch_size)))
    total_steps = steps_per_epoch * config.epochs
    warmup_steps = int(round(config.warmup_epochs * steps_per_epoch))
    return steps_per_epoch, total_steps, min(warmup_steps, total_steps - 1)


def train(dataset, image_features, bank, text_featurizer, config, init,
          categories, ui=None):
    """Optimize ``init`` on ``dataset``; returns ``(model, epoch trace)``.

    ``image_features[record.image_feature_index]`` is the vision feature of
    a record and ``categories`` maps label ids to Category tuples.
    """
    if not dataset:
        raise ConfigError('cannot train on an empty dataset')
    dtype = float_dtype(config.precision)
    model = cast_model(init, dtype)
    image_features = np.asarray(image_features, dtype=dtype)
    labels = np.array([r.label for r in dataset])
    feature_index = np.array([r.image_feature_index for r in dataset])
    cats = [_category(categories, label) for label in labels]

    n = len(dataset)
    _, total_steps, warmup_steps = schedule_steps(n, config)
    opt = init_optimizer(model_to_blocks(model))
    trace = []
    step = 0
    lr = 0.0
    for epoch in range(config.epochs):
        rng = make_rng(config.seed, epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            texts = [training_text(dataset[i], cats[i], bank, rng,
                                   config.prompt_strategy) for i in idx]
            text_features = np.stack(
                [text_featurizer(text) for text in texts]).astype(dtype)
            batch = (image_features[feature_index[idx]], text_features,
                     labels[idx])
            grads = total_loss_and_grads(model, batch)
            lr = lr_schedule(step, total_steps, warmup_steps, config.base_lr)
            blocks, opt = adamw_step(
                model_to_blocks(model), gradients_to_blocks(grads), opt, lr,
                config.weight_decay, (config.beta1, config.beta2),
                config.eps)
            blocks['log_tau'] = clamp_log_tau(float(blocks['log_tau']))
            model = blocks_to_model(blocks)
            losses.append(grads.loss_value)
            step += 1
            if ui is not None:
                ui.debug('epoch {} step {}: loss {:.6f} lr {:.3g}'
                         ''.format(epoch + 1, step, grads.loss_value, lr))
        record = EpochRecord(epoch + 1, float(np.mean(losses)), lr,
                             float(np.exp(model.log_tau)))
        trace.append(record)
        if ui is not None:
            ui.info('epoch {}/{}: mean loss {:.6f}, tau {:.4f}'
                    ''.format(record.epoch, config.epochs, record.mean_loss,
                              record.tau))
    return model, trace
