"""Category-aware bidirectional contrastive objective.

Every same-label image/text pair of a batch is a positive. Images and texts
are index-aligned (batch element ``i`` is the pair ``(image_i, text_i)``),
so each positive set contains at least the element itself.

Gradients are derived by hand: with ``s = tau * u_i.v_j`` the derivative of
the summed loss w.r.t. the logits is ``softmax_rows(s) - A + softmax_cols(s)
- B`` where ``A``/``B`` spread unit mass uniformly over the positives of
each row/column. It is then chained through the cosine similarities, the
unit normalization and the affine heads.
"""
import collections

import numpy as np
from scipy.special import log_softmax

from retina_align.embedding import (ModelState, ProjectionHead, PARAM_BLOCKS,
                                    blocks_to_model, init_model,
                                    model_to_blocks, normalize_rows, project,
                                    scaled_logits, similarity_matrix)
from retina_align.exceptions import ContractError, ShapeError

PositiveSets = collections.namedtuple('PositiveSets', 'i2t t2i')
LossGradients = collections.namedtuple(
    'LossGradients', 'd_vision_head d_text_head d_log_tau loss_value')
GradCheckResult = collections.namedtuple(
    'GradCheckResult',
    'max_rel_error block index analytic numeric n_checked')

GRADCHECK_STEP = 1e-6
# |a - n| / max(|a|, |n|, floor); the floor keeps near-zero coordinates
# from dividing round-off by round-off
GRADCHECK_FLOOR = 1e-4


def positive_sets(labels):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ContractError('positive sets need a non-empty label list')
    same = labels[:, np.newaxis] == labels[np.newaxis, :]
    i2t = tuple(frozenset(np.flatnonzero(row).tolist()) for row in same)
    t2i = tuple(frozenset(np.flatnonzero(col).tolist()) for col in same.T)
    return PositiveSets(i2t, t2i)


def _targets(sets, n_cols, direction):
    """Rows of unit mass spread over each positive set."""
    mask = np.zeros((len(sets), n_cols))
    for i, members in enumerate(sets):
        if not members:
            raise ContractError('empty {} positive set for index {}'
                                ''.format(direction, i))
        mask[i, sorted(members)] = 1.0
    return mask / mask.sum(axis=1, keepdims=True)


def _check_sims(sims, pos):
    sims = np.asarray(sims)
    if sims.ndim != 2 or sims.shape != (len(pos.i2t), len(pos.t2i)):
        raise ShapeError('similarity matrix of shape {} does not match '
                         'positive sets ({}, {})'
                         ''.format(sims.shape, len(pos.i2t), len(pos.t2i)))
    return sims


def loss_i2t(sims, log_tau, pos):
    sims = _check_sims(sims, pos)
    targets = _targets(pos.i2t, sims.shape[1], 'image-to-text')
    log_p = log_softmax(scaled_logits(sims, log_tau), axis=1)
    return float(-np.sum(targets * log_p))


def loss_t2i(sims, log_tau, pos):
    sims = _check_sims(sims, pos)
    targets = _targets(pos.t2i, sims.shape[0], 'text-to-image').T
    log_p = log_softmax(scaled_logits(sims, log_tau), axis=0)
    return float(-np.sum(targets * log_p))


def _unpack(raw_batch):
    images, texts, labels = raw_batch
    images = np.atleast_2d(np.asarray(images))
    texts = np.atleast_2d(np.asarray(texts))
    labels = np.asarray(labels)
    if not len(images) == len(texts) == len(labels):
        raise ContractError('unpaired batch: {} images, {} texts, {} labels'
                            ''.format(len(images), len(texts), len(labels)))
    return images, texts, labels


def batch_loss(model, raw_batch):
    """Objective value only; ``(total, i2t, t2i)``."""
    images, texts, labels = _unpack(raw_batch)
    U = normalize_rows(project(model.vision_head, images),
                       'image projection')[0]
    V = normalize_rows(project(model.text_head, texts),
                       'text projection')[0]
    sims = similarity_matrix(U, V)
    pos = positive_sets(labels)
    l_i2t = loss_i2t(sims, model.log_tau, pos)
    l_t2i = loss_t2i(sims, model.log_tau, pos)
    return l_i2t + l_t2i, l_i2t, l_t2i


def _head_grad(head_input, unit, norms, d_unit):
    # back through u = z / |z| and z = x W^T + b
    d_z = (d_unit - unit * np.sum(unit * d_unit, axis=1,
                                  keepdims=True)) / norms
    return ProjectionHead(d_z.T @ head_input, d_z.sum(axis=0))


def total_loss_and_grads(model, raw_batch):
    images, texts, labels = _unpack(raw_batch)
    U, u_norms = normalize_rows(project(model.vision_head, images),
                                'image projection')
    V, v_norms = normalize_rows(project(model.text_head, texts),
                                'text projection')
    pos = positive_sets(labels)
    n = len(labels)
    row_targets = _targets(pos.i2t, n, 'image-to-text')
    col_targets = _targets(pos.t2i, n, 'text-to-image').T

    tau = np.exp(model.log_tau)
    logits = tau * similarity_matrix(U, V)
    log_p_rows = log_softmax(logits, axis=1)
    log_p_cols = log_softmax(logits, axis=0)
    loss_value = float(-np.sum(row_targets * log_p_rows) -
                       np.sum(col_targets * log_p_cols))

    d_logits = (np.exp(log_p_rows) - row_targets +
                np.exp(log_p_cols) - col_targets)
    d_log_tau = float(np.sum(d_logits * logits))
    d_sims = tau * d_logits
    d_vision = _head_grad(images, U, u_norms, d_sims @ V)
    d_text = _head_grad(texts, V, v_norms, d_sims.T @ U)
    return LossGradients(d_vision, d_text, d_log_tau, loss_value)


def gradients_to_blocks(grads):
    return collections.OrderedDict([
        ('vision_head.weights', grads.d_vision_head.weights),
        ('vision_head.bias', grads.d_vision_head.bias),
        ('text_head.weights', grads.d_text_head.weights),
        ('text_head.bias', grads.d_text_head.bias),
        ('log_tau', np.asarray(grads.d_log_tau)),
    ])


def gradient_check(model, raw_batch, h=GRADCHECK_STEP,
                   floor=GRADCHECK_FLOOR):
    """Compare analytic gradients with central finite differences."""
    analytic = gradients_to_blocks(total_loss_and_grads(model, raw_batch))
    blocks = model_to_blocks(model)
    worst = GradCheckResult(0.0, None, None, 0.0, 0.0, 0)
    n_checked = 0
    for name in PARAM_BLOCKS:
        base = np.array(blocks[name], dtype=np.float64)
        for index in np.ndindex(*base.shape):
            shifted = collections.OrderedDict(blocks)
            plus, minus = base.copy(), base.copy()
            plus[index] += h
            minus[index] -= h
            shifted[name] = plus
            f_plus = batch_loss(blocks_to_model(shifted), raw_batch)[0]
            shifted[name] = minus
            f_minus = batch_loss(blocks_to_model(shifted), raw_batch)[0]
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic[name][index])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            n_checked += 1
            if rel >= worst.max_rel_error:
                worst = GradCheckResult(rel, name, index, a, numeric, 0)
    return worst._replace(n_checked=n_checked)


def random_instance(rng, max_batch=6, max_dim=8, n_labels=3):
    """Small random ``(model, raw_batch)`` pair for gradient checking."""
    batch = int(rng.integers(1, max_batch + 1))
    d_vision, d_text, d_out = rng.integers(2, max_dim + 1, size=3)
    model = init_model(int(d_vision), int(d_text), int(d_out),
                       seed=int(rng.integers(2 ** 31)),
                       log_tau=float(rng.uniform(-1.0, 1.0)))
    model = ModelState(
        ProjectionHead(model.vision_head.weights,
                       rng.normal(scale=0.1, size=int(d_out))),
        ProjectionHead(model.text_head.weights,
                       rng.normal(scale=0.1, size=int(d_out))),
        model.log_tau)
    raw_batch = (rng.standard_normal((batch, int(d_vision))),
                 rng.standard_normal((batch, int(d_text))),
                 rng.integers(0, n_labels, size=batch))
    return model, raw_batch
