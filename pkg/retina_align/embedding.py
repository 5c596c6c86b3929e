"""Projection heads and the joint unit-hypersphere geometry."""
import collections

import numpy as np

from retina_align.consts import DEFAULT_LOG_TAU, MAX_LOG_TAU
from retina_align.exceptions import NumericalError, ShapeError
from retina_align.utils import make_rng

ProjectionHead = collections.namedtuple('ProjectionHead', 'weights bias')
ModelState = collections.namedtuple('ModelState',
                                    'vision_head text_head log_tau')

PARAM_BLOCKS = ('vision_head.weights', 'vision_head.bias',
                'text_head.weights', 'text_head.bias', 'log_tau')


def init_head(d_in, d_out, rng, dtype=np.float64):
    bound = 1.0 / np.sqrt(d_in)
    weights = rng.uniform(-bound, bound, size=(d_out, d_in)).astype(dtype)
    return ProjectionHead(weights, np.zeros(d_out, dtype=dtype))


def init_model(d_vision, d_text, d_out=512, seed=0,
               log_tau=DEFAULT_LOG_TAU, dtype=np.float64):
    rng = make_rng(seed)
    return ModelState(init_head(d_vision, d_out, rng, dtype),
                      init_head(d_text, d_out, rng, dtype),
                      clamp_log_tau(log_tau))


def clamp_log_tau(log_tau):
    return float(min(log_tau, MAX_LOG_TAU))


def head_dims(head):
    """``(d_in, d_out)`` of a projection head."""
    d_out, d_in = head.weights.shape
    return d_in, d_out


def cast_model(model, dtype):
    def cast(head):
        return ProjectionHead(head.weights.astype(dtype),
                              head.bias.astype(dtype))
    return ModelState(cast(model.vision_head), cast(model.text_head),
                      float(model.log_tau))


def model_to_blocks(model):
    return collections.OrderedDict([
        ('vision_head.weights', model.vision_head.weights),
        ('vision_head.bias', model.vision_head.bias),
        ('text_head.weights', model.text_head.weights),
        ('text_head.bias', model.text_head.bias),
        ('log_tau', np.asarray(model.log_tau, dtype=np.float64)),
    ])


def blocks_to_model(blocks):
    return ModelState(
        ProjectionHead(blocks['vision_head.weights'],
                       blocks['vision_head.bias']),
        ProjectionHead(blocks['text_head.weights'], blocks['text_head.bias']),
        float(blocks['log_tau']))


def project(head, features):
    """Affine map of a vector or of the rows of a matrix."""
    features = np.asarray(features)
    d_in, _ = head_dims(head)
    if features.shape[-1] != d_in:
        raise ShapeError('feature length {} does not match head input {}'
                         ''.format(features.shape[-1], d_in))
    return features @ head.weights.T + head.bias


def normalize_rows(z, what='projection'):
    """Unit-normalize the rows of ``z``; returns ``(unit, norms)``."""
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    bad = np.flatnonzero(~(norms > 0))
    if bad.size:
        index = int(bad[0])
        raise NumericalError('degenerate {} (zero norm) for sample {}'
                             ''.format(what, index), index=index)
    return z / norms, norms


def project_normalize(head, feature):
    """u = head(x) / ||head(x)|| for one feature vector or a row matrix."""
    z = project(head, feature)
    if z.ndim == 1:
        unit, _ = normalize_rows(z[np.newaxis])
        return unit[0]
    return normalize_rows(z)[0]


def similarity_matrix(U, V):
    U = np.atleast_2d(np.asarray(U))
    V = np.atleast_2d(np.asarray(V))
    if U.shape[1] != V.shape[1]:
        raise ShapeError('embedding dimensions differ: {} vs {}'
                         ''.format(U.shape[1], V.shape[1]))
    return U @ V.T


def scaled_logits(sims, log_tau):
    return np.exp(log_tau) * np.asarray(sims)
