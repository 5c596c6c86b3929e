"""Few-shot transfer on top of a frozen model.

Class labels here are local indices ``0..K-1`` aligned with the order of
the zero-shot prototypes of the task.
"""
import collections

import numpy as np
import trafaret as t
from scipy.special import log_softmax, softmax

from retina_align.consts import FeatureChoice, Method
from retina_align.embedding import (normalize_rows, project,
                                    project_normalize, scaled_logits,
                                    similarity_matrix)
from retina_align.exceptions import (ConfigError, InsufficientSamplesError,
                                     ShapeError)
from retina_align.trainer import adamw_step, init_optimizer
from retina_align.utils import OptKey, make_rng, validate
from retina_align.zeroshot import prototype_matrix, zero_shot_logits

LinearProbe = collections.namedtuple(
    'LinearProbe',
    'weights bias feature_choice l2_lambda objective_trace n_iter',
    defaults=((), 0))
TipCache = collections.namedtuple(
    'TipCache', 'keys values alpha beta keys_trainable loss_trace',
    defaults=(False, ()))
ClipAdapterHead = collections.namedtuple(
    'ClipAdapterHead', 'down up residual_ratio r loss_trace',
    defaults=((),))
FittedAdapter = collections.namedtuple('FittedAdapter',
                                       'method state feature_choice')

AdapterConfig = collections.namedtuple(
    'AdapterConfig',
    'alpha beta residual_ratio bottleneck l2_lambda max_iter tol lr epochs '
    'batch_size weight_decay seed feature_choice',
    defaults=(1.0, 5.5, 0.2, None, None, 5000, 1e-6, 1e-3, 20, 32, 1e-2, 0,
              FeatureChoice.VISION))

adapter_config_validator = t.Dict({
    OptKey('alpha'): t.ToFloat(gte=0),
    OptKey('beta'): t.ToFloat(gte=0),
    OptKey('residual_ratio'): t.ToFloat(gte=0, lte=1),
    OptKey('bottleneck'): t.Or(t.Null, t.ToInt(gte=1)),
    OptKey('l2_lambda'): t.Or(t.Null, t.ToFloat(gte=0)),
    OptKey('max_iter'): t.ToInt(gte=0),
    OptKey('tol'): t.ToFloat(gt=0),
    OptKey('lr'): t.ToFloat(gt=0),
    OptKey('epochs'): t.ToInt(gte=0),
    OptKey('batch_size'): t.ToInt(gte=1),
    OptKey('weight_decay'): t.ToFloat(gte=0),
    OptKey('seed'): t.ToInt,
    OptKey('feature_choice'): t.Enum(*FeatureChoice.ALL),
})

# sufficient-decrease constant of the backtracking line search
ARMIJO_C = 1e-4
MIN_STEP = 1e-20


def make_adapter_config(data=None, source='adapter config', **overrides):
    values = dict(data or {})
    values.update((k, v) for k, v in overrides.items() if v is not None)
    return AdapterConfig(**validate(adapter_config_validator, values,
                                    source))


def extract_features(model, raw, choice):
    if choice == FeatureChoice.VISION:
        return np.asarray(raw)
    if choice == FeatureChoice.PROJECTED:
        return project(model.vision_head, raw)
    if choice == FeatureChoice.PROJECTED_NORMALIZED:
        return project_normalize(model.vision_head, raw)
    raise ConfigError('unknown feature choice {!r}'.format(choice))


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError('labels must lie in [0, {})'.format(n_classes))
    return np.eye(n_classes)[labels]


def check_classes_present(labels, n_classes):
    missing = sorted(set(range(n_classes)) - set(np.asarray(labels).tolist()))
    if missing:
        raise InsufficientSamplesError(
            'no support samples for classes {}'.format(missing))


def mean_cross_entropy(logits, targets):
    return float(-np.sum(targets * log_softmax(logits, axis=1)) /
                 len(targets))


# -- linear probe -----------------------------------------------------------

def _probe_objective(W, b, X, Y, l2_lambda):
    logits = X @ W.T + b
    value = mean_cross_entropy(logits, Y) + 0.5 * l2_lambda * np.sum(W * W)
    return value, logits


def fit_linear_probe(features, labels, l2_lambda=None, config=None,
                     n_classes=None, feature_choice=FeatureChoice.VISION):
    """Multinomial logistic regression by full-batch gradient descent.

    Minimizes mean cross-entropy plus ``l2_lambda / 2 * |W|^2`` (the bias
    is not penalized) with a backtracking line search, so the recorded
    objective never increases. ``l2_lambda`` defaults to one over the
    number of samples.
    """
    config = config or AdapterConfig()
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    if len(X) != len(labels) or not len(labels):
        raise ShapeError('need matching, non-empty features and labels')
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    check_classes_present(labels, n_classes)
    if l2_lambda is None:
        l2_lambda = config.l2_lambda
    if l2_lambda is None:
        l2_lambda = 1.0 / len(labels)

    Y = one_hot(labels, n_classes)
    W = np.zeros((n_classes, X.shape[1]))
    b = np.zeros(n_classes)
    value, logits = _probe_objective(W, b, X, Y, l2_lambda)
    trace = [value]
    step = 1.0
    n_iter = 0
    while n_iter < config.max_iter:
        residual = (softmax(logits, axis=1) - Y) / len(Y)
        grad_W = residual.T @ X + l2_lambda * W
        grad_b = residual.sum(axis=0)
        sq_norm = float(np.sum(grad_W * grad_W) + np.sum(grad_b * grad_b))
        if np.sqrt(sq_norm) < config.tol:
            break
        step *= 2.0
        while step > MIN_STEP:
            W_new = W - step * grad_W
            b_new = b - step * grad_b
            new_value, new_logits = _probe_objective(W_new, b_new, X, Y,
                                                     l2_lambda)
            if new_value <= value - ARMIJO_C * step * sq_norm:
                break
            step *= 0.5
        else:
            break
        W, b, value, logits = W_new, b_new, new_value, new_logits
        trace.append(value)
        n_iter += 1
    return LinearProbe(W, b, feature_choice, float(l2_lambda), tuple(trace),
                       n_iter)


def linear_probe_scores(probe, features):
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if X.shape[1] != probe.weights.shape[1]:
        raise ShapeError('feature length {} does not match probe input {}'
                         ''.format(X.shape[1], probe.weights.shape[1]))
    return X @ probe.weights.T + probe.bias


def predict_linear_probe(probe, feature):
    """``(class, probabilities)`` for one feature vector."""
    scores = linear_probe_scores(probe, feature)[0]
    return int(np.argmax(scores)), softmax(scores)


# -- Tip-Adapter --------------------------------------------------------------

def build_tip_cache(model, support_features, support_labels, n_classes,
                    alpha=1.0, beta=5.5, keys_trainable=False):
    """Cache of unit support embeddings (keys) and one-hot labels."""
    keys = project_normalize(model.vision_head,
                             np.atleast_2d(support_features))
    if not len(keys):
        raise InsufficientSamplesError('Tip-Adapter needs a non-empty cache')
    return TipCache(keys, one_hot(support_labels, n_classes), float(alpha),
                    float(beta), keys_trainable)


def _cache_affinity(cache, queries):
    return np.exp(-cache.beta * (1.0 - queries @ cache.keys.T))


def tip_adapter_logits(cache, model, prototypes, image_features):
    """Zero-shot logits plus ``alpha * exp(-beta * (1 - Q K^T)) L``."""
    image_features = np.atleast_2d(image_features)
    queries = project_normalize(model.vision_head, image_features)
    cache_logits = _cache_affinity(cache, queries) @ cache.values
    return (zero_shot_logits(model, image_features, prototypes) +
            cache.alpha * cache_logits)


def tip_adapter_predict(cache, model, prototypes, image_feature):
    logits = tip_adapter_logits(cache, model, prototypes, image_feature)[0]
    return int(np.argmax(logits)), logits


def _tip_loss_and_key_grad(cache, queries, zs_logits, targets):
    affinity = _cache_affinity(cache, queries)
    logits = zs_logits + cache.alpha * affinity @ cache.values
    loss = mean_cross_entropy(logits, targets)
    d_logits = (softmax(logits, axis=1) - targets) / len(targets)
    d_affinity = cache.alpha * d_logits @ cache.values.T
    d_sims = cache.beta * affinity * d_affinity
    return loss, d_sims.T @ queries


def fit_tip_adapter_f(cache, model, prototypes, support_features,
                      support_labels, config=None):
    """Fine-tune the cache keys with AdamW on the support cross-entropy.

    Keys are renormalized after every step. The returned cache holds the
    keys with the lowest full-support loss seen, the initial keys included,
    and ``loss_trace`` records that loss after every epoch.
    """
    config = config or AdapterConfig()
    if not cache.keys_trainable:
        raise ConfigError('cache keys are frozen; build the cache with '
                          'keys_trainable=True')
    support_features = np.atleast_2d(support_features)
    queries = project_normalize(model.vision_head, support_features)
    zs_logits = zero_shot_logits(model, support_features, prototypes)
    targets = one_hot(support_labels, cache.values.shape[1])

    loss, _ = _tip_loss_and_key_grad(cache, queries, zs_logits, targets)
    trace = [loss]
    best_loss, best_keys = loss, cache.keys
    params = collections.OrderedDict([('keys', cache.keys)])
    opt = init_optimizer(params)
    n = len(queries)
    for epoch in range(config.epochs):
        order = make_rng(config.seed, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            current = cache._replace(keys=params['keys'])
            _, d_keys = _tip_loss_and_key_grad(current, queries[idx],
                                               zs_logits[idx], targets[idx])
            params, opt = adamw_step(params, {'keys': d_keys}, opt,
                                     config.lr, config.weight_decay)
            params['keys'] = normalize_rows(params['keys'], 'cache key')[0]
        loss, _ = _tip_loss_and_key_grad(cache._replace(keys=params['keys']),
                                         queries, zs_logits, targets)
        trace.append(loss)
        if loss < best_loss:
            best_loss, best_keys = loss, params['keys']
    return cache._replace(keys=best_keys, loss_trace=tuple(trace))


# -- CLIP-Adapter -------------------------------------------------------------

def init_clip_adapter(dim, bottleneck=None, residual_ratio=0.2, seed=0):
    r = int(bottleneck or max(dim // 4, 1))
    rng = make_rng(seed)
    down = rng.uniform(-1.0, 1.0, size=(r, dim)) / np.sqrt(dim)
    up = rng.uniform(-1.0, 1.0, size=(dim, r)) / np.sqrt(r)
    return ClipAdapterHead(down, up, float(residual_ratio), r)


def _clip_forward(head, features):
    """Intermediate values of the adapter on unit features."""
    pre_hidden = features @ head.down.T
    hidden = np.maximum(pre_hidden, 0.0)
    pre_out = hidden @ head.up.T
    mlp = np.maximum(pre_out, 0.0)
    mixed = head.residual_ratio * mlp + (1.0 - head.residual_ratio) * features
    # a row the adapter maps to zero keeps its unadapted feature
    live = np.any(mixed, axis=1)
    mixed = np.where(live[:, np.newaxis], mixed, features)
    adapted, norms = normalize_rows(mixed, 'adapted feature')
    return pre_hidden, hidden, pre_out, adapted, norms, live


def clip_adapter_logits(head, model, prototypes, image_features):
    features = project_normalize(model.vision_head,
                                 np.atleast_2d(image_features))
    adapted = _clip_forward(head, features)[3]
    return scaled_logits(similarity_matrix(adapted,
                                           prototype_matrix(prototypes)),
                         model.log_tau)


def clip_adapter_predict(head, model, prototypes, image_feature):
    logits = clip_adapter_logits(head, model, prototypes, image_feature)[0]
    return int(np.argmax(logits)), logits


def _clip_loss_and_grads(head, features, protos, tau, targets):
    pre_hidden, hidden, pre_out, adapted, norms, live = _clip_forward(
        head, features)
    logits = tau * adapted @ protos.T
    loss = mean_cross_entropy(logits, targets)
    d_logits = (softmax(logits, axis=1) - targets) / len(targets)
    d_adapted = tau * d_logits @ protos
    d_mixed = (d_adapted - adapted * np.sum(adapted * d_adapted, axis=1,
                                            keepdims=True)) / norms
    d_pre_out = (head.residual_ratio * d_mixed * (pre_out > 0)
                 * live[:, np.newaxis])
    d_up = d_pre_out.T @ hidden
    d_pre_hidden = (d_pre_out @ head.up) * (pre_hidden > 0)
    d_down = d_pre_hidden.T @ features
    return loss, collections.OrderedDict([('down', d_down), ('up', d_up)])


def fit_clip_adapter(model, prototypes, support_features, support_labels,
                     config=None):
    """Train the bottleneck MLP on the support cross-entropy with AdamW."""
    config = config or AdapterConfig()
    features = project_normalize(model.vision_head,
                                 np.atleast_2d(support_features))
    protos = prototype_matrix(prototypes)
    targets = one_hot(support_labels, len(prototypes))
    tau = np.exp(model.log_tau)
    head = init_clip_adapter(features.shape[1], config.bottleneck,
                             config.residual_ratio, config.seed)

    loss, _ = _clip_loss_and_grads(head, features, protos, tau, targets)
    trace = [loss]
    best_loss, best_head = loss, head
    params = collections.OrderedDict([('down', head.down), ('up', head.up)])
    opt = init_optimizer(params)
    n = len(features)
    for epoch in range(config.epochs):
        order = make_rng(config.seed, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            current = head._replace(down=params['down'], up=params['up'])
            _, grads = _clip_loss_and_grads(current, features[idx], protos,
                                            tau, targets[idx])
            params, opt = adamw_step(params, grads, opt, config.lr,
                                     config.weight_decay)
        current = head._replace(down=params['down'], up=params['up'])
        loss, _ = _clip_loss_and_grads(current, features, protos, tau,
                                       targets)
        trace.append(loss)
        if loss < best_loss:
            best_loss, best_head = loss, current
    return best_head._replace(loss_trace=tuple(trace))


# -- dispatch -----------------------------------------------------------------

def fit_adapter(method, model, prototypes, support_features, support_labels,
                config=None):
    """Fit ``method`` on raw support features; zero-shot fits nothing."""
    config = config or AdapterConfig()
    n_classes = len(prototypes)
    if method == Method.ZERO_SHOT:
        state = None
    elif method == Method.LINEAR_PROBE:
        features = extract_features(model, support_features,
                                    config.feature_choice)
        state = fit_linear_probe(features, support_labels, config=config,
                                 n_classes=n_classes,
                                 feature_choice=config.feature_choice)
    elif method in (Method.TIP_ADAPTER, Method.TIP_ADAPTER_F):
        check_classes_present(support_labels, n_classes)
        trainable = method == Method.TIP_ADAPTER_F
        state = build_tip_cache(model, support_features, support_labels,
                                n_classes, config.alpha, config.beta,
                                trainable)
        if trainable:
            state = fit_tip_adapter_f(state, model, prototypes,
                                      support_features, support_labels,
                                      config)
    elif method == Method.CLIP_ADAPTER:
        check_classes_present(support_labels, n_classes)
        state = fit_clip_adapter(model, prototypes, support_features,
                                 support_labels, config)
    else:
        raise ConfigError('unknown method {!r}'.format(method))
    return FittedAdapter(method, state, config.feature_choice)


def adapter_logits(adapter, model, prototypes, image_features):
    method, state = adapter.method, adapter.state
    if method == Method.ZERO_SHOT:
        return zero_shot_logits(model, image_features, prototypes)
    if method == Method.LINEAR_PROBE:
        features = extract_features(model, np.atleast_2d(image_features),
                                    state.feature_choice)
        return linear_probe_scores(state, features)
    if method in (Method.TIP_ADAPTER, Method.TIP_ADAPTER_F):
        return tip_adapter_logits(state, model, prototypes, image_features)
    if method == Method.CLIP_ADAPTER:
        return clip_adapter_logits(state, model, prototypes, image_features)
    raise ConfigError('unknown method {!r}'.format(method))


def adapter_predict(adapter, model, prototypes, image_features):
    """``(classes, probabilities, logits)`` for a matrix of raw features."""
    logits = adapter_logits(adapter, model, prototypes, image_features)
    return np.argmax(logits, axis=1), softmax(logits, axis=1), logits
