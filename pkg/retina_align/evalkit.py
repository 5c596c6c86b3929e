"""Evaluation protocol: stratified splits, k-shot and fraction regimes,
fold aggregation, transfer metrics and a synthetic dataset generator."""
import collections
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.metrics import (cohen_kappa_score, confusion_matrix,
                             roc_auc_score)

from retina_align.adapters import adapter_predict, fit_adapter
from retina_align.consts import FeatureChoice, Method, TaskType
from retina_align.exceptions import (ConfigError, DataError,
                                     InsufficientSamplesError,
                                     VocabularyError)
from retina_align.utils import make_rng

SplitPlan = collections.namedtuple(
    'SplitPlan', 'test_fraction shots fraction folds seed',
    defaults=(0.2, None, None, 5, 0))
Split = collections.namedtuple('Split', 'fold support test')
EvalReport = collections.namedtuple(
    'EvalReport',
    'per_class_accuracy aca quadratic_kappa auc per_fold mean std',
    defaults=(None, None, (), None, None))
FoldResult = collections.namedtuple(
    'FoldResult', 'fold indices classes probabilities adapter')
AnomalyReport = collections.namedtuple(
    'AnomalyReport',
    'merged_per_class merged_average unmerged_per_class unmerged_average')
DomainData = collections.namedtuple('DomainData',
                                    'features labels class_names')
CrossDomainReport = collections.namedtuple(
    'CrossDomainReport', 'in_domain cross_domain zero_shot_in_domain '
                         'zero_shot_cross_domain')
SynthData = collections.namedtuple(
    'SynthData', 'features labels class_names text_features centers')

# random stream ids, so test and support draws never share a stream
TEST_STREAM = 0
SUPPORT_STREAM = 1

SHOT_REGIMES = (1, 5, 10)
FRACTION_REGIMES = (0.2, 0.4, 0.6, 0.8)

SYNTH_CLASS_NAMES = (
    'no diabetic retinopathy',
    'mild diabetic retinopathy',
    'moderate diabetic retinopathy',
    'severe diabetic retinopathy',
    'proliferative diabetic retinopathy',
    'glaucoma',
    'drusens',
    'macular hole',
    'pathologic myopia',
    'tessellation',
)


# -- splits -------------------------------------------------------------------

def check_plan(plan):
    if not 0 < plan.test_fraction < 1:
        raise ConfigError('test_fraction must lie in (0, 1)')
    if plan.shots is not None and plan.fraction is not None:
        raise ConfigError('choose either shots or fraction, not both')
    if plan.shots is not None and plan.shots < 1:
        raise ConfigError('shots must be >= 1')
    if plan.fraction is not None and not 0 < plan.fraction <= 1:
        raise ConfigError('fraction must lie in (0, 1]')
    if plan.folds < 1:
        raise ConfigError('folds must be >= 1')


def _class_members(labels):
    labels = np.asarray(labels)
    return collections.OrderedDict(
        (int(c), np.flatnonzero(labels == c)) for c in np.unique(labels))


def _largest_remainder(quotas):
    """Round quotas to integers keeping their (rounded) total."""
    base = np.floor(quotas).astype(int)
    missing = int(round(quotas.sum())) - base.sum()
    # stable sort keeps the lowest class first among equal remainders
    order = np.argsort(-(quotas - base), kind='stable')
    base[order[:missing]] += 1
    return base


def _test_indices(members, plan):
    rng = make_rng(plan.seed, TEST_STREAM)
    test = []
    for idx in members.values():
        n_test = int(round(plan.test_fraction * len(idx)))
        test.extend(rng.permutation(idx)[:n_test].tolist())
    return np.array(sorted(test), dtype=int)


def make_splits(labels, plan, class_names=None):
    """Fixed stratified test set plus one support draw per fold.

    Without shots or fraction the whole train pool is the support.
    """
    check_plan(plan)
    labels = np.asarray(labels)
    if not len(labels):
        raise InsufficientSamplesError('cannot split an empty dataset')
    members = _class_members(labels)
    test = _test_indices(members, plan)
    in_test = np.zeros(len(labels), dtype=bool)
    in_test[test] = True
    pool = collections.OrderedDict(
        (c, idx[~in_test[idx]]) for c, idx in members.items())

    if plan.shots is not None:
        for c, idx in pool.items():
            if len(idx) < plan.shots:
                name = class_names[c] if class_names else c
                raise InsufficientSamplesError(
                    'class {!r} has {} training samples, {} shots requested'
                    ''.format(name, len(idx), plan.shots))
        counts = [plan.shots] * len(pool)
    elif plan.fraction is not None:
        counts = _largest_remainder(
            plan.fraction * np.array([len(idx) for idx in pool.values()]))
    else:
        counts = [len(idx) for idx in pool.values()]

    splits = []
    for fold in range(plan.folds):
        rng = make_rng(plan.seed, SUPPORT_STREAM, fold)
        support = []
        for idx, count in zip(pool.values(), counts):
            support.extend(rng.choice(idx, size=int(count),
                                      replace=False).tolist())
        splits.append(Split(fold, np.array(sorted(support), dtype=int),
                            test))
    return splits


# -- metrics ------------------------------------------------------------------

def _check_pair(y_true, y_pred):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise DataError('labels and predictions differ in shape: {} vs {}'
                        ''.format(y_true.shape, y_pred.shape))
    if not len(y_true):
        raise DataError('cannot score an empty prediction set')
    return y_true, y_pred


def per_class_accuracy(y_true, y_pred):
    """Within-class accuracy (recall) for every class present in y_true."""
    y_true, y_pred = _check_pair(y_true, y_pred)
    classes = np.union1d(y_true, y_pred)
    matrix = confusion_matrix(y_true, y_pred, labels=classes)
    present = np.isin(classes, y_true)
    recalls = np.diag(matrix)[present] / matrix.sum(axis=1)[present]
    return collections.OrderedDict(
        (c.item(), float(r)) for c, r in zip(classes[present], recalls))


def metric_aca(y_true, y_pred):
    return float(np.mean(list(per_class_accuracy(y_true, y_pred).values())))


def metric_quadratic_kappa(y_true, y_pred, n_grades):
    y_true, y_pred = _check_pair(y_true, y_pred)
    grades = np.arange(n_grades)
    if not (np.isin(y_true, grades).all() and np.isin(y_pred, grades).all()):
        raise DataError('grades must lie in [0, {})'.format(n_grades))
    observed = confusion_matrix(y_true, y_pred, labels=grades)
    expected = np.outer(observed.sum(axis=1),
                        observed.sum(axis=0)) / observed.sum()
    weights = (grades[:, np.newaxis] - grades[np.newaxis, :]) ** 2
    if not np.sum(weights * expected) > 0:
        # degenerate marginals: perfect agreement is the only defined case
        if np.sum(weights * observed) == 0:
            return 1.0
        raise DataError('quadratic kappa undefined for degenerate marginals')
    return float(cohen_kappa_score(y_true, y_pred, labels=grades,
                                   weights='quadratic'))


def metric_auc(y_true, scores):
    y_true = np.asarray(y_true).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    if y_true.shape != scores.shape or not len(y_true):
        raise DataError('need matching, non-empty labels and scores')
    present = set(np.unique(y_true).tolist())
    if present != {0, 1}:
        raise DataError('AUC needs both classes, got {}'
                        ''.format(sorted(present)))
    return float(roc_auc_score(y_true, scores))


def evaluate(y_true, y_pred, task, scores=None, n_grades=None):
    """Single-fold report; kappa for ordinal tasks, AUC for binary ones."""
    per_class = per_class_accuracy(y_true, y_pred)
    aca = float(np.mean(list(per_class.values())))
    kappa = auc = None
    if task == TaskType.ORDINAL:
        if n_grades is None:
            n_grades = int(max(np.max(y_true), np.max(y_pred))) + 1
        kappa = metric_quadratic_kappa(y_true, y_pred, n_grades)
    elif task == TaskType.BINARY:
        if scores is None:
            raise ConfigError('binary tasks need positive-class scores')
        auc = metric_auc(y_true, scores)
    elif task not in TaskType.ALL:
        raise ConfigError('unknown task {!r}'.format(task))
    return EvalReport(per_class, aca, kappa, auc)


def report_metrics(report):
    metrics = collections.OrderedDict([('aca', report.aca)])
    if report.quadratic_kappa is not None:
        metrics['kappa'] = report.quadratic_kappa
    if report.auc is not None:
        metrics['auc'] = report.auc
    return metrics


def aggregate_folds(reports):
    """Mean of per-fold metrics plus their population standard deviation."""
    if not reports:
        raise DataError('no folds to aggregate')
    names = list(report_metrics(reports[0]))
    values = {name: [report_metrics(r)[name] for r in reports]
              for name in names}
    mean = collections.OrderedDict(
        (name, float(np.mean(values[name]))) for name in names)
    std = collections.OrderedDict(
        (name, float(np.std(values[name]))) for name in names)
    classes = sorted(set().union(*(r.per_class_accuracy for r in reports)))
    per_class = collections.OrderedDict(
        (c, float(np.mean([r.per_class_accuracy[c] for r in reports
                           if c in r.per_class_accuracy])))
        for c in classes)
    return EvalReport(per_class, mean['aca'], mean.get('kappa'),
                      mean.get('auc'), tuple(reports), mean, std)


def anomaly_report(y_true, y_pred_disease, normal_id, class_names=None):
    """Accuracies of a normal-vs-disease decision on multi-class truth.

    ``y_pred_disease`` is 1 where the disease prompt won. Merged results
    group every non-normal class into ``disease``; unmerged results keep
    one accuracy per original class.
    """
    y_true = np.asarray(y_true)
    y_pred_disease = np.asarray(y_pred_disease).astype(int)
    truth_disease = (y_true != normal_id).astype(int)
    merged = per_class_accuracy(truth_disease, y_pred_disease)
    merged = collections.OrderedDict(
        ('disease' if c else 'normal', acc) for c, acc in merged.items())
    correct = truth_disease == y_pred_disease
    unmerged = collections.OrderedDict()
    for c in np.unique(y_true):
        name = class_names[c] if class_names else int(c)
        unmerged[name] = float(np.mean(correct[y_true == c]))
    return AnomalyReport(merged, float(np.mean(list(merged.values()))),
                         unmerged, float(np.mean(list(unmerged.values()))))


# -- protocol -----------------------------------------------------------------

def _scores(probabilities, task):
    return probabilities[:, 1] if task == TaskType.BINARY else None


def _evaluate_predictions(labels, classes, probabilities, task, n_classes):
    n_grades = n_classes if task == TaskType.ORDINAL else None
    return evaluate(labels, classes, task, _scores(probabilities, task),
                    n_grades)


def run_fold(method, model, prototypes, features, labels, split, config,
             task):
    labels = np.asarray(labels)
    adapter = fit_adapter(method, model, prototypes,
                          features[split.support], labels[split.support],
                          config)
    classes, probabilities, _ = adapter_predict(adapter, model, prototypes,
                                                features[split.test])
    report = _evaluate_predictions(labels[split.test], classes,
                                   probabilities, task, len(prototypes))
    return report, FoldResult(split.fold, split.test, classes, probabilities,
                              adapter)


def run_protocol(method, model, prototypes, features, labels, plan, config,
                 task, threads=1, ui=None, class_names=None):
    """Fit and score ``method`` on every fold of ``plan``.

    Folds draw their own random streams so the thread count never changes
    the results. Returns ``(aggregated report, per-fold FoldResults)``.
    """
    features = np.asarray(features)
    splits = make_splits(labels, plan, class_names)

    def fold_job(split):
        result = run_fold(method, model, prototypes, features, labels,
                          split, config, task)
        if ui is not None:
            ui.info('{} fold {}: aca {:.4f}'.format(method, split.fold + 1,
                                                    result[0].aca))
        return result

    with ThreadPoolExecutor(max_workers=max(int(threads), 1)) as pool:
        results = list(pool.map(fold_job, splits))
    report = aggregate_folds([r for r, _ in results])
    return report, [p for _, p in results]


def feature_ablation(model, prototypes, features, labels, plan, config,
                     task, threads=1, ui=None):
    """Linear probe on each feature choice of the same frozen model."""
    reports = collections.OrderedDict()
    for choice in FeatureChoice.ALL:
        reports[choice], _ = run_protocol(
            Method.LINEAR_PROBE, model, prototypes, features, labels, plan,
            config._replace(feature_choice=choice), task, threads, ui)
    return reports


def align_vocabulary(domain_a, domain_b):
    """Labels of B re-indexed into A's class order."""
    names_a, names_b = list(domain_a.class_names), list(domain_b.class_names)
    unshared = sorted(set(names_a) ^ set(names_b))
    if unshared:
        raise VocabularyError('class vocabularies differ; unshared classes: '
                              '{}'.format(', '.join(unshared)))
    remap = np.array([names_a.index(name) for name in names_b])
    return remap[np.asarray(domain_b.labels)]


def cross_domain_eval(method, model, prototypes, domain_a, domain_b, plan,
                      config, task, threads=1, ui=None):
    """Fit on A and score on A's and B's test sets, fold by fold.

    ``prototypes`` follow A's class order. Zero-shot reports on the same
    test sets come along as the no-adaptation reference.
    """
    labels_b = align_vocabulary(domain_a, domain_b)
    features_a = np.asarray(domain_a.features)
    features_b = np.asarray(domain_b.features)
    labels_a = np.asarray(domain_a.labels)
    splits_a = make_splits(labels_a, plan, domain_a.class_names)
    test_b = make_splits(labels_b, plan._replace(shots=None, fraction=None,
                                                 folds=1))[0].test
    n_classes = len(prototypes)
    zero_shot = fit_adapter(Method.ZERO_SHOT, model, prototypes, None, None)

    def score(adapter, features, labels):
        classes, probabilities, _ = adapter_predict(adapter, model,
                                                    prototypes, features)
        return _evaluate_predictions(labels, classes, probabilities, task,
                                     n_classes)

    def fold_job(split):
        adapter = fit_adapter(method, model, prototypes,
                              features_a[split.support],
                              labels_a[split.support], config)
        if ui is not None:
            ui.info('{} fold {} fitted on {} support samples'
                    ''.format(method, split.fold + 1, len(split.support)))
        return (score(adapter, features_a[split.test], labels_a[split.test]),
                score(adapter, features_b[test_b], labels_b[test_b]))

    with ThreadPoolExecutor(max_workers=max(int(threads), 1)) as pool:
        results = list(pool.map(fold_job, splits_a))
    test_a = splits_a[0].test
    return CrossDomainReport(
        aggregate_folds([a for a, _ in results]),
        aggregate_folds([b for _, b in results]),
        aggregate_folds([score(zero_shot, features_a[test_a],
                               labels_a[test_a])]),
        aggregate_folds([score(zero_shot, features_b[test_b],
                               labels_b[test_b])]))


# -- synthetic data -----------------------------------------------------------

def _unit_rows(rng, n, dim):
    vectors = rng.standard_normal((n, dim))
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


def synth_dataset(n_classes, n_per_class, feature_dim, class_separation,
                  noise, seed, text_correlation=0.8, rotation=None):
    """Gaussian clusters around well separated class centers.

    ``text_features`` holds one unit "text" direction per class that is
    correlated with (``text_correlation``) but distinct from the class
    center direction. ``rotation`` (an orthogonal matrix) shifts the image
    domain while keeping the text side fixed.
    """
    if min(n_classes, n_per_class, feature_dim) < 1:
        raise ConfigError('synthetic dataset sizes must be positive')
    if n_classes > len(SYNTH_CLASS_NAMES):
        raise ConfigError('at most {} synthetic classes are supported'
                          ''.format(len(SYNTH_CLASS_NAMES)))
    if class_separation < 0 or noise < 0:
        raise ConfigError('separation and noise must be non-negative')
    rng = make_rng(seed)
    directions = _unit_rows(rng, n_classes, feature_dim)
    centers = class_separation * directions
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = centers[labels] + noise * rng.standard_normal(
        (len(labels), feature_dim))
    if rotation is not None:
        features = features @ np.asarray(rotation).T
    text_noise = _unit_rows(rng, n_classes, feature_dim)
    text = (text_correlation * directions +
            np.sqrt(1.0 - text_correlation ** 2) * text_noise)
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    return SynthData(features, labels, list(SYNTH_CLASS_NAMES[:n_classes]),
                     text, centers)


def random_rotation(dim, seed):
    """Random orthogonal matrix (QR of a Gaussian matrix, sign-fixed)."""
    q, r = np.linalg.qr(make_rng(seed).standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))
