"""One entry point per subcommand, wiring the file formats to the library.

Every ``run_*`` function takes plain values (paths, numbers, names) plus a
``UI`` and returns the main in-memory result so it can be scripted too.
"""
import collections
import os

import numpy as np

from retina_align.adapters import make_adapter_config
from retina_align.consts import NORMAL_CATEGORY, PromptMode, TaskType
from retina_align.contrastive import gradient_check, random_instance
from retina_align.embedding import head_dims, init_model
from retina_align.evalkit import (SplitPlan, aggregate_folds, anomaly_report,
                                  evaluate, run_protocol, synth_dataset)
from retina_align.exceptions import (ConfigError, DataError, NumericalError,
                                     VocabularyError)
from retina_align.featurizer import SurrogateTextFeaturizer
from retina_align.prompt_bank import load_bank, load_registry
from retina_align.reader import (load_model, read_embeddings, read_manifest,
                                 read_predictions)
from retina_align.trainer import make_train_config, train
from retina_align.utils import make_rng, read_config_section
from retina_align.writer import (prediction_record, save_adapter, save_model,
                                 write_embeddings, write_loss_trace,
                                 write_manifest, write_predictions,
                                 write_report)
from retina_align.zeroshot import class_prototypes, predict_batch

TRAIN_SECTION = 'train'
ADAPTER_SECTION = 'adapter'

DEFAULT_TEXT_DIM = 64
GRADCHECK_TOLERANCE = 1e-4


def _section(config_path, section):
    if not config_path:
        return {}
    if not os.path.isfile(config_path):
        raise ConfigError('config file {} does not exist'.format(config_path))
    return read_config_section(config_path, section)


def default_loss_trace_path(model_path):
    return os.path.splitext(model_path)[0] + '_loss.jsonl'


def featurizer_for(metadata, text_dim=None, text_seed=None):
    """Rebuild the text featurizer a model was trained with."""
    settings = metadata.get('featurizer') or {}
    dim = settings.get('dim', text_dim or DEFAULT_TEXT_DIM)
    seed = settings.get('seed', text_seed or 0)
    return SurrogateTextFeaturizer(dim, seed)


def _load_data(manifest, image_emb, registry):
    features = read_embeddings(image_emb)
    records = read_manifest(manifest, registry, len(features))
    if not records:
        raise DataError('manifest {} holds no records'.format(manifest))
    return np.asarray(features, dtype=np.float64), records


def resolve_classes(registry, records, classes=None):
    """Categories of a task: the ``classes`` names or abbreviations in that
    order, or every category present in ``records`` by id."""
    if classes:
        return [registry.resolve(name) for name in classes]
    return [registry.by_id(cat_id)
            for cat_id in sorted({r.label for r in records})]


def local_prototypes(prototypes):
    """Prototypes numbered 0..K-1 so predicted ids index the task classes."""
    return [p._replace(category=p.category._replace(id=i))
            for i, p in enumerate(prototypes)]


def unique_samples(records):
    """First record of every sample id, in manifest order."""
    seen = collections.OrderedDict()
    for record in records:
        seen.setdefault(record.sample_id, record)
    return list(seen.values())


def run_pretrain(manifest, image_emb, out, ui, prompt_bank=None,
                 registry=None, config=None, seed=None, precision=None,
                 text_dim=None, text_seed=None, loss_trace=None):
    bank = load_bank(prompt_bank)
    reg = load_registry(registry)
    features, records = _load_data(manifest, image_emb, reg)
    train_config = make_train_config(_section(config, TRAIN_SECTION),
                                     source=config or 'defaults',
                                     seed=seed, precision=precision)
    featurizer = SurrogateTextFeaturizer(text_dim or DEFAULT_TEXT_DIM,
                                         text_seed or 0)
    ui.info('training on {} records ({} features of dim {}), {}'
            ''.format(len(records), len(features), features.shape[1],
                      train_config))
    init = init_model(features.shape[1], featurizer.dim, train_config.d_out,
                      seed=train_config.seed,
                      log_tau=train_config.init_log_tau)
    model, trace = train(records, features, bank, featurizer, train_config,
                         init, reg, ui)
    save_model(out, model, featurizer.settings(), train_config)
    trace_path = loss_trace or default_loss_trace_path(out)
    write_loss_trace(trace_path, trace)
    ui.info('model written to {}, loss trace to {}'.format(out, trace_path))
    return model, trace


def run_zeroshot(model_path, manifest, image_emb, out, ui, mode=PromptMode.EK,
                 classes=None, prompt_bank=None, registry=None,
                 text_dim=None, text_seed=None, report=None):
    bank = load_bank(prompt_bank)
    reg = load_registry(registry)
    features, records = _load_data(manifest, image_emb, reg)
    model, metadata = load_model(model_path, d_vision=features.shape[1])
    featurizer = featurizer_for(metadata, text_dim, text_seed)
    categories = resolve_classes(reg, records, classes)
    prototypes = local_prototypes(
        class_prototypes(bank, featurizer, model, categories, mode))
    names = [p.category.name for p in prototypes]

    samples = unique_samples(records)
    index = np.array([r.image_feature_index for r in samples])
    predictions = predict_batch(model, features[index], prototypes)
    write_predictions(out, (
        prediction_record(sample.sample_id, names[p.class_id],
                          p.probabilities, names)
        for sample, p in zip(samples, predictions)))
    ui.info('{} zero-shot predictions ({} mode) written to {}'
            ''.format(len(predictions), mode, out))

    predicted = np.array([p.class_id for p in predictions])
    truth = np.array([r.label for r in samples])
    if mode == PromptMode.ANOMALY:
        normal_id = reg.by_name(NORMAL_CATEGORY).id
        result = anomaly_report(truth, predicted, normal_id,
                                [c.name for c in reg])
        ui.info('anomaly accuracy: merged {:.4f}, unmerged {:.4f}'
                ''.format(result.merged_average, result.unmerged_average))
    else:
        local = {cat.id: i for i, cat in enumerate(categories)}
        known = np.array([label in local for label in truth])
        if not known.any():
            ui.warning('no sample carries one of the requested classes')
            return predictions, None
        result = evaluate(np.array([local[label] for label in truth[known]]),
                          predicted[known], TaskType.MULTICLASS)
        ui.info('zero-shot ACA {:.4f} on {} samples'.format(result.aca,
                                                            known.sum()))
    if report:
        write_report(report, result)
    return predictions, result


def _task_labels(records, categories, ui):
    local = {cat.id: i for i, cat in enumerate(categories)}
    kept = [r for r in records if r.label in local]
    if len(kept) < len(records):
        ui.warning('skipping {} records outside the requested classes'
                   ''.format(len(records) - len(kept)))
    if not kept:
        raise DataError('no records of the requested classes')
    return kept, np.array([local[r.label] for r in kept])


def run_adapt(model_path, manifest, image_emb, out, ui, method,
              predictions=None, shots=None, fraction=None,
              feature_choice=None, seed=None, classes=None,
              mode=PromptMode.NAIVE, config=None, folds=5,
              test_fraction=0.2, task=TaskType.MULTICLASS, threads=1,
              prompt_bank=None, registry=None, text_dim=None,
              text_seed=None, report=None):
    bank = load_bank(prompt_bank)
    reg = load_registry(registry)
    features, records = _load_data(manifest, image_emb, reg)
    model, metadata = load_model(model_path, d_vision=features.shape[1])
    featurizer = featurizer_for(metadata, text_dim, text_seed)
    categories = resolve_classes(reg, records, classes)
    prototypes = local_prototypes(
        class_prototypes(bank, featurizer, model, categories, mode))
    names = [cat.name for cat in categories]

    adapter_config = make_adapter_config(
        _section(config, ADAPTER_SECTION), source=config or 'defaults',
        seed=seed, feature_choice=feature_choice)
    plan = SplitPlan(test_fraction, shots, fraction, folds,
                     adapter_config.seed)
    kept, labels = _task_labels(records, categories, ui)
    index = np.array([r.image_feature_index for r in kept])
    result, folds_out = run_protocol(method, model, prototypes,
                                     features[index], labels, plan,
                                     adapter_config, task, threads, ui, names)
    ui.info('{}: mean ACA {:.4f} (std {:.4f}) over {} folds'
            ''.format(method, result.aca, result.std['aca'], plan.folds))

    save_adapter(out, folds_out[0].adapter, names, adapter_config)
    if predictions:
        write_predictions(predictions, (
            prediction_record(kept[i].sample_id, names[c], p, names,
                              fold=fold.fold)
            for fold in folds_out
            for i, c, p in zip(fold.indices, fold.classes,
                               fold.probabilities)))
    if report:
        write_report(report, result, {'method': method,
                                      'plan': plan._asdict(),
                                      'config': adapter_config})
    return result, folds_out


def run_eval(predictions, labels, out, ui, task=TaskType.MULTICLASS,
             classes=None, registry=None):
    """Score a predictions file against the labels of a manifest.

    Class order comes from ``classes`` or from the probability keys of the
    first prediction; lines with a ``fold`` are aggregated per fold.
    """
    reg = load_registry(registry)
    rows = read_predictions(predictions)
    if not rows:
        raise DataError('predictions file {} is empty'.format(predictions))
    names = list(classes or rows[0]['probabilities'])
    position = {name: i for i, name in enumerate(names)}
    truth = {}
    for record in read_manifest(labels, reg):
        name = reg.by_id(record.label).name
        if truth.setdefault(record.sample_id, name) != name:
            raise DataError('sample {!r} has several labels'
                            ''.format(record.sample_id))

    by_fold = collections.OrderedDict()
    for row in rows:
        if row['id'] not in truth:
            raise DataError('no label for prediction {!r}'.format(row['id']))
        unknown = {truth[row['id']], row['class']} - set(position)
        if unknown:
            raise VocabularyError('classes outside the prediction vocabulary:'
                                  ' {}'.format(', '.join(sorted(unknown))))
        by_fold.setdefault(row.get('fold', 0), []).append(row)

    reports = []
    for fold_rows in by_fold.values():
        y_true = np.array([position[truth[r['id']]] for r in fold_rows])
        y_pred = np.array([position[r['class']] for r in fold_rows])
        scores = None
        if task == TaskType.BINARY:
            scores = np.array([r['probabilities'].get(names[1], 0.0)
                               for r in fold_rows])
        n_grades = len(names) if task == TaskType.ORDINAL else None
        reports.append(evaluate(y_true, y_pred, task, scores, n_grades))
    result = aggregate_folds(reports)
    write_report(out, result)
    ui.info('ACA {:.4f} over {} fold(s), report written to {}'
            ''.format(result.aca, len(reports), out))
    return result


def run_gradcheck(ui, n_configs=200, seed=0, tolerance=GRADCHECK_TOLERANCE):
    """Finite-difference check on random small configurations."""
    rng = make_rng(seed)
    worst = None
    for i in range(n_configs):
        model, raw_batch = random_instance(rng)
        result = gradient_check(model, raw_batch)
        ui.debug('configuration {}: batch {}, heads {} / {}, max relative '
                 'error {:.3g}'.format(i, len(raw_batch[2]),
                                       head_dims(model.vision_head),
                                       head_dims(model.text_head),
                                       result.max_rel_error))
        if worst is None or result.max_rel_error > worst.max_rel_error:
            worst = result
    ui.info('gradient check over {} configurations: max relative error {:.3g}'
            ' ({} at {})'.format(n_configs, worst.max_rel_error, worst.block,
                                 worst.index))
    if worst.max_rel_error >= tolerance:
        raise NumericalError('analytic and numeric gradients disagree: {}'
                             ''.format(worst), block=worst.block)
    return worst


def run_synth(out_emb, out_manifest, ui, n_classes=4, n_per_class=100,
              dim=16, separation=4.0, noise=0.5, seed=0, registry=None):
    reg = load_registry(registry)
    data = synth_dataset(n_classes, n_per_class, dim, separation, noise,
                         seed)
    write_embeddings(out_emb, data.features)
    abbreviations = [reg.by_name(name).abbreviation
                     for name in data.class_names]
    write_manifest(out_manifest, (
        {'id': 'synth-{:05d}'.format(i), 'label': abbreviations[label],
         'embedding_index': i}
        for i, label in enumerate(data.labels)))
    ui.info('{} synthetic samples of {} classes written to {} and {}'
            ''.format(len(data.labels), n_classes, out_emb, out_manifest))
    return data
