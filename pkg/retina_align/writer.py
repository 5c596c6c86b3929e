"""Writers for every file the tool produces."""
import base64
import io
import json
import os

import numpy as np

from retina_align.consts import (ADAPTER_FORMAT, EMBEDDING_MAGIC,
                                 FILE_FORMAT_VERSION, MODEL_FORMAT)
from retina_align.exceptions import ShapeError
from retina_align.reader import HEADER

# fields of adapter states that describe a fit rather than define it
TRACE_FIELDS = ('objective_trace', 'loss_trace', 'n_iter')


def _replace_atomically(path, payload):
    tmp = '{}.tmp'.format(path)
    with io.open(tmp, 'wb') as f:
        f.write(payload)
    os.replace(tmp, path)


def write_embeddings(path, matrix):
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[1] == 0:
        raise ShapeError('embeddings must be a matrix with dim >= 1, got '
                         'shape {}'.format(matrix.shape))
    count, dim = matrix.shape
    payload = HEADER.pack(EMBEDDING_MAGIC, count, dim, 0)
    payload += np.ascontiguousarray(matrix, dtype='<f4').tobytes()
    _replace_atomically(path, payload)


def encode_array(array):
    array = np.ascontiguousarray(array, dtype='<f8')
    return {'dtype': '<f8', 'shape': list(array.shape),
            'data': base64.b64encode(array.tobytes()).decode('ascii')}


def _dump(path, document):
    text = json.dumps(document, sort_keys=True, indent=1)
    _replace_atomically(path, (text + '\n').encode('utf-8'))


def _plain(value):
    """JSON-ready copy of configs, dicts and numpy scalars."""
    if hasattr(value, '_asdict'):
        value = value._asdict()
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def save_model(path, model, featurizer=None, train_config=None,
               class_names=None):
    """JSON model file; log_tau is stored as a hex float so it round-trips
    exactly."""
    document = {
        'format': MODEL_FORMAT,
        'version': FILE_FORMAT_VERSION,
        'vision_head': {'weights': encode_array(model.vision_head.weights),
                        'bias': encode_array(model.vision_head.bias)},
        'text_head': {'weights': encode_array(model.text_head.weights),
                      'bias': encode_array(model.text_head.bias)},
        'log_tau': float(model.log_tau).hex(),
    }
    if featurizer is not None:
        document['featurizer'] = _plain(featurizer)
    if train_config is not None:
        document['train_config'] = _plain(train_config)
    if class_names is not None:
        document['class_names'] = list(class_names)
    _dump(path, document)


def save_adapter(path, adapter, class_names=None, config=None):
    state = None
    if adapter.state is not None:
        state = {}
        for field, value in adapter.state._asdict().items():
            if field in TRACE_FIELDS:
                continue
            if isinstance(value, np.ndarray):
                state[field] = encode_array(value)
            else:
                state[field] = _plain(value)
    document = {
        'format': ADAPTER_FORMAT,
        'version': FILE_FORMAT_VERSION,
        'method': adapter.method,
        'feature_choice': adapter.feature_choice,
        'state': state,
    }
    if class_names is not None:
        document['class_names'] = list(class_names)
    if config is not None:
        document['config'] = _plain(config)
    _dump(path, document)


class JsonLinesWriter(object):

    def __init__(self, path):
        self.path = path
        self._f = None

    def __enter__(self):
        self._f = io.open(self.path, 'w', encoding='utf-8')
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self._f.close()

    def write(self, record):
        self._f.write(json.dumps(_plain(record)) + '\n')


def write_loss_trace(path, trace):
    with JsonLinesWriter(path) as out:
        for record in trace:
            out.write({'epoch': record.epoch, 'mean_loss': record.mean_loss,
                       'lr': record.lr, 'tau': record.tau})


def prediction_record(sample_id, class_name, probabilities, class_names,
                      fold=None):
    record = {'id': sample_id, 'class': class_name,
              'probabilities': {name: float(p) for name, p
                                in zip(class_names, probabilities)}}
    if fold is not None:
        record['fold'] = int(fold)
    return record


def write_predictions(path, records):
    with JsonLinesWriter(path) as out:
        for record in records:
            out.write(record)


def report_document(report):
    """Fixed-schema dict of an EvalReport (fold reports nested)."""
    document = {'aca': report.aca,
                'per_class': _plain(report.per_class_accuracy)}
    if report.quadratic_kappa is not None:
        document['kappa'] = report.quadratic_kappa
    if report.auc is not None:
        document['auc'] = report.auc
    document['folds'] = [report_document(r) for r in report.per_fold]
    document['mean'] = _plain(report.mean) if report.mean else None
    document['std'] = _plain(report.std) if report.std else None
    return document


def write_report(path, report, extra=None):
    document = (report_document(report) if hasattr(report, 'per_fold')
                else _plain(report))
    if extra:
        document.update(_plain(extra))
    _dump(path, document)


def write_manifest(path, rows):
    with JsonLinesWriter(path) as out:
        for row in rows:
            out.write(row)
