"""Readers for embedding files, manifests, predictions, model and adapter
files. Every rejection carries the position of the offending input."""
import base64
import binascii
import collections
import functools
import io
import json
import operator
import os
import struct

import numpy as np
import trafaret as t

from retina_align.adapters import (ClipAdapterHead, FittedAdapter,
                                   LinearProbe, TipCache)
from retina_align.consts import (ADAPTER_FORMAT, EMBEDDING_HEADER_SIZE,
                                 EMBEDDING_MAGIC, FILE_FORMAT_VERSION,
                                 MAX_LOG_TAU, MODEL_FORMAT, FeatureChoice,
                                 Method, TripletRecord)
from retina_align.embedding import ModelState, ProjectionHead, head_dims
from retina_align.exceptions import (EmbeddingFormatError, ManifestError,
                                     ModelFormatError, ShapeError,
                                     UnknownCategoryError)
from retina_align.prompt_bank import trafaret_position
from retina_align.utils import OptKey

HEADER = struct.Struct('<4sIII')

manifest_record_validator = t.Dict({
    t.Key('id'): t.String(allow_blank=False),
    OptKey('label'): t.String(allow_blank=False),
    OptKey('labels'): t.List(t.String(allow_blank=False), min_length=1),
    t.Key('embedding_index'): t.Int(gte=0),
    OptKey('text'): t.Or(t.Null, t.String),
}).allow_extra('*')

prediction_validator = t.Dict({
    t.Key('id'): t.String(allow_blank=False),
    t.Key('class'): t.String(allow_blank=False),
    t.Key('probabilities'): t.Mapping(t.String, t.Float(gte=0, lte=1)),
    OptKey('fold'): t.Int(gte=0),
})

array_validator = t.Dict({
    t.Key('dtype'): t.Atom('<f8'),
    t.Key('shape'): t.List(t.Int(gte=0)),
    t.Key('data'): t.String(allow_blank=True),
})

head_validator = t.Dict({
    t.Key('weights'): array_validator,
    t.Key('bias'): array_validator,
})

model_validator = t.Dict({
    t.Key('format'): t.Atom(MODEL_FORMAT),
    t.Key('version'): t.Atom(FILE_FORMAT_VERSION),
    t.Key('vision_head'): head_validator,
    t.Key('text_head'): head_validator,
    t.Key('log_tau'): t.String,
    OptKey('featurizer'): t.Dict().allow_extra('*'),
    OptKey('train_config'): t.Dict().allow_extra('*'),
    OptKey('class_names'): t.List(t.String),
}).allow_extra('*')

adapter_validator = t.Dict({
    t.Key('format'): t.Atom(ADAPTER_FORMAT),
    t.Key('version'): t.Atom(FILE_FORMAT_VERSION),
    t.Key('method'): t.Enum(*Method.ALL),
    t.Key('feature_choice'): t.Enum(*FeatureChoice.ALL),
    t.Key('state'): t.Or(t.Null, t.Dict().allow_extra('*')),
    OptKey('class_names'): t.List(t.String),
    OptKey('config'): t.Dict().allow_extra('*'),
}).allow_extra('*')

ADAPTER_STATES = {
    Method.LINEAR_PROBE: LinearProbe,
    Method.TIP_ADAPTER: TipCache,
    Method.TIP_ADAPTER_F: TipCache,
    Method.CLIP_ADAPTER: ClipAdapterHead,
}


# -- embeddings ---------------------------------------------------------------

def _embedding_header(raw, path):
    if len(raw) < EMBEDDING_HEADER_SIZE:
        raise EmbeddingFormatError('{}: truncated header'.format(path),
                                   position=len(raw))
    magic, count, dim, reserved = HEADER.unpack_from(raw)
    if magic != EMBEDDING_MAGIC:
        raise EmbeddingFormatError('{}: bad magic {!r}'.format(path, magic),
                                   position=0)
    if dim == 0:
        raise EmbeddingFormatError('{}: dimension must be positive'
                                   ''.format(path), position=8)
    if reserved != 0:
        raise EmbeddingFormatError('{}: reserved header field is {}'
                                   ''.format(path, reserved), position=12)
    return count, dim


def read_embeddings(path, mmap=False):
    """``count x dim`` float32 matrix of an EMB1 file.

    With ``mmap`` the payload is mapped read-only instead of copied.
    """
    size = os.path.getsize(path)
    with io.open(path, 'rb') as f:
        header = f.read(EMBEDDING_HEADER_SIZE)
    count, dim = _embedding_header(header, path)
    expected = EMBEDDING_HEADER_SIZE + 4 * count * dim
    if size < expected:
        raise EmbeddingFormatError(
            '{}: truncated payload, {} of {} bytes'.format(path, size,
                                                           expected),
            position=size)
    if size > expected:
        raise EmbeddingFormatError(
            '{}: {} trailing bytes'.format(path, size - expected),
            position=expected)
    if mmap and count:
        data = np.memmap(path, dtype='<f4', mode='r',
                         offset=EMBEDDING_HEADER_SIZE, shape=(count, dim))
    else:
        with io.open(path, 'rb') as f:
            f.seek(EMBEDDING_HEADER_SIZE)
            data = np.frombuffer(f.read(), dtype='<f4').reshape(count, dim)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise EmbeddingFormatError(
            '{}: non-finite value in row {}'.format(path, bad[0] // dim),
            position=EMBEDDING_HEADER_SIZE + 4 * int(bad[0]))
    return data


# -- JSON lines ---------------------------------------------------------------

class JsonLinesReader(object):
    """Iterates ``(line_number, object)`` over the non-blank lines of a
    UTF-8 JSON lines file."""

    def __init__(self, path, error_cls):
        self.path = path
        self.error_cls = error_cls

    def __iter__(self):
        with io.open(self.path, 'rb') as f:
            for lineno, raw in enumerate(f, 1):
                position = 'line {}'.format(lineno)
                try:
                    line = raw.decode('utf-8')
                except UnicodeDecodeError as e:
                    raise self.error_cls('{}: invalid UTF-8: {}'
                                         ''.format(self.path, e.reason),
                                         position=position)
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except ValueError as e:
                    raise self.error_cls('{}: invalid JSON: {}'.format(
                        self.path, getattr(e, 'msg', e)), position=position)
                yield lineno, obj

    def validated(self, validator):
        for lineno, obj in self:
            try:
                yield lineno, validator.check(obj)
            except t.DataError as e:
                raise self.error_cls('{}: invalid record: {}'
                                     ''.format(self.path, e.as_dict()),
                                     position='line {}'.format(lineno))


def read_manifest(path, registry, n_embeddings=None):
    """Triplet records of a manifest, one per label of every line."""
    records = []
    reader = JsonLinesReader(path, ManifestError)
    for lineno, item in reader.validated(manifest_record_validator):
        position = 'line {}'.format(lineno)
        if ('label' in item) == ('labels' in item):
            raise ManifestError('{}: exactly one of "label" and "labels" '
                                'is required'.format(path),
                                position=position)
        index = item['embedding_index']
        if n_embeddings is not None and index >= n_embeddings:
            raise ManifestError('{}: embedding_index {} out of range for {} '
                                'embeddings'.format(path, index,
                                                    n_embeddings),
                                position=position)
        labels = item['labels'] if 'labels' in item else [item['label']]
        for label in labels:
            try:
                cat = registry.resolve(label)
            except UnknownCategoryError:
                raise ManifestError('{}: unknown label {!r}'
                                    ''.format(path, label),
                                    position=position)
            records.append(TripletRecord(item['id'], index, cat.id,
                                         item.get('text') or None))
    return records


def read_predictions(path):
    return [item for _, item in JsonLinesReader(
        path, ManifestError).validated(prediction_validator)]


# -- models and adapters ------------------------------------------------------

def _load_json_document(path, error_cls):
    try:
        with io.open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except UnicodeDecodeError as e:
        raise error_cls('{}: invalid UTF-8: {}'.format(path, e.reason),
                        position='byte {}'.format(e.start))
    except ValueError as e:
        raise error_cls('{}: invalid JSON: {}'.format(path,
                                                      getattr(e, 'msg', e)),
                        position='line {}, column {}'.format(
                            getattr(e, 'lineno', '?'),
                            getattr(e, 'colno', '?')))


def decode_array(item, key):
    try:
        raw = base64.b64decode(item['data'].encode('ascii'), validate=True)
    except (binascii.Error, UnicodeEncodeError):
        raise ModelFormatError('bad base64 payload', position=key)
    shape = tuple(item['shape'])
    if len(raw) != 8 * functools.reduce(operator.mul, shape, 1):
        raise ModelFormatError('payload of {} bytes does not match shape {}'
                               ''.format(len(raw), shape), position=key)
    try:
        data = np.frombuffer(raw, dtype='<f8').reshape(shape)
    except ValueError as e:
        raise ModelFormatError('cannot use shape {}: {}'.format(shape, e),
                               position=key)
    data = data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ModelFormatError('non-finite parameter values', position=key)
    return data


def _head(item, key):
    head = ProjectionHead(decode_array(item['weights'], key + '.weights'),
                          decode_array(item['bias'], key + '.bias'))
    if head.weights.ndim != 2 or head.bias.shape != head.weights.shape[:1]:
        raise ModelFormatError('inconsistent head shapes {} / {}'.format(
            head.weights.shape, head.bias.shape), position=key)
    return head


def _log_tau(text):
    try:
        value = float.fromhex(text)
    except ValueError:
        raise ModelFormatError('log_tau {!r} is not a hex float'.format(text),
                               position='log_tau')
    if not np.isfinite(value) or value > MAX_LOG_TAU:
        raise ModelFormatError('log_tau {!r} out of range'.format(text),
                               position='log_tau')
    return value


def load_model(path, d_out=None, d_vision=None, d_text=None):
    """``(ModelState, metadata)``; expected dimensions are checked when
    given."""
    raw = _load_json_document(path, ModelFormatError)
    try:
        data = model_validator.check(raw)
    except t.DataError as e:
        raise ModelFormatError('{}: invalid model file: {}'
                               ''.format(path, e.as_dict()),
                               position=trafaret_position(e))
    model = ModelState(_head(data['vision_head'], 'vision_head'),
                       _head(data['text_head'], 'text_head'),
                       _log_tau(data['log_tau']))
    v_in, v_out = head_dims(model.vision_head)
    t_in, t_out = head_dims(model.text_head)
    if v_out != t_out:
        raise ShapeError('{}: joint dimensions differ ({} vs {})'
                         ''.format(path, v_out, t_out))
    for name, expected, actual in (('d_out', d_out, v_out),
                                   ('d_vision', d_vision, v_in),
                                   ('d_text', d_text, t_in)):
        if expected is not None and expected != actual:
            raise ShapeError('{}: {} is {}, expected {}'
                             ''.format(path, name, actual, expected))
    metadata = {k: data[k] for k in ('featurizer', 'train_config',
                                     'class_names') if k in data}
    return model, metadata


def _adapter_state(method, item):
    cls = ADAPTER_STATES[method]
    values = collections.OrderedDict()
    for field in cls._fields:
        if field not in item:
            continue
        value = item[field]
        if isinstance(value, dict):
            try:
                value = decode_array(array_validator.check(value), field)
            except t.DataError as e:
                raise ModelFormatError('invalid array: {}'
                                       ''.format(e.as_dict()),
                                       position=field)
        values[field] = value
    try:
        return cls(**values)
    except TypeError as e:
        raise ModelFormatError('incomplete {} state: {}'.format(method, e),
                               position='state')


def load_adapter(path):
    """``(FittedAdapter, metadata)`` of an adapter file."""
    raw = _load_json_document(path, ModelFormatError)
    try:
        data = adapter_validator.check(raw)
    except t.DataError as e:
        raise ModelFormatError('{}: invalid adapter file: {}'
                               ''.format(path, e.as_dict()),
                               position=trafaret_position(e))
    method = data['method']
    state = None
    if method != Method.ZERO_SHOT:
        if data['state'] is None:
            raise ModelFormatError('{}: missing adapter state'.format(path),
                                   position='state')
        state = _adapter_state(method, data['state'])
    metadata = {k: data[k] for k in ('class_names', 'config') if k in data}
    return FittedAdapter(method, state, data['feature_choice']), metadata
