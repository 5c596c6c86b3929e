"""Label-to-text mappings: the naive template and the expert-knowledge
descriptor bank, plus the category abbreviation registry."""
import collections
import io
import json
import os
from types import MappingProxyType

import trafaret as t

from retina_align.consts import CLS_TOKEN, NAIVE_TEMPLATE, Category
from retina_align.exceptions import (PromptBankError, UnknownCategoryError,
                                     FormatError)
from retina_align.utils import OptKey

DATA_DIR = os.path.join(os.path.dirname(__file__), 'data')
DEFAULT_BANK_PATH = os.path.join(DATA_DIR, 'prompt_bank.json')
DEFAULT_REGISTRY_PATH = os.path.join(DATA_DIR, 'categories.json')


PromptBank = collections.namedtuple('PromptBank', 'entries naive_template')


bank_validator = t.Dict({
    OptKey('naive_template'): t.String,
    t.Key('categories'): t.Mapping(t.String(allow_blank=False),
                                   t.List(t.String(allow_blank=False))),
})

registry_validator = t.Dict({
    t.Key('categories'): t.List(
        t.Tuple(t.String(allow_blank=False), t.String(allow_blank=False))),
})


class DuplicateKeyError(ValueError):
    def __init__(self, key):
        self.key = key
        super(DuplicateKeyError, self).__init__(key)


def _reject_duplicates(pairs):
    seen = collections.OrderedDict()
    for key, value in pairs:
        if key in seen:
            raise DuplicateKeyError(key)
        seen[key] = value
    return seen


def _load_json(path, error_cls):
    """Parse a UTF-8 JSON file rejecting duplicate object keys."""
    try:
        with io.open(path, 'r', encoding='utf-8') as f:
            return json.load(f, object_pairs_hook=_reject_duplicates)
    except DuplicateKeyError as e:
        raise error_cls('duplicate key {!r}'.format(e.key), position=e.key)
    except ValueError as e:
        lineno = getattr(e, 'lineno', None)
        colno = getattr(e, 'colno', None)
        position = None
        if lineno is not None:
            position = 'line {}, column {}'.format(lineno, colno)
        raise error_cls('cannot parse {}: {}'.format(path, getattr(
            e, 'msg', e)), position=position)


def trafaret_position(error):
    """First failing key path of a trafaret error, e.g. ``categories.G``."""
    detail = error.as_dict()
    path = []
    while isinstance(detail, dict) and detail:
        key = next(iter(detail))
        path.append(str(key))
        detail = detail[key]
    return '.'.join(path) or None


def load_bank(path=None):
    """Load a prompt bank; ``None`` loads the shipped descriptor table."""
    path = path or DEFAULT_BANK_PATH
    raw = _load_json(path, PromptBankError)
    try:
        data = bank_validator.check(raw)
    except t.DataError as e:
        raise PromptBankError('invalid prompt bank {}: {}'
                              ''.format(path, e.as_dict()),
                              position=trafaret_position(e))
    template = data.get('naive_template', NAIVE_TEMPLATE)
    if template.count(CLS_TOKEN) != 1:
        raise PromptBankError('naive_template must contain exactly one {}'
                              ''.format(CLS_TOKEN), position='naive_template')
    entries = collections.OrderedDict(
        (name, tuple(descriptions))
        for name, descriptions in data['categories'].items())
    return PromptBank(MappingProxyType(entries), template)


def _category_name(cat):
    return getattr(cat, 'name', cat)


def naive_prompt(bank, cat):
    return bank.naive_template.replace(CLS_TOKEN, _category_name(cat))


def ek_prompts(bank, cat):
    name = _category_name(cat)
    try:
        return list(bank.entries[name])
    except KeyError:
        raise UnknownCategoryError(
            'category {!r} has no entry in the prompt bank'.format(name))


def sample_training_prompt(bank, cat, rng):
    """Draw uniformly from the naive prompt and the category descriptors.

    Categories without a bank entry only ever get the naive prompt.
    """
    candidates = [naive_prompt(bank, cat)]
    candidates.extend(bank.entries.get(_category_name(cat), ()))
    return candidates[int(rng.integers(len(candidates)))]


class CategoryRegistry(object):
    """Dense category ids with a 1:1 name/abbreviation mapping."""

    def __init__(self, pairs):
        self.categories = []
        self._by_name = {}
        self._by_abbreviation = {}
        for name, abbreviation in pairs:
            if name in self._by_name:
                raise FormatError('duplicate category name {!r}'
                                  ''.format(name), position=name)
            if abbreviation in self._by_abbreviation:
                raise FormatError('duplicate abbreviation {!r}'
                                  ''.format(abbreviation),
                                  position=abbreviation)
            cat = Category(len(self.categories), name, abbreviation)
            self.categories.append(cat)
            self._by_name[name] = cat
            self._by_abbreviation[abbreviation] = cat

    def __len__(self):
        return len(self.categories)

    def __iter__(self):
        return iter(self.categories)

    def by_id(self, cat_id):
        try:
            return self.categories[cat_id]
        except (IndexError, TypeError):
            raise UnknownCategoryError('unknown category id {!r}'
                                       ''.format(cat_id))

    def by_name(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownCategoryError('unknown category {!r}'.format(name))

    def by_abbreviation(self, abbreviation):
        try:
            return self._by_abbreviation[abbreviation]
        except KeyError:
            raise UnknownCategoryError('unknown category abbreviation {!r}'
                                       ''.format(abbreviation))

    def resolve(self, label):
        """Look up an abbreviation first, then a canonical name."""
        cat = self._by_abbreviation.get(label) or self._by_name.get(label)
        if cat is None:
            raise UnknownCategoryError('unknown label {!r}'.format(label))
        return cat


def load_registry(path=None):
    path = path or DEFAULT_REGISTRY_PATH
    raw = _load_json(path, FormatError)
    try:
        data = registry_validator.check(raw)
    except t.DataError as e:
        raise FormatError('invalid category registry {}: {}'
                          ''.format(path, e.as_dict()),
                          position=trafaret_position(e))
    return CategoryRegistry(data['categories'])


def task_categories(names):
    """Local categories (ids 0..K-1) for the class list of one task."""
    return [Category(i, name, name) for i, name in enumerate(names)]
