"""Deterministic bag-of-tokens text features.

Stand-in for an external text encoder: every token seeds its own
pseudo-random unit vector, a text is the normalized sum of its token
vectors. Real encoder features plug in through embedding files instead.
"""
import hashlib
import re
import struct

import numpy as np

from retina_align.exceptions import ConfigError, DataError, NumericalError

TOKEN_RE = re.compile(r'[^\W_]+', re.UNICODE)


class EmptyTextError(DataError):
    pass


def tokenize(text):
    return TOKEN_RE.findall(text.lower())


def token_seed(token, seed):
    """Stable 64-bit hash of ``token`` keyed by ``seed``."""
    key = struct.pack('<Q', int(seed) & 0xFFFFFFFFFFFFFFFF)
    digest = hashlib.blake2b(token.encode('utf-8'), digest_size=8,
                             key=key).digest()
    return struct.unpack('<Q', digest)[0]


def token_vector(token, dim, seed):
    vec = np.random.default_rng(token_seed(token, seed)).standard_normal(dim)
    return vec / np.linalg.norm(vec)


def surrogate_text_featurizer(text, dim, seed):
    if dim < 1:
        raise ConfigError('dim must be >= 1, got {}'.format(dim))
    tokens = tokenize(text)
    if not tokens:
        raise EmptyTextError('no featurizable content in {!r}'.format(text))
    total = np.zeros(dim)
    for token in tokens:
        total += token_vector(token, dim, seed)
    norm = np.linalg.norm(total)
    if not norm > 0:
        raise NumericalError('token vectors of {!r} cancel out'.format(text))
    return total / norm


class SurrogateTextFeaturizer(object):
    """Callable ``text -> FeatureVector`` with a per-prompt cache."""

    def __init__(self, dim, seed=0):
        self.dim = int(dim)
        self.seed = int(seed)
        self._cache = {}

    def __call__(self, text):
        vec = self._cache.get(text)
        if vec is None:
            vec = surrogate_text_featurizer(text, self.dim, self.seed)
            vec.setflags(write=False)
            self._cache[text] = vec
        return vec

    def featurize_all(self, texts):
        return np.stack([self(text) for text in texts])

    def settings(self):
        return {'kind': 'surrogate', 'dim': self.dim, 'seed': self.seed}
