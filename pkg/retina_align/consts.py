import collections
import math

Category = collections.namedtuple('Category', 'id name abbreviation')
TripletRecord = collections.namedtuple(
    'TripletRecord', 'sample_id image_feature_index label raw_text')

NAIVE_TEMPLATE = 'A fundus photograph of [CLS]'
CLS_TOKEN = '[CLS]'

ANOMALY_PROMPTS = ('normal', 'disease')
NORMAL_CATEGORY = 'normal'

EMBEDDING_MAGIC = b'EMB1'
EMBEDDING_HEADER_SIZE = 16

MODEL_FORMAT = 'retina_align.model'
ADAPTER_FORMAT = 'retina_align.adapter'
FILE_FORMAT_VERSION = 1

DEFAULT_LOG_TAU = math.log(1 / 0.07)
MAX_LOG_TAU = math.log(1000.0)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class PromptMode(object):
    NAIVE = 'naive'
    EK = 'ek'
    ANOMALY = 'anomaly'

    ALL = (NAIVE, EK, ANOMALY)


class FeatureChoice(object):
    VISION = 'vision'
    PROJECTED = 'projected'
    PROJECTED_NORMALIZED = 'projected_normalized'

    ALL = (VISION, PROJECTED, PROJECTED_NORMALIZED)
    # CLI spellings
    FLAGS = {'vision': VISION, 'proj': PROJECTED,
             'proj-norm': PROJECTED_NORMALIZED}


class Method(object):
    ZERO_SHOT = 'zero-shot'
    LINEAR_PROBE = 'lp'
    CLIP_ADAPTER = 'clip-adapter'
    TIP_ADAPTER = 'tip-adapter'
    TIP_ADAPTER_F = 'tip-adapter-f'

    ADAPTERS = (LINEAR_PROBE, CLIP_ADAPTER, TIP_ADAPTER, TIP_ADAPTER_F)
    ALL = (ZERO_SHOT,) + ADAPTERS


class TaskType(object):
    MULTICLASS = 'multiclass'
    ORDINAL = 'ordinal'
    BINARY = 'binary'
    ANOMALY = 'anomaly'

    ALL = (MULTICLASS, ORDINAL, BINARY, ANOMALY)


class Precision(object):
    F32 = 'f32'
    F64 = 'f64'

    DTYPES = {F32: 'float32', F64: 'float64'}
