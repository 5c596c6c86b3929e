import logging
import os
import sys
from configparser import ConfigParser
from functools import partial
from os import getcwd
from os.path import expanduser, isfile, join as path_join

import numpy as np
import trafaret as t

from retina_align.consts import Precision
from retina_align.exceptions import ConfigError

OptKey = partial(t.Key, optional=True)


CONFIG_FILENAME = 'retina_align.ini'
CONFIG_SECTION = 'retina_align'


config_validator = t.Dict({
    OptKey('seed'): t.ToInt,
    OptKey('precision'): t.Enum(*Precision.DTYPES),
    OptKey('threads'): t.ToInt(gte=1),
    OptKey('prompt_bank'): t.String,
    OptKey('registry'): t.String,
    OptKey('text_dim'): t.ToInt(gte=1),
    OptKey('text_seed'): t.ToInt,
    OptKey('stdout'): t.ToBool,
    OptKey('verbose'): t.ToBool,
}).allow_extra('*')


logger = logging.getLogger('main')
root_logger = logging.getLogger()


class UI(object):

    def __init__(self, loglevel, stdout, file_name_suffix='main'):
        self.loglevel = loglevel
        self.stdout = stdout
        self.file_name_suffix = file_name_suffix
        self._configure_logging(loglevel, stdout)

    def _configure_logging(self, level, stdout):
        """Configures logging for user and debug logging. """
        self.root_logger_filename = self.get_file_name(self.file_name_suffix)
        if isfile(self.root_logger_filename):
            os.unlink(self.root_logger_filename)

        # user logger
        fs = '%(processName)s [%(levelname)s] %(message)s'
        if stdout:
            hdlr = logging.StreamHandler(sys.stdout)
        else:
            hdlr = logging.StreamHandler()
        hdlr.setFormatter(logging.Formatter(fs))
        logger.setLevel(level)
        logger.addHandler(hdlr)

        # root logger
        if not stdout:
            fs = '%(processName)s %(asctime)-15s [%(levelname)s] %(message)s'
            hdlr = logging.FileHandler(self.root_logger_filename, 'w+')
            hdlr.setFormatter(logging.Formatter(fs))
            root_logger.setLevel(logging.DEBUG)
            root_logger.addHandler(hdlr)

    def debug(self, msg):
        logger.debug(msg)

    def info(self, msg):
        logger.info(msg)

    def warning(self, msg):
        logger.warning(msg)

    def error(self, msg):
        exc_info = sys.exc_info()[0] is not None
        if self.stdout:
            logger.error(msg, exc_info=exc_info)
        else:
            logger.error(msg)
            root_logger.error(msg, exc_info=exc_info)

    def fatal(self, msg, exit_code=1):
        exc_info = sys.exc_info()
        if self.stdout:
            logger.error(msg, exc_info=exc_info)
        else:
            msg = ('{}\nThe full log is available in:\n\t{}'
                   ''.format(msg, self.root_logger_filename))
            logger.error(msg)
            root_logger.error(msg, exc_info=exc_info)
        self.close()
        sys.exit(exit_code)

    def close(self):
        for l in [logger, root_logger]:
            handlers = l.handlers[:]
            for h in handlers:
                if hasattr(h, 'close'):
                    h.close()
                l.removeHandler(h)

    def get_file_name(self, suffix):
        return os.path.join(os.getcwd(), 'retina_align_{}.log'
                                         ''.format(suffix))

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()


def get_config_file():
    """
    Lookup for config file at user home directory or working directory.
    Returns
    -------
    str or None
        Path to config file or None if it not exists.
    """
    home_path = path_join(expanduser('~'), CONFIG_FILENAME)
    cwd_path = path_join(getcwd(), CONFIG_FILENAME)
    if isfile(cwd_path):
        return cwd_path
    elif isfile(home_path):
        return home_path
    return None


def read_config_section(file_path, section):
    """Raw ``{key: str}`` items of one ini section, ``{}`` if absent."""
    config = ConfigParser()
    config.read(file_path)
    if section not in config.sections():
        return {}
    return dict(config.items(section))


def parse_config_file(file_path):
    parsed_dict = read_config_section(file_path, CONFIG_SECTION)
    return validate(config_validator, parsed_dict, file_path)


def validate(validator, data, source):
    """Run a trafaret validator, turning its errors into ConfigError."""
    try:
        return validator.check(data)
    except t.DataError as e:
        raise ConfigError('invalid configuration in {}: {}'
                          ''.format(source, e.as_dict()))


def float_dtype(precision):
    try:
        return np.dtype(Precision.DTYPES[precision])
    except KeyError:
        raise ConfigError('unknown precision {!r}'.format(precision))


def make_rng(seed, *stream):
    """Independent, reproducible random stream for ``(seed, *stream)``."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF] +
                                 [int(s) for s in stream])
