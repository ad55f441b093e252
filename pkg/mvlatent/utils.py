#!/usr/bin/env python3

import coloredlogs
import json
import logging
import os
import sys
from pygments import highlight, lexers, formatters

log_level = None
_loggers = set()

THREADS_ENV = 'MVLATENT_THREADS'


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f'{key}: {message}' if key else message)


def get_logger(name=__name__, verbosity=None):
    '''
    Colored logging. The first verbosity given also re-levels loggers created before it.

    :param name: logger name (use __name__ variable)
    :param verbosity: level name, accepted once per process
    :return: Logger
    '''
    global log_level
    if verbosity is not None:
        if log_level is None:
            log_level = verbosity
        else:
            raise RuntimeError('Verbosity has already been set.')
        # loggers created at import time pick up the new level
        for earlier in sorted(_loggers - {name}):
            get_logger(earlier)

    _loggers.add(name)
    shortname = name.replace('mvlatent.', '')
    logger = logging.getLogger(shortname)

    # no logging of libs
    logger.propagate = False

    if log_level == 'debug':
        fmt = '%(asctime)s %(name)-13s %(levelname)-8s %(message)s'
        datefmt = '%Y-%m-%d %H:%M:%S%z'
    else:
        fmt = '%(asctime)s %(message)s'
        datefmt = '%H:%M:%S'

    fs = {
        'asctime': {'color': 'green'},
        'hostname': {'color': 'magenta'},
        'levelname': {'color': 'red', 'bold': True},
        'name': {'color': 'magenta'},
        'programname': {'color': 'cyan'},
        'username': {'color': 'yellow'},
    }

    ls = {
        'critical': {'color': 'red', 'bold': True},
        'debug': {'color': 'green'},
        'error': {'color': 'red'},
        'info': {},
        'notice': {'color': 'magenta'},
        'spam': {'color': 'green', 'faint': True},
        'success': {'color': 'green', 'bold': True},
        'verbose': {'color': 'blue'},
        'warning': {'color': 'yellow'},
    }

    coloredlogs.install(level=log_level, logger=logger, fmt=fmt, datefmt=datefmt, level_styles=ls, field_styles=fs)

    return logger


def format_json(document):
    '''
    Pretty JSON, colored when stdout is a terminal
    '''
    formatted_json = json.dumps(document, indent=2, sort_keys=True)
    if sys.stdout.isatty():
        return highlight(formatted_json, lexers.JsonLexer(), formatters.TerminalFormatter())
    return formatted_json


def write_json(path, document):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write('\n')


def worker_count(limit=None):
    '''
    Number of worker threads, capped by the MVLATENT_THREADS environment variable
    '''
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            workers = int(env)
        except ValueError:
            raise ValueError(f'{THREADS_ENV} must be an integer, got {env!r}')
    else:
        workers = os.cpu_count() or 1
    workers = max(1, workers)
    if limit is not None:
        workers = max(1, min(workers, limit))
    return workers


def format_value(value):
    '''CSV cell: shortest round-trip repr for floats, empty for None'''
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def chunk_ranges(n, chunks):
    '''
    Split range(n) into at most `chunks` contiguous (start, stop) pairs
    '''
    chunks = max(1, min(chunks, n))
    bounds = [round(i * n / chunks) for i in range(chunks + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(chunks) if bounds[i] < bounds[i + 1]]
