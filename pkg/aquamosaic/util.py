"""Miscellaneous utility routines.
"""

import numpy as np
from astropy.time import Time

from . import log

__all__ = ["to_dates",
           "date_strings",
           "years",
           "merge_dicts",
           "log_record",
           "format_record",
]


def to_dates(values):
    """Convert dates in any of the usual forms to numpy day precision.

    Parameters
    ----------
    values : str, list[str], astropy.time.Time, np.datetime64 or array
        ISO-8601 strings, Time objects, or datetime64 values.

    Returns
    -------
    dates : np.ndarray[datetime64[D]] or np.datetime64
        Dates truncated to days.  Scalars in, scalar out.
    """
    scalar = np.ndim(values) == 0
    if isinstance(values, Time):
        scalar = values.isscalar
        out = values.datetime64
    elif isinstance(values, np.ndarray) and values.dtype.kind == 'M':
        out = values
    elif isinstance(values, np.datetime64):
        out = values
    else:
        arr = np.atleast_1d(np.asarray(values, dtype=str))
        if len(arr) == 0:
            return np.zeros(0, dtype='datetime64[D]')
        out = Time(arr).datetime64
    out = np.asarray(out).astype('datetime64[D]')
    if scalar:
        return out.reshape(-1)[0]
    return out


def date_strings(dates):
    """Format dates as ISO-8601 day strings.

    Parameters
    ----------
    dates : array_like[datetime64]
        dates to format

    Returns
    -------
    list[str]
        'YYYY-MM-DD' strings
    """
    return [str(d) for d in np.asarray(dates).astype('datetime64[D]')]


def years(dates):
    """Calendar years of dates.

    Parameters
    ----------
    dates : array_like[datetime64]

    Returns
    -------
    np.ndarray[int]
        calendar year of each date
    """
    dates = np.asarray(dates).astype('datetime64[Y]')
    return dates.astype('i8') + 1970


def merge_dicts(a, b):
    """Merge two dictionaries, replacing values in a with values in b.

    When both a & b have overlapping dictionaries, this recursively
    merges their contents.  If a key does not correspond to a dictionary
    in both a & b, then the content of a is overwritten with the content
    of b.

    Parameters
    ----------
    a : dict
        Dictionary to update

    b : dict
        Dictionary to use to update a.

    Returns
    -------
    a : dict
        a, mutated to contain keys from b.
    """
    for key in b:
        if key in a and isinstance(a[key], dict) and isinstance(b[key], dict):
            merge_dicts(a[key], b[key])
        else:
            a[key] = b[key]
    return a


def format_record(stage, /, **fields):
    """Format a machine-parsable ``stage key=value ...`` record.

    Floats are written with six significant digits; strings containing
    spaces are quoted.
    """
    parts = [str(stage)]
    for key, value in fields.items():
        if isinstance(value, (float, np.floating)):
            value = f'{value:.6g}'
        else:
            value = str(value)
            if ' ' in value:
                value = '"' + value + '"'
        parts.append(f'{key}={value}')
    return ' '.join(parts)


def log_record(stage, /, level='info', **fields):
    """Log a ``stage key=value ...`` record on the package logger.

    Parameters
    ----------
    stage : str
        stage or component name leading the record
    level : str
        logging method to use ('info', 'warning', ...)
    **fields
        key=value pairs to append, in order
    """
    getattr(log, level)(format_record(stage, **fields))
