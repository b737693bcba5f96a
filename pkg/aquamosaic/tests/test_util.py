"""
Unit tests for utility functions.
"""

import logging
import numpy as np
from astropy.time import Time
from aquamosaic import util


def test_to_dates():
    d = util.to_dates('2022-07-09')
    assert d == np.datetime64('2022-07-09')
    assert np.ndim(d) == 0
    ds = util.to_dates(['2022-07-09', '2023-01-01T13:00:00'])
    assert ds.dtype == np.dtype('datetime64[D]')
    assert ds[1] == np.datetime64('2023-01-01')
    assert util.to_dates(Time('2022-02-03')) == np.datetime64('2022-02-03')
    arr = np.array(['2022-01-01T10'], dtype='datetime64[h]')
    assert util.to_dates(arr)[0] == np.datetime64('2022-01-01')
    assert len(util.to_dates([])) == 0


def test_date_strings_and_years():
    ds = util.to_dates(['2021-12-31', '2022-01-01'])
    assert util.date_strings(ds) == ['2021-12-31', '2022-01-01']
    assert list(util.years(ds)) == [2021, 2022]


def test_merge_dicts():
    a = dict(x=1, sub=dict(y=2, z=3))
    out = util.merge_dicts(a, dict(x=5, sub=dict(z=4), w=None))
    assert out is a
    assert a == dict(x=5, sub=dict(y=2, z=4), w=None)


def test_log_record(caplog):
    assert (util.format_record('predict', scene_id='S1A_1', seconds=1.23456789,
                               note='two words', n=3)
            == 'predict scene_id=S1A_1 seconds=1.23457 note="two words" n=3')
    with caplog.at_level(logging.INFO, logger='aquamosaic'):
        util.log_record('qa', level='warning', flagged=2)
    assert caplog.records[-1].levelname == 'WARNING'
    assert caplog.records[-1].getMessage() == 'qa flagged=2'
