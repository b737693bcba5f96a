"""Test analytics module.
Routines tested:
* confusion, prf
* crosstab
* pixels_to_km2, area_series
* align_gauge, correlate
* write_metrics
"""

import pytest
import numpy as np
from astropy import table
from aquamosaic import analytics
from aquamosaic.analytics import ConfusionCounts
from aquamosaic.raster import GridRef, WaterMask, ClassRaster


def test_prf_values():
    # recall 0.9266, precision 0.9344
    c = ConfusionCounts(tp=935 * 926, fp=926 * 65, fn=935 * 74, tn=0)
    p, r, f1 = analytics.prf(c)
    assert np.isclose(p, 935 / 1000)
    assert np.isclose(r, 926 / 1000)
    assert round(f1, 3) == 0.930
    c = ConfusionCounts(tp=708 * 708, fp=708 * 292, fn=708 * 292)
    assert round(analytics.prf(c)[2], 3) == 0.708
    c = ConfusionCounts(tp=5, fp=0, fn=0, tn=10)
    assert analytics.prf(c) == (1.0, 1.0, 1.0)
    assert c.accuracy == 1


def test_prf_degenerate():
    with pytest.raises(ValueError, match='tp \\+ fp'):
        analytics.prf(ConfusionCounts(tp=0, fp=0, fn=3, tn=1))
    with pytest.raises(ValueError, match='tp \\+ fn'):
        analytics.prf(ConfusionCounts(tp=0, fp=3, fn=0, tn=1))
    p, r, f1 = analytics.prf(ConfusionCounts(tp=0, fp=2, fn=2),
                             zero_division=0)
    assert (p, r, f1) == (0, 0, 0)
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1)
    with pytest.raises(ValueError):
        ConfusionCounts().accuracy


def test_confusion():
    g = GridRef(0, 0, 10, 10, 4, 2)
    pred = WaterMask(np.array([[1, 1, 0, 0], [255, 1, 0, 1]]), g)
    ref = WaterMask(np.array([[1, 0, 1, 0], [1, 255, 0, 0]]), g)
    c = analytics.confusion(pred, ref)
    assert c == ConfusionCounts(tp=1, fp=2, fn=1, tn=2)
    assert analytics.confusion(ref, pred) == c.swapped()
    p, r, _ = analytics.prf(c)
    p2, r2, _ = analytics.prf(c.swapped())
    assert (p, r) == (r2, p2)
    other = WaterMask(ref.data, GridRef(10, 0, 10, 10, 4, 2))
    with pytest.raises(ValueError):
        analytics.confusion(pred, other)

    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.integers(0, 2, (30, 30)).astype(bool)
        b = rng.integers(0, 2, (30, 30)).astype(bool)
        c = analytics.confusion_arrays(a, b)
        assert c.total == a.size
        halves = (analytics.confusion_arrays(a[:15], b[:15])
                  + analytics.confusion_arrays(a[15:], b[15:]))
        assert halves == c


def test_crosstab(tmp_path):
    g = GridRef(0, 0, 30, 30, 3, 2)
    classes = ClassRaster(np.array([[1, 2, 2], [3, 0, 1]]), g)
    selection = np.array([[True, True, True], [False, True, True]])
    tab = analytics.crosstab(selection, classes)
    assert list(tab['code']) == [1, 2, 3]
    assert list(tab['count']) == [2, 2, 0]
    assert np.allclose(tab['percent'], [50, 50, 0])

    labels = table.Table()
    labels['code'] = [3, 2, 1, 4]
    labels['label_low_water'] = ['grass', 'forest', 'sand', 'rock']
    labels['label_high_water'] = ['flooded grass', 'flooded forest',
                                  'water', 'rock']
    fn = tmp_path / 'labels.csv'
    labels.write(fn, format='ascii.csv')
    labels = analytics.read_class_labels(fn)
    mask = WaterMask(selection.astype('u1'), g)
    tab = analytics.crosstab(mask, classes, labels)
    assert list(tab['code']) == [3, 2, 1, 4]
    assert list(tab['count']) == [0, 2, 2, 0]
    assert tab['label_high_water'][2] == 'water'
    assert np.isclose(tab['percent'].sum(), 100)

    empty = analytics.crosstab(np.zeros((2, 3), dtype=bool), classes)
    assert np.all(empty['percent'] == 0)

    bad = table.Table()
    bad['code'] = [1]
    bad.write(tmp_path / 'bad.csv', format='ascii.csv')
    with pytest.raises(ValueError, match='columns'):
        analytics.read_class_labels(tmp_path / 'bad.csv')

    wide = table.Table()
    wide['code'] = [1, 300]
    wide['label_low_water'] = ['sand', 'x']
    wide['label_high_water'] = ['water', 'x']
    with pytest.raises(ValueError, match='out of range'):
        analytics.crosstab(selection, classes, wide)


def test_areas():
    assert np.isclose(analytics.pixels_to_km2(24761019, 30), 22284.9,
                      atol=0.1)
    assert analytics.pixels_to_km2(100, 10, 20) == 0.02

    dates = ['2022-03-01', '2022-01-01', '2022-02-01']
    areas = analytics.AreaSeries(dates, [140363000, 95599000, 120000000],
                                 100.0)
    assert areas.dates[0] == np.datetime64('2022-01-01')
    assert round(areas.min_max_ratio_pct, 1) == 68.1
    assert areas.date_of_min == np.datetime64('2022-01-01')
    assert areas.date_of_max == np.datetime64('2022-03-01')
    assert np.isclose(areas.max_km2, 14036.3)
    assert np.isclose(areas.min_median_ratio_pct, 100 * 95599 / 120000)
    assert np.isclose(areas.percent_of_max[-1], 100)
    summary = areas.summary()
    assert summary['date_of_min'] == '2022-01-01'
    assert areas.to_table().colnames == ['date', 'water_px', 'area_km2',
                                         'percent_of_max']


def test_area_series():
    g = GridRef(0, 0, 10, 10, 4, 4)
    masks = []
    for i, day in enumerate(['2022-01-01', '2022-01-13', '2022-01-25']):
        data = np.zeros((4, 4), dtype='u1')
        data[:i + 1] = 1
        data[3, 3] = 255
        masks.append(WaterMask(data, g, timestamp=day))
    areas = analytics.area_series(masks)
    assert list(areas.water_px) == [4, 8, 12]
    assert np.allclose(areas.area_km2, [4e-4, 8e-4, 12e-4])
    region = np.zeros((4, 4), dtype=bool)
    region[:, :2] = True
    assert list(analytics.area_series(masks, region).water_px) == [2, 4, 6]
    with pytest.raises(ValueError):
        analytics.area_series([])
    moved = WaterMask(masks[0].data, GridRef(10, 0, 10, 10, 4, 4),
                      timestamp='2022-02-06')
    with pytest.raises(ValueError):
        analytics.area_series(masks + [moved])


def test_align_gauge():
    gauge = analytics.GaugeSeries(['2022-01-01', '2022-01-11', '2022-02-01'],
                                  [1.0, 2.0, 3.0])
    index = analytics.align_gauge(
        gauge, ['2022-01-02', '2022-01-06', '2022-01-20', '2022-01-28'],
        window_days=6)
    # 01-06 is 5 days from both neighbours: the earlier wins
    assert list(index) == [0, 0, -1, 2]
    with pytest.raises(ValueError):
        analytics.GaugeSeries(['2022-01-02', '2022-01-01'], [1, 2])
    with pytest.raises(ValueError, match='empty'):
        analytics.align_gauge(analytics.GaugeSeries([], []), ['2022-01-02'])


def test_correlate(tmp_path):
    dates = np.datetime64('2022-01-01') + 12 * np.arange(10)
    level = np.linspace(1, 5, 10)
    gauge = analytics.GaugeSeries(dates + 1, level)
    fn = tmp_path / 'gauge.csv'
    analytics.write_gauge(gauge, fn)
    gauge = analytics.read_gauge(fn)
    areas = analytics.AreaSeries(dates, 1000 + 200 * np.arange(10), 100.0)
    corr = analytics.correlate(gauge, areas)
    assert np.isclose(corr.r, 1.0)
    assert corr.n_pairs == 10
    areas = analytics.AreaSeries(dates, 5000 - 200 * np.arange(10), 100.0)
    assert np.isclose(analytics.correlate(gauge, areas).r, -1.0)

    rng = np.random.default_rng(0)
    px = rng.integers(1000, 5000, 10)
    areas = analytics.AreaSeries(dates, px, 100.0)
    corr = analytics.correlate(gauge, areas)
    x = level
    y = px * 100.0 / 1e6
    cov = np.mean((x - x.mean()) * (y - y.mean()))
    expected = cov / (x.std() * y.std())
    assert abs(corr.r - expected) < 1e-12
    analytics.write_plot_data(tmp_path / 'plot.csv', corr)
    back = table.Table.read(tmp_path / 'plot.csv', format='ascii.csv')
    assert back.colnames == ['date', 'level_m', 'area_km2']

    far = analytics.GaugeSeries(dates[:2] + 1, [1, 2])
    with pytest.raises(ValueError, match='at least 3'):
        analytics.correlate(far, areas)


def test_write_metrics(tmp_path):
    rows = {'sar': ConfusionCounts(8, 2, 1, 9),
            'empty': ConfusionCounts(0, 0, 0, 0)}
    out = analytics.write_metrics(tmp_path / 'metrics.csv', rows)
    back = table.Table.read(tmp_path / 'metrics.csv', format='ascii.csv')
    assert list(back['name']) == ['sar', 'empty']
    assert np.isclose(back['precision'][0], 0.8)
    assert np.isclose(back['accuracy'][0], 17 / 20)
    assert np.isnan(out['f1'][1])
