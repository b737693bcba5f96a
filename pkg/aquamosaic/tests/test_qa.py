"""Test qa module.
Routines tested:
* select_river_tiles
* detect_anomalies, anomaly_scores
* correct, write_audit, write_review_crops
* screen_series
"""

import pytest
import numpy as np
from astropy import table
from aquamosaic import qa, mosaic, raster
from aquamosaic.raster import GridRef, WaterMask
from aquamosaic.mosaic import MosaicSeries, ProvenanceRaster, PercentRaster


def dates(n, start='2022-01-01', step=12):
    return np.datetime64(start) + step * np.arange(n)


def make_series(stack, ds=None):
    stack = np.asarray(stack, dtype='u1')
    if ds is None:
        ds = dates(len(stack))
    grid = GridRef(0, 0, 10, 10, stack.shape[2], stack.shape[1])
    masks = [WaterMask(s, grid, timestamp=d) for s, d in zip(stack, ds)]
    provs = [ProvenanceRaster(np.ones(grid.shape), grid, timestamp=d)
             for d in ds]
    return MosaicSeries(masks, provs, [['s']] * len(ds))


def test_select_river_tiles():
    occ = np.zeros((8, 12), dtype='f4')
    occ[:4, :4] = 50
    occ[0, 4:7] = 100
    occ[4:, 8:] = np.nan
    occ[4, 0:2] = 10
    tiles = qa.select_river_tiles(PercentRaster(occ, GridRef(0, 0, 1, 1, 12,
                                                             8)),
                                  tile_size=4, min_water=2)
    assert [t.tile_id for t in tiles] == ['r000c000', 'r000c001']
    assert tiles[1] == qa.TileRef('r000c001', 4, 0, 4, 4)

    # the default threshold scales with the tile area
    occ = np.zeros((64, 64), dtype='f4')
    occ.flat[:123] = 1
    g = GridRef(0, 0, 10, 10, 64, 64)
    assert len(qa.select_river_tiles(PercentRaster(occ, g), 64)) == 1
    occ.flat[122] = 0
    assert len(qa.select_river_tiles(PercentRaster(occ, g), 64)) == 0
    assert 500000 * 64 ** 2 / 4096 ** 2 == pytest.approx(122.07, abs=0.01)


def test_detect_examples():
    s = qa.TileWaterSeries('t', dates(10), [10000] * 10, 100000)
    assert qa.detect_anomalies(s) == []
    counts = [10000] * 10
    counts[6] = 2000
    s = qa.TileWaterSeries('t', dates(10), counts, 100000)
    flags = qa.detect_anomalies(s)
    assert len(flags) == 1
    assert flags[0].date == dates(10)[6]
    assert flags[0].score == pytest.approx(0.08)
    assert flags[0].action == 'flagged'
    assert qa.detect_anomalies(s, min_score=0.1) == []

    counts[2] = 500
    counts[3] = 900
    s = qa.TileWaterSeries('t', dates(10), counts, 100000)
    assert qa.detect_anomalies(s) == []
    assert len(qa.detect_anomalies(s, min_dry_dates=3)) == 3

    with pytest.raises(ValueError, match='3 dates'):
        qa.detect_anomalies(qa.TileWaterSeries('t', dates(2), [1, 2], 10))
    with pytest.raises(ValueError):
        qa.TileWaterSeries('t', dates(3), [1, 2, 11], 10)


def test_detect_topk_and_ties():
    counts = np.array([900, 500, 800, 500, 1000, 1000, 1000, 400, 1000, 990])
    s = qa.TileWaterSeries('t', dates(10), counts, 1000)
    flags = qa.detect_anomalies(s, k=3)
    assert len(flags) == 3
    ds = dates(10)
    # 400 first, then the two 500 deficits, earlier date first
    assert [f.date for f in flags] == [ds[7], ds[1], ds[3]]
    assert len(qa.detect_anomalies(s, k=20)) == 5


def test_scores_permutation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(50):
        counts = rng.integers(0, 1000, 12)
        perm = rng.permutation(12)
        a = qa.anomaly_scores(qa.TileWaterSeries('t', dates(12), counts,
                                                 1000))
        b = qa.anomaly_scores(qa.TileWaterSeries('t', dates(12),
                                                 counts[perm], 1000))
        assert np.allclose(a[perm], b)
        assert np.all(a >= 0)


def river_series():
    stack = np.zeros((5, 8, 16), dtype='u1')
    stack[:, 2:6, :] = 1
    return stack


def test_correct():
    stack = river_series()
    stack[2, 2:6, :8] = 0
    stack[3, 2:6, :8] = 0
    stack[3, 2:4, 8:] = 0
    series = make_series(stack)
    ds = series.dates
    tiles = [qa.TileRef('r000c000', 0, 0, 8, 8),
             qa.TileRef('r000c001', 8, 0, 8, 8)]
    flags = [qa.AnomalyFlag('r000c000', ds[2], 1.0),
             qa.AnomalyFlag('r000c000', ds[3], 1.0),
             qa.AnomalyFlag('r000c001', ds[0], 0.5)]
    out, done = qa.correct(series, flags, tiles, mode='auto')
    assert [f.action for f in done] == ['corrected', 'corrected', 'dismissed']
    assert done[0].replaced_from_date == ds[1]
    assert done[1].replaced_from_date == ds[1]
    fixed = out.stack()
    assert np.array_equal(fixed[2, :, :8], stack[1, :, :8])
    assert np.array_equal(fixed[3, :, :8], stack[1, :, :8])
    # unflagged tile-dates are untouched
    assert np.array_equal(fixed[3, :, 8:], stack[3, :, 8:])
    assert np.array_equal(fixed[[0, 1, 4]], stack[[0, 1, 4]])
    prov = out.provenance[2].data[0]
    assert np.all(prov[:, :8] == 255) and np.all(prov[:, 8:] == 1)

    same, reported = qa.correct(series, flags, tiles, mode='report-only')
    assert same is series
    assert all(f.action == 'flagged' for f in reported)
    with pytest.raises(ValueError):
        qa.correct(series, flags, tiles, mode='fix')
    with pytest.raises(ValueError):
        qa.correct(series, [qa.AnomalyFlag('r009c009', ds[1], 1.0)], tiles)


def test_audit_and_crops(tmp_path):
    series = make_series(river_series())
    ds = series.dates
    tiles = [qa.TileRef('r000c001', 8, 0, 8, 8)]
    flags = [qa.AnomalyFlag('r000c001', ds[2], 0.25, 'corrected', ds[1]),
             qa.AnomalyFlag('r000c001', ds[0], 0.125, 'dismissed')]
    qa.write_audit(flags, tmp_path / 'qa_audit.csv')
    audit = table.Table.read(tmp_path / 'qa_audit.csv', format='ascii.csv',
                             fill_values=[])
    assert audit.colnames == ['tile_id', 'date', 'score', 'action',
                              'replaced_from_date']
    assert str(audit['replaced_from_date'][0]) == '2022-01-13'
    assert list(audit['action']) == ['corrected', 'dismissed']
    written = qa.write_review_crops(series, flags, tiles, tmp_path / 'crops')
    assert len(written) == 2
    crop = raster.read_raster(written[0], kind=WaterMask)
    assert crop.grid == series.grid.subgrid(8, 0, 8, 8)
    assert crop.data.sum() == 32


def test_screen_series():
    stack = np.zeros((8, 16, 32), dtype='u1')
    stack[:, 4:12, :] = 1
    stack[:, 0, 0] = 255
    # cloud over the right tile on one date
    stack[5, 4:12, 20:30] = 0
    series = make_series(stack)
    occ = mosaic.occurrence(series)
    out, flags, tiles = qa.screen_series(series, occ, tile_size=16,
                                         min_water=10, k=2, min_score=0.05,
                                         workers=2)
    assert [t.tile_id for t in tiles] == ['r000c000', 'r000c001']
    assert len(flags) == 1
    assert flags[0].tile_id == 'r000c001'
    assert flags[0].date == series.dates[5]
    assert flags[0].action == 'corrected'
    clean = stack.copy()
    clean[5, 4:12, 20:30] = 1
    assert np.array_equal(out.stack(), clean)
    report, flags, _ = qa.screen_series(series, occ, tile_size=16,
                                        min_water=10, mode='report-only')
    assert report is series
    assert flags[0].action == 'flagged'
