"""Test pipeline module.
Routines tested:
* load_config, check_config
* exit_code
* series_grid
* compare_series
* run_predict (weights/config agreement)
* execute, run_pipeline (stages, skipping, run record, exit codes)
"""

import os
import pytest
import numpy as np
import asdf
import yaml
from astropy import table
from aquamosaic import pipeline, synthetic, mosaic, parameters, raster, unet
from aquamosaic.raster import GridRef, WaterMask, ClassRaster


@pytest.fixture(scope='module')
def basin(tmp_path_factory):
    outdir = str(tmp_path_factory.mktemp('basin'))
    return synthetic.gen_synthetic_basin(outdir, seed=1, n_dates=8, size=64,
                                         n_train=1)


def write_config(path, **values):
    with open(path, 'w') as fp:
        yaml.safe_dump(values, fp)
    return str(path)


def test_load_config_defaults_and_paths(tmp_path):
    config = pipeline.load_config()
    assert config == parameters.default_pipeline_config
    assert config is not parameters.default_pipeline_config

    fn = write_config(tmp_path / 'c.yaml', manifest='m.csv',
                      output_dir='/abs/out', cadence_days=6)
    config = pipeline.load_config(fn, dict(workers=3, seed=None))
    assert config['manifest'] == str(tmp_path / 'm.csv')
    assert config['output_dir'] == '/abs/out'
    assert config['cadence_days'] == 6
    assert config['workers'] == 3
    assert config['seed'] == 0


def test_load_config_demo(basin):
    config = pipeline.load_config(basin.config)
    assert config['manifest'] == basin.manifest
    assert config['weights'] == os.path.join(basin.outdir, 'output',
                                             'weights.aqmw')
    assert config['unet_depth'] == 2


@pytest.mark.parametrize('values, match', [
    (dict(tile_size_px=64, border_px=32), 'border_px'),
    (dict(tile_size_px=100, border_px=10), '2\\*\\*unet_depth'),
    (dict(unet_depth=2, unet_input_px=30, train_crop_px=60), 'unet_input_px'),
    (dict(unet_depth=2, unet_input_px=32, train_crop_px=48), 'train_crop_px'),
    (dict(cadence_days=0), 'cadence_days'),
    (dict(qa_mode='fix'), 'qa_mode'),
    (dict(epoch_start='1 Jan 2022'), 'epoch_start'),
    (dict(bogus=1), 'bogus'),
    (dict(manifest='a.csv', gauge='a.csv'), 'distinct'),
])
def test_check_config_rejects(tmp_path, values, match):
    fn = write_config(tmp_path / 'c.yaml', **values)
    with pytest.raises(pipeline.ConfigError, match=match):
        pipeline.load_config(fn)


def test_load_config_file_errors(tmp_path):
    with pytest.raises(pipeline.ConfigError, match='not found'):
        pipeline.load_config(tmp_path / 'missing.yaml')
    fn = tmp_path / 'list.yaml'
    fn.write_text('- 1\n- 2\n')
    with pytest.raises(pipeline.ConfigError, match='mapping'):
        pipeline.load_config(fn)
    empty = tmp_path / 'empty.yaml'
    empty.write_text('')
    assert pipeline.load_config(empty)['cadence_days'] == 12


def test_exit_code():
    codes = parameters.exit_codes
    assert pipeline.exit_code(pipeline.ConfigError('x')) == codes['config']
    assert pipeline.exit_code(pipeline.DataError('x')) == codes['data']
    assert pipeline.exit_code(FileNotFoundError('x')) == codes['data']
    assert pipeline.exit_code(raster.ChecksumError('x')) == codes['data']
    assert pipeline.exit_code(
        unet.WeightsChecksumError('x')) == codes['data']
    err = pipeline.StageError('qa', 'boom')
    assert err.stage == 'qa'
    assert str(err) == 'qa: boom'
    assert pipeline.exit_code(err) == codes['stage']


def test_series_grid(tmp_path):
    full = GridRef(1000, 2000, 10, 10, 50, 40, 'EPSG:32720')
    rows = []
    for i, (x0, y0, w, h) in enumerate([(0, 0, 30, 40), (20, 5, 30, 35)]):
        fn = str(tmp_path / f's{i}.aqmr')
        data = np.full((2, h, w), 100, dtype='u1')
        raster.write_raster(raster.BackscatterRaster(
            data, full.subgrid(x0, y0, w, h)), fn)
        rows.append((f's{i}', 'A', '2022-01-0' + str(i + 1), fn))
    table.Table(rows=rows, names=('scene_id', 'orbit_id', 'date', 'path')
                ).write(tmp_path / 'm.csv', format='ascii.csv')
    manifest = mosaic.read_manifest(tmp_path / 'm.csv')
    assert pipeline.series_grid(manifest) == full


def small_series():
    grid = GridRef(0, 0, 10, 10, 4, 2)
    ds = np.datetime64('2022-01-01') + 12 * np.arange(3)
    preds = [np.array([[1, 1, 0, 0], [1, 0, 0, 255]]),
             np.array([[1, 1, 1, 1], [0, 0, 0, 0]]),
             np.array([[0, 0, 0, 0], [0, 0, 0, 0]])]
    masks = [WaterMask(p, grid, timestamp=d) for p, d in zip(preds, ds)]
    provs = [mosaic.ProvenanceRaster(np.ones(grid.shape), grid, timestamp=d)
             for d in ds]
    return mosaic.MosaicSeries(masks, provs, [['s']] * 3), grid


def test_compare_series():
    series, grid = small_series()
    ref = WaterMask(np.array([[1, 0, 1, 0], [1, 1, 0, 0]]), grid)
    refs = {'2022-01-01': ref, '2022-01-13': ref, '2023-01-01': ref}
    classes = ClassRaster(np.array([[1, 1, 2, 2], [1, 1, 2, 0]]), grid)
    counts, tabs = pipeline.compare_series(series, refs, classes=classes)
    assert sorted(counts) == ['2022-01-01', '2022-01-13', 'all']
    c = counts['2022-01-01']
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 2, 2)
    c = counts['2022-01-13']
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 2, 2, 2)
    assert counts['all'].total == 15
    assert list(tabs['water']['count']) == [5, 2]
    assert list(tabs['false_negative']['count']) == [3, 1]
    assert np.allclose(tabs['false_negative']['percent'], [75, 25])

    counts, tabs = pipeline.compare_series(series, refs, factor=2)
    assert tabs == {}
    # 2x2 blocks under the majority rule
    c = counts['2022-01-01']
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 0, 0, 1)

    with pytest.raises(pipeline.DataError):
        pipeline.compare_series(series, {'2021-01-01': ref})
    coarse = WaterMask(np.zeros((1, 1)), grid.coarsened(4))
    with pytest.raises(pipeline.DataError, match='grid'):
        pipeline.compare_series(series, {'2022-01-01': coarse})


def test_run_pipeline(basin, tmp_path):
    out = tmp_path / 'out'
    config = pipeline.load_config(basin.config,
                                  dict(output_dir=str(out), train_epochs=2,
                                       weights=str(tmp_path / 'w.aqmw')))
    statuses = pipeline.execute(config)
    assert statuses == dict(shade='done', train='done', predict='done',
                            qa='done', stats='done', compare='done')
    for name in ('shade.aqmr', 'history.csv', 'predicted/occurrence.aqmr',
                 'mosaics/occurrence.aqmr', 'mosaics/recurrence.aqmr',
                 'qa/qa_audit.csv', 'stats/area_series.csv',
                 'stats/area_summary.csv', 'stats/occurrence_summary.csv',
                 'report/metrics.csv', 'report/crosstab_water.csv',
                 'report/crosstab_false_negative.csv', 'run_record.asdf'):
        assert os.path.exists(out / name), name
    assert os.path.exists(tmp_path / 'w.aqmw')
    metrics = table.Table.read(out / 'report' / 'metrics.csv',
                               format='ascii.csv')
    assert metrics['name'][-1] == 'all'
    assert len(metrics) == 5
    series = mosaic.read_series(out / 'mosaics')
    assert len(series.masks) == 4
    with asdf.open(out / 'run_record.asdf') as af:
        record = af.tree['aquamosaic']
        assert record['stages']['train'] == 'done'
        assert 'report/metrics.csv' in record['artifacts']
        assert len(record['history']['epoch']) == 2
    with open(out / 'report' / 'metrics.csv', 'rb') as fp:
        before = fp.read()

    assert pipeline.run_pipeline(config) == 0
    with asdf.open(out / 'run_record.asdf') as af:
        stages = af.tree['aquamosaic']['stages']
        assert set(stages.values()) == {'skipped'}
    with open(out / 'report' / 'metrics.csv', 'rb') as fp:
        assert fp.read() == before


def test_run_pipeline_failures(basin, tmp_path, monkeypatch):
    config = pipeline.load_config(basin.config,
                                  dict(output_dir=str(tmp_path / 'out'),
                                       weights=str(tmp_path / 'none.aqmw')))
    config['pairs'] = None
    config['dem'] = None
    with pytest.raises(pipeline.DataError, match='weights not found') as exc:
        pipeline.execute(config)
    assert exc.value.stage == 'train'
    assert pipeline.run_pipeline(config) == parameters.exit_codes['data']

    bad = dict(config, gauge=str(tmp_path / 'nope.csv'))
    assert pipeline.run_pipeline(bad) == parameters.exit_codes['data']
    assert pipeline.run_pipeline(
        dict(config, output_dir=None)) == parameters.exit_codes['config']

    def broken(*args, **kw):
        raise RuntimeError('disk full')

    config = pipeline.load_config(basin.config,
                                  dict(output_dir=str(tmp_path / 'out2'),
                                       train_epochs=1,
                                       weights=str(tmp_path / 'w.aqmw')))
    monkeypatch.setattr(pipeline, 'run_qa', broken)
    with pytest.raises(pipeline.StageError) as exc:
        pipeline.execute(config)
    assert exc.value.stage == 'qa'
    assert pipeline.run_pipeline(config) == parameters.exit_codes['stage']
    assert not os.path.exists(tmp_path / 'out2' / 'qa' / 'qa_audit.csv')


def test_predict_rejects_stale_weights(basin, tmp_path):
    config = pipeline.load_config(basin.config,
                                  dict(output_dir=str(tmp_path / 'out'),
                                       weights=str(tmp_path / 'w.aqmw')))
    assert config['unet_depth'] == 2
    stale = unet.UNetModel(unet.UNetConfig(
        depth=1, base_filters=config['unet_base_filters'],
        input_size=config['unet_input_px']))
    unet.save_weights(stale, config['weights'])
    with pytest.raises(pipeline.DataError, match='configured network'):
        pipeline.run_predict(config['manifest'], config['weights'],
                             str(tmp_path / 'p'), config)
    # the train stage is skipped since the weights exist
    with pytest.raises(pipeline.DataError) as exc:
        pipeline.execute(config)
    assert exc.value.stage == 'predict'
    assert pipeline.run_pipeline(config) == parameters.exit_codes['data']
