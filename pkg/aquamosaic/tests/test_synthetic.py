"""Test synthetic module.
Routines tested:
* gen_synthetic_basin
* naive_water_mask
* water_level, truth_mask, shadow_mask
"""

import glob
import os
import pytest
import numpy as np
import yaml
from astropy import table
from aquamosaic import synthetic, analytics, shade, train, raster
from aquamosaic.raster import BackscatterRaster, WaterMask, DemRaster

N_DATES = 24
SIZE = 64


@pytest.fixture(scope='module')
def basin(tmp_path_factory):
    outdir = str(tmp_path_factory.mktemp('basin'))
    return synthetic.gen_synthetic_basin(outdir, seed=5, n_dates=N_DATES,
                                         size=SIZE, n_train=2)


def scene_index(basin, scene_id):
    date = np.datetime64(f'{scene_id[4:8]}-{scene_id[8:10]}-{scene_id[10:]}')
    days = (date - np.datetime64(synthetic.parameters.synthetic['start']))
    return int(days.astype('i8')) // 6


def test_layout(basin):
    manifest = table.Table.read(basin.manifest, format='ascii.csv')
    assert len(manifest) == N_DATES - 1
    assert basin.dropped_scene.startswith('S1B')
    assert basin.dropped_scene not in list(manifest['scene_id'])
    assert set(basin.cloud_scenes) <= set(manifest['scene_id'])
    assert len(basin.cloud_scenes) == 2
    refs = glob.glob(os.path.join(basin.outdir, 'references', 'ref_*.aqmr'))
    assert len(refs) == (6 * (N_DATES - 1)) // 12 + 1
    first = raster.read_raster(os.path.join(basin.outdir, manifest['path'][0]),
                               kind=BackscatterRaster)
    assert first.grid.width == round(0.61 * SIZE)
    assert basin.grid.composable(first.grid)
    with open(basin.config) as fp:
        config = yaml.safe_load(fp)
    assert config['manifest'] == 'manifest.csv'
    assert config['epoch_start'] == '2022-07-01'
    assert config['train_crop_px'] == 64
    labels = analytics.read_class_labels(
        os.path.join(basin.outdir, 'class_labels.csv'))
    assert list(labels['code']) == [1, 2, 3]


def test_reproducible(basin, tmp_path):
    again = synthetic.gen_synthetic_basin(str(tmp_path / 'a'), seed=5,
                                          n_dates=N_DATES, size=SIZE,
                                          n_train=2)
    names = [os.path.relpath(fn, basin.outdir)
             for pattern in ('*.aqmr', '*.csv', '*.yaml', '*/*.aqmr',
                             '*/*.csv')
             for fn in glob.glob(os.path.join(basin.outdir, pattern))]
    assert len(names) > 40
    for name in names:
        with open(os.path.join(basin.outdir, name), 'rb') as fp:
            a = fp.read()
        with open(os.path.join(again.outdir, name), 'rb') as fp:
            b = fp.read()
        assert a == b, name
    other = synthetic.gen_synthetic_basin(str(tmp_path / 'b'), seed=6,
                                          n_dates=N_DATES, size=SIZE,
                                          n_train=2)
    name = os.path.join('scenes', os.path.basename(
        glob.glob(os.path.join(basin.outdir, 'scenes', '*.aqmr'))[0]))
    with open(os.path.join(basin.outdir, name), 'rb') as fp:
        a = fp.read()
    with open(os.path.join(other.outdir, name), 'rb') as fp:
        assert fp.read() != a


def test_truth_tracks_gauge(basin):
    refs = sorted(glob.glob(os.path.join(basin.outdir, 'references',
                                         'ref_*.aqmr')))
    masks = []
    for fn in refs:
        date = os.path.basename(fn)[4:14]
        masks.append(raster.read_raster(fn, kind=WaterMask).replace(
            timestamp=date))
    areas = analytics.area_series(masks)
    gauge = analytics.read_gauge(os.path.join(basin.outdir, 'gauge.csv'))
    corr = analytics.correlate(gauge, areas)
    assert corr.n_pairs == len(refs)
    assert corr.r > 0.9


def test_clouds_depress_naive_water(basin):
    geom = basin.geometry
    span = 6 * (N_DATES - 1)
    clear = ~synthetic.shadow_mask(geom)
    manifest = table.Table.read(basin.manifest, format='ascii.csv')
    ratios = {}
    for row in manifest:
        scene = raster.read_raster(os.path.join(basin.outdir, row['path']),
                                   kind=BackscatterRaster)
        x0, _ = basin.grid.offset_of(scene.grid)
        cols = slice(x0, x0 + scene.grid.width)
        i = scene_index(basin, row['scene_id'])
        truth = synthetic.truth_mask(synthetic.water_level(6 * i, span),
                                     geom)[:, cols]
        naive = synthetic.naive_water_mask(scene).water
        keep = clear[:, cols]
        ratios[row['scene_id']] = (np.count_nonzero(naive & keep)
                                   / np.count_nonzero(truth & keep))
    for scene_id, ratio in ratios.items():
        if scene_id in basin.cloud_scenes:
            assert ratio < 0.8, scene_id
        else:
            assert 0.85 < ratio < 1.15, scene_id


def test_shadow_is_shaded(basin):
    dem = raster.read_raster(os.path.join(basin.outdir, 'dem.aqmr'),
                             kind=DemRaster)
    mask = shade.make_shade_mask(dem, 3, 20.0, target=dem.grid)
    shadow = synthetic.shadow_mask(basin.geometry)
    assert np.mean(mask.data[0][shadow] == 1) >= 0.9
    assert mask.data[0, -8:, :].sum() == 0


def test_training_pairs(basin):
    pairs = train.load_pairs(os.path.join(basin.outdir, 'training',
                                          'pairs.csv'), crop=64, tile=32)
    assert len(pairs) == 12
    assert sum(p.split == 'validation' for p in pairs) == 4
    water = sum(int(p.mask.data.sum()) for p in pairs)
    assert 0.03 < water / (12 * 32 * 32) < 0.3


def test_water_level():
    days = np.arange(0, 400)
    level = synthetic.water_level(days, 300)
    assert np.all((level >= 0) & (level <= 1))
    assert level[195] < level[150]
    geom = synthetic.BasinGeometry.from_rng(64, np.random.default_rng(0))
    low = synthetic.truth_mask(0.0, geom)
    high = synthetic.truth_mask(1.0, geom)
    assert np.all(high[low])
    assert high.sum() > low.sum()


def test_errors(tmp_path):
    with pytest.raises(ValueError):
        synthetic.gen_synthetic_basin(str(tmp_path), n_dates=5, size=64)
    with pytest.raises(ValueError):
        synthetic.gen_synthetic_basin(str(tmp_path), n_dates=12, size=32)
