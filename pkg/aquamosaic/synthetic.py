"""Procedural river basin for demos and end-to-end tests.

A meandering river and a lake swell and shrink with a seasonal water level
that also carries a drought dip.  Two orbits with overlapping footprints
observe the basin on alternating passes; backscatter is dark over water
and bright over land, with multiplicative gamma speckle.  A steep ridge
casts a radar shadow that looks like water, and a few acquisitions carry a
rain cell that brightens the river.  Truth masks, a gauge series, a DEM, a
land-cover class raster and a training set are written alongside.
"""

import dataclasses
import os

import asdf
import numpy as np
import yaml
from astropy import table

from . import parameters
from .analytics import GaugeSeries, write_gauge
from .raster import (GridRef, BackscatterRaster, WaterMask, DemRaster,
                     ClassRaster, dequantize, write_raster)
from .util import to_dates, date_strings, log_record

__all__ = ["BasinGeometry",
           "SyntheticBasin",
           "water_level",
           "truth_mask",
           "elevation",
           "shadow_mask",
           "simulate_backscatter",
           "naive_water_mask",
           "gen_synthetic_basin",
]

CLASS_LABELS = [(1, 'open water', 'open water'),
                (2, 'herbaceous floodplain', 'flooded floodplain'),
                (3, 'upland forest', 'upland forest')]


@dataclasses.dataclass(frozen=True)
class BasinGeometry:
    """Fixed layout of the basin in pixel coordinates."""
    size: int
    phase: float
    lake_y: float
    lake_x: float
    ridge_y: float
    ridge_x: float

    @classmethod
    def from_rng(cls, size, rng):
        return cls(size=size, phase=float(rng.uniform(0, 2 * np.pi)),
                   lake_y=0.8 * size, lake_x=0.7 * size,
                   ridge_y=0.14 * size, ridge_x=0.3 * size)

    def centerline(self, x):
        """Row of the river center at column x."""
        return self.size * (0.5 + 0.08 * np.sin(
            2 * np.pi * x / (0.6 * self.size) + self.phase))


def water_level(days, span_days):
    """Relative water level in [0, 1] at days since the start.

    A yearly cycle peaking three months in, minus a drought dip two thirds
    of the way through the span.
    """
    days = np.asarray(days, dtype='f8')
    seasonal = 0.5 + 0.4 * np.sin(2 * np.pi * days / 365.25)
    drought = 0.35 * np.exp(-0.5 * ((days - 0.65 * span_days) / 18) ** 2)
    return np.clip(seasonal - drought, 0, 1)


def truth_mask(level, geom):
    """Boolean water map of the basin at a relative level."""
    yy, xx = np.mgrid[0:geom.size, 0:geom.size]
    half_width = 3 + 3 * level
    river = np.abs(yy - geom.centerline(xx)) < half_width
    radius = geom.size * (0.04 + 0.05 * level)
    lake = (yy - geom.lake_y) ** 2 + (xx - geom.lake_x) ** 2 < radius ** 2
    return river | lake


def elevation(geom):
    """DEM in meters: a gentle valley and a steep ridge."""
    yy, xx = np.mgrid[0:geom.size, 0:geom.size].astype('f8')
    valley = 20 + 0.3 * np.abs(yy - geom.centerline(xx))
    ridge = 400 * (np.exp(-0.5 * ((yy - geom.ridge_y) / 3) ** 2)
                   * np.exp(-0.5 * ((xx - geom.ridge_x) / 12) ** 2))
    return valley + ridge


def shadow_mask(geom):
    """Pixels behind the ridge crest that return almost no energy."""
    yy, xx = np.mgrid[0:geom.size, 0:geom.size]
    return ((yy > geom.ridge_y) & (yy <= geom.ridge_y + 4)
            & (np.abs(xx - geom.ridge_x) <= 18))


def simulate_backscatter(water, rng, shadow=None, cloud=None):
    """VH and VV backscatter in dB with speckle.

    Parameters
    ----------
    water : np.ndarray[bool]
        water map
    rng : np.random.Generator
        random source
    shadow : np.ndarray[bool] or None
        radar-shadowed land
    cloud : np.ndarray[bool] or None
        pixels brightened by a rain cell

    Returns
    -------
    vh, vv : np.ndarray
        backscatter in dB
    """
    par = parameters.synthetic
    out = []
    for pol in ('vh', 'vv'):
        mean = np.where(water, par['water_db'][pol], par['land_db'][pol])
        if shadow is not None:
            mean = np.where(shadow & ~water, par['shadow_db'][pol], mean)
        if cloud is not None:
            mean = np.where(cloud, mean + par['cloud_db'], mean)
        speckle = rng.gamma(par['looks'], 1 / par['looks'], size=water.shape)
        out.append(mean + 10 * np.log10(speckle))
    return out[0], out[1]


def naive_water_mask(scene,
                     threshold=parameters.synthetic['naive_vv_threshold_db']):
    """Water where VV is darker than a fixed threshold."""
    vv = scene.data[1]
    db = np.full(vv.shape, np.inf)
    valid = scene.valid
    db[valid] = dequantize(vv[valid])
    out = (db < threshold).astype('u1')
    out[~valid] = parameters.mask_nodata
    return WaterMask(out, scene.grid, timestamp=scene.timestamp)


@dataclasses.dataclass
class SyntheticBasin:
    """What gen_synthetic_basin wrote, and the layout it used."""
    outdir: str
    config: str
    manifest: str
    geometry: BasinGeometry
    grid: GridRef
    scene_ids: list
    cloud_scenes: list
    dropped_scene: str
    gauge: GaugeSeries


def _date_tag(date):
    return str(date).replace('-', '')


def gen_synthetic_basin(outdir, seed=0,
                        n_dates=parameters.synthetic['n_dates'],
                        size=parameters.synthetic['size'],
                        start=parameters.synthetic['start'],
                        n_train=parameters.synthetic['n_train']):
    """Write a synthetic basin and a ready-to-run pipeline config.

    Parameters
    ----------
    outdir : str
        directory to write to
    seed : int
        random seed; equal seeds give byte-identical files
    n_dates : int
        number of acquisitions, alternating between orbits A and B every
        revisit_days; one B acquisition is dropped
    size : int
        side of the basin in pixels
    start : str
        date of the first acquisition, also the mosaic epoch
    n_train : int
        training scenes; one more is written for validation

    Returns
    -------
    SyntheticBasin
    """
    if n_dates < 6:
        raise ValueError(f'need at least 6 acquisitions, got {n_dates}')
    if size < 64:
        raise ValueError(f'basin size must be at least 64, got {size}')
    if n_train < 1:
        raise ValueError('need at least one training scene')
    par = parameters.synthetic
    rng = np.random.default_rng(seed)
    geom = BasinGeometry.from_rng(size, rng)
    start = to_dates(start)
    revisit = par['revisit_days']
    span = revisit * (n_dates - 1)
    grid = GridRef(par['origin'][0], par['origin'][1], par['pixel_size'],
                   par['pixel_size'], size, size, par['crs_tag'])
    os.makedirs(outdir, exist_ok=True)
    for sub in ('scenes', 'training', 'references'):
        os.makedirs(os.path.join(outdir, sub), exist_ok=True)

    cover = int(round(par['orbit_cover'] * size))
    footprints = {'A': (0, cover), 'B': (size - cover, cover)}
    # rain cells sit in the part of each footprint the other orbit misses
    cloud_x = {'A': size / 6, 'B': 5 * size / 6}
    cloud_radius = size / 7

    dropped = min((2 * n_dates // 3) | 1, n_dates - 1)
    candidates = [i for i in range(4, n_dates) if i != dropped]
    n_clouds = max(1, n_dates // 12)
    clouds = sorted(int(i) for i in rng.choice(candidates, n_clouds,
                                               replace=False))

    shadow = shadow_mask(geom)
    yy, xx = np.mgrid[0:size, 0:size]
    rows = []
    scene_ids = []
    cloud_scenes = []
    dropped_id = None
    for i in range(n_dates):
        orbit = 'A' if i % 2 == 0 else 'B'
        date = start + np.timedelta64(revisit * i, 'D')
        scene_id = f'S1{orbit}_{_date_tag(date)}'
        srng = np.random.default_rng([seed, i])
        if i == dropped:
            dropped_id = scene_id
            continue
        water = truth_mask(water_level(revisit * i, span), geom)
        cloud = None
        if i in clouds:
            cx = cloud_x[orbit]
            cy = geom.centerline(cx)
            cloud = (yy - cy) ** 2 + (xx - cx) ** 2 < cloud_radius ** 2
            cloud_scenes.append(scene_id)
        vh, vv = simulate_backscatter(water, srng, shadow, cloud)
        x0, w = footprints[orbit]
        scene = BackscatterRaster.from_db(vh[:, x0:x0 + w], vv[:, x0:x0 + w],
                                          grid.subgrid(x0, 0, w, size),
                                          timestamp=date)
        path = os.path.join('scenes', f'{scene_id}.aqmr')
        write_raster(scene, os.path.join(outdir, path))
        rows.append((scene_id, orbit, str(date), path))
        scene_ids.append(scene_id)
    manifest = table.Table(rows=rows, names=('scene_id', 'orbit_id', 'date',
                                             'path'))
    manifest_fn = os.path.join(outdir, 'manifest.csv')
    manifest.write(manifest_fn, format='ascii.csv', overwrite=True)

    cadence = parameters.mosaic['cadence_days']
    for k in range(span // cadence + 1):
        date = start + np.timedelta64(k * cadence, 'D')
        ref = truth_mask(water_level(k * cadence, span), geom)
        write_raster(WaterMask(ref.astype('u1'), grid, timestamp=date),
                     os.path.join(outdir, 'references',
                                  f'ref_{date}.aqmr'))

    pairs = []
    levels = np.linspace(0.05, 0.95, n_train + 1)
    for j, level in enumerate(levels):
        trng = np.random.default_rng([seed, 1000 + j])
        water = truth_mask(level, geom)
        vh, vv = simulate_backscatter(water, trng)
        date = start - np.timedelta64(30 * (j + 1), 'D')
        image = BackscatterRaster.from_db(vh, vv, grid, timestamp=date)
        mask = WaterMask(water.astype('u1'), grid, timestamp=date)
        write_raster(image, os.path.join(outdir, 'training', f'img_{j}.aqmr'))
        write_raster(mask, os.path.join(outdir, 'training', f'mask_{j}.aqmr'))
        split = 'validation' if j == n_train else 'training'
        pairs.append((f'img_{j}.aqmr', f'mask_{j}.aqmr', split, f'train{j}'))
    table.Table(rows=pairs, names=('image', 'mask', 'split', 'source_id')
                ).write(os.path.join(outdir, 'training', 'pairs.csv'),
                        format='ascii.csv', overwrite=True)

    write_raster(DemRaster(elevation(geom).astype('f4'), grid),
                 os.path.join(outdir, 'dem.aqmr'))
    low = truth_mask(0.0, geom)
    high = truth_mask(1.0, geom)
    classes = np.where(low, 1, np.where(high, 2, 3)).astype('u1')
    write_raster(ClassRaster(classes, grid), os.path.join(outdir,
                                                          'classes.aqmr'))
    labels = table.Table(rows=CLASS_LABELS, names=('code', 'label_low_water',
                                                   'label_high_water'))
    labels.write(os.path.join(outdir, 'class_labels.csv'), format='ascii.csv',
                 overwrite=True)

    days = np.arange(-10, span + 11)
    gauge = GaugeSeries(start + days.astype('timedelta64[D]'),
                        np.round(12 + 8 * water_level(days, span)
                                 + rng.normal(0, 0.05, len(days)), 3))
    write_gauge(gauge, os.path.join(outdir, 'gauge.csv'))

    config = demo_config(size, start, seed)
    config_fn = os.path.join(outdir, 'demo.yaml')
    with open(config_fn, 'w') as fp:
        yaml.safe_dump(config, fp, sort_keys=False)

    af = asdf.AsdfFile()
    af.tree = {'aquamosaic': {
        'seed': seed, 'size': size, 'n_dates': n_dates,
        'start': str(start), 'revisit_days': revisit,
        'grid': dataclasses.asdict(grid),
        'orbits': {k: list(v) for k, v in footprints.items()},
        'dropped_scene': dropped_id,
        'cloud_scenes': cloud_scenes,
        'cloud_dates': date_strings([start + np.timedelta64(revisit * i, 'D')
                                     for i in clouds]),
        'cloud_radius_px': cloud_radius,
        'geometry': dataclasses.asdict(geom)}}
    af.write_to(os.path.join(outdir, 'basin.asdf'))
    log_record('demo', outdir=outdir, scenes=len(scene_ids),
               clouds=len(cloud_scenes), dropped=dropped_id)
    return SyntheticBasin(outdir=outdir, config=config_fn,
                          manifest=manifest_fn, geometry=geom, grid=grid,
                          scene_ids=scene_ids, cloud_scenes=cloud_scenes,
                          dropped_scene=dropped_id, gauge=gauge)


def demo_config(size, start, seed=0):
    """Desk-scale pipeline config for a basin written to its directory."""
    config = dict(parameters.default_pipeline_config)
    config.update(
        manifest='manifest.csv', pairs='training/pairs.csv', dem='dem.aqmr',
        references='references', classes='classes.aqmr',
        class_labels='class_labels.csv', gauge='gauge.csv',
        weights='output/weights.aqmw', output_dir='output',
        epoch_start=str(start), tile_size_px=64, border_px=16,
        mosaic_tile_px=size // 3, unet_depth=2, unet_base_filters=8,
        unet_input_px=32, train_epochs=20, train_batch_size=16,
        train_learning_rate=2e-3, train_crop_px=(size // 32) * 32,
        # seasonal deficits stay below this; rain cells exceed it
        qa_min_score=0.35, compare_factor=3, seed=int(seed))
    return config
