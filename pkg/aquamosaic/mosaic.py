"""Scene prediction and the fixed-cadence mosaic time series.

Each scene is padded, cut into overlapping tiles, run through the U-Net and
stitched back from the tile cores.  Thresholded scene masks are grouped into
cadence windows counted from an epoch date; masks of one window are
composited with a max rule (water over non-water over nodata).  Windows
with no data take the previous window's values, and shaded terrain is set
to non-water.  Occurrence and recurrence summarize the finished series.

Provenance rasters record, per pixel, which scene of the window supplied the
value: 1..254 index the window's scene list, 255 marks gap-filled pixels
and 0 pixels with no data at all.
"""

import dataclasses
import glob
import os
import re
from concurrent.futures import ThreadPoolExecutor

import asdf
import numpy as np
from astropy import table

from . import log, parameters
from . import unet
from .raster import (Raster, BackscatterRaster, ProbabilityRaster, WaterMask,
                     pad_to, retile, read_raster, write_raster)
from .shade import project_mask
from .util import to_dates, date_strings, years, log_record

__all__ = ["Scene",
           "SceneManifest",
           "read_manifest",
           "PercentRaster",
           "ProvenanceRaster",
           "MosaicSeries",
           "predict_scene",
           "composite",
           "gap_fill",
           "apply_shade",
           "occurrence",
           "recurrence",
           "annual_presence",
           "occurrence_summary",
           "assign_windows",
           "build_series",
           "write_series",
           "read_series",
]

NODATA = parameters.mask_nodata
PROV_NODATA = parameters.provenance['nodata']
PROV_FILLED = parameters.provenance['gap_filled']
MAX_SCENES = parameters.provenance['max_scenes']


class PercentRaster(Raster):
    """Single-band percentage in [0, 100]; NaN is nodata."""
    nbands = 1
    dtype = 'f4'
    default_nodata = np.nan

    def _check_values(self):
        with np.errstate(invalid='ignore'):
            if np.any((self.data < 0) | (self.data > 100)):
                raise ValueError('percentages must lie in [0, 100]')


class ProvenanceRaster(Raster):
    """Contributor code per pixel; see the module docstring."""
    nbands = 1
    dtype = 'u1'
    default_nodata = PROV_NODATA


@dataclasses.dataclass(frozen=True)
class Scene:
    """One entry of a scene manifest."""
    scene_id: str
    orbit_id: str
    date: np.datetime64
    path: str

    def __post_init__(self):
        object.__setattr__(self, 'date', to_dates(self.date))

    def load(self):
        """Read the scene raster, stamped with the acquisition date."""
        r = read_raster(self.path, kind=BackscatterRaster)
        return r.replace(timestamp=self.date)


class SceneManifest:
    """Ordered collection of scenes with unique ids."""

    def __init__(self, scenes):
        self.scenes = sorted(scenes, key=lambda s: (s.date, s.scene_id))
        ids = [s.scene_id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise ValueError('scene ids in a manifest must be unique')

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    @property
    def dates(self):
        return np.array([s.date for s in self.scenes], dtype='datetime64[D]')


def read_manifest(path):
    """Read a scene manifest CSV (scene_id, orbit_id, date, path).

    Relative paths resolve against the manifest's directory.
    """
    tab = table.Table.read(path, format='ascii.csv')
    missing = {'scene_id', 'orbit_id', 'date', 'path'} - set(tab.colnames)
    if missing:
        raise ValueError(f'manifest lacks columns {sorted(missing)}')
    base = os.path.dirname(os.path.abspath(path))
    scenes = [Scene(str(row['scene_id']), str(row['orbit_id']),
                    str(row['date']), os.path.join(base, str(row['path'])))
              for row in tab]
    return SceneManifest(scenes)


@dataclasses.dataclass
class MosaicSeries:
    """Mosaics on one grid at strictly increasing window dates.

    Attributes
    ----------
    masks : list[WaterMask]
        one mosaic per window, timestamped with the window start
    provenance : list[ProvenanceRaster]
        contributor codes, aligned with masks
    scene_ids : list[list[str]]
        scenes composited into each window; provenance code i refers to
        scene_ids[window][i - 1]
    cadence_days : int or None
        window length
    epoch_start : np.datetime64 or None
        start of window 0
    """
    masks: list
    provenance: list
    scene_ids: list
    cadence_days: int = None
    epoch_start: np.datetime64 = None

    def __post_init__(self):
        n = len(self.masks)
        if n == 0:
            raise ValueError('a mosaic series needs at least one date')
        if len(self.provenance) != n or len(self.scene_ids) != n:
            raise ValueError('masks, provenance and scene lists differ in '
                             'length')
        grid = self.masks[0].grid
        for m, p in zip(self.masks, self.provenance):
            if m.grid != grid or p.grid != grid:
                raise ValueError('all mosaics must share one grid')
            if m.timestamp is None:
                raise ValueError('mosaics must carry a date')
        dates = self.dates
        if np.any(np.diff(dates) <= np.timedelta64(0, 'D')):
            raise ValueError('mosaic dates must be strictly increasing')
        if self.epoch_start is not None:
            self.epoch_start = to_dates(self.epoch_start)
        if self.cadence_days is not None and self.epoch_start is not None:
            offset = (dates - self.epoch_start).astype('i8')
            if np.any(offset % self.cadence_days):
                raise ValueError('mosaic dates are not window starts of the '
                                 'cadence')

    @property
    def dates(self):
        return np.array([m.timestamp for m in self.masks],
                        dtype='datetime64[D]')

    @property
    def grid(self):
        return self.masks[0].grid

    def stack(self):
        """(n_dates, height, width) array of mask values."""
        return np.stack([m.data[0] for m in self.masks])

    def replace_masks(self, masks, provenance=None):
        return dataclasses.replace(
            self, masks=list(masks),
            provenance=list(self.provenance if provenance is None
                            else provenance))


def predict_scene(scene, model, tile=parameters.prediction['tile'],
                  border=parameters.prediction['border'],
                  batch_size=parameters.prediction['batch_size']):
    """Water probability of a whole scene from overlapping tiles.

    The scene is padded to whole multiples of the tile core (tile - 2 *
    border) plus a border on every side, so every tile lies inside the
    padded raster.  Only the core of each tile prediction is kept.

    Parameters
    ----------
    scene : BackscatterRaster
        quantized backscatter
    model : UNetModel
        trained model
    tile : int
        tile side; a multiple of 2**depth
    border : int
        pixels dropped on every side of each tile prediction
    batch_size : int
        tiles per forward pass

    Returns
    -------
    ProbabilityRaster
        on the scene's grid; NaN where the scene is nodata
    """
    core = tile - 2 * border
    if border < 0 or core <= 0:
        raise ValueError(f'tile {tile} must exceed twice the border {border}')
    step = 2 ** model.config.depth
    if tile % step:
        raise ValueError(f'tile {tile} is incompatible with the model: not '
                         f'a multiple of {step}')
    if scene.data.shape[0] != model.config.in_channels:
        raise ValueError(f'scene has {scene.data.shape[0]} bands, model '
                         f'expects {model.config.in_channels}')
    width, height = scene.grid.width, scene.grid.height
    padded = pad_to(scene, -(-width // core) * core,
                    -(-height // core) * core, border)
    tiles = retile(padded, tile, border)
    out = np.full(padded.grid.shape, np.nan, dtype='f4')
    for i in range(0, len(tiles), batch_size):
        chunk = tiles[i:i + batch_size]
        prob = unet.predict_proba(model, np.stack([t.data for t, _ in chunk]),
                                  batch_size=batch_size)
        for p, (_, place) in zip(prob, chunk):
            y0, x0 = place.y0 + border, place.x0 + border
            window = out[y0:y0 + core, x0:x0 + core]
            window[...] = np.fmax(window,
                                  p[border:border + core, border:border + core])
    out = out[border:border + height, border:border + width]
    out[~scene.valid] = np.nan
    return ProbabilityRaster(out, scene.grid, timestamp=scene.timestamp)


def composite(masks, grid, timestamp=None):
    """Max-composite of the masks of one window onto a target grid.

    Water dominates non-water, which dominates nodata.  Target pixels no
    mask covers are nodata.

    Parameters
    ----------
    masks : list[WaterMask]
        contributors, each on a grid composable with the target
    grid : GridRef
        target grid
    timestamp : np.datetime64 or None
        date of the mosaic

    Returns
    -------
    mosaic : WaterMask
        composited mask
    provenance : ProvenanceRaster
        1-based index of the first contributor holding the winning value,
        0 where no contributor has data
    """
    if len(masks) > MAX_SCENES:
        raise ValueError(f'at most {MAX_SCENES} scenes per window, got '
                         f'{len(masks)}')
    rank = np.full(grid.shape, -1, dtype='i1')
    prov = np.full(grid.shape, PROV_NODATA, dtype='u1')
    for i, m in enumerate(masks, start=1):
        col, row = grid.offset_of(m.grid)
        x0, y0 = max(col, 0), max(row, 0)
        x1 = min(col + m.grid.width, grid.width)
        y1 = min(row + m.grid.height, grid.height)
        if x0 >= x1 or y0 >= y1:
            continue
        src = m.data[0, y0 - row:y1 - row, x0 - col:x1 - col]
        r = np.where(src == NODATA, -1, src).astype('i1')
        dst = rank[y0:y1, x0:x1]
        better = r > dst
        dst[better] = r[better]
        prov[y0:y1, x0:x1][better] = i
    out = np.where(rank < 0, NODATA, rank).astype('u1')
    return (WaterMask(out, grid, timestamp=timestamp),
            ProvenanceRaster(prov, grid, timestamp=timestamp))


def gap_fill(series):
    """Forward-fill nodata pixels from the most recent date with data.

    Filled pixels get provenance 255.  Pixels with no earlier data stay
    nodata and are reported with a warning.

    Parameters
    ----------
    series : MosaicSeries
        chronologically ordered mosaics

    Returns
    -------
    MosaicSeries
    """
    masks, provs = [], []
    last = None
    filled = 0
    for m, p in zip(series.masks, series.provenance):
        data = m.data[0]
        prov = p.data[0]
        if last is not None:
            hole = (data == NODATA) & (last != NODATA)
            if np.any(hole):
                data = np.where(hole, last, data)
                prov = np.where(hole, PROV_FILLED, prov)
                filled += int(np.count_nonzero(hole))
        masks.append(m.replace(data=data))
        provs.append(p.replace(data=prov))
        last = data
    leading = [(str(m.timestamp), int(np.count_nonzero(m.data == NODATA)))
               for m in masks]
    leading = [(d, n) for d, n in leading if n]
    if leading:
        log.warning(f'{sum(n for _, n in leading)} pixel-dates remain nodata '
                    f'after gap-fill; first at {leading[0][0]}')
    log_record('gap_fill', filled_px=filled,
               leading_nodata_px=sum(n for _, n in leading))
    return series.replace_masks(masks, provs)


def apply_shade(mosaic, shade):
    """Set shaded pixels to non-water.

    Parameters
    ----------
    mosaic : WaterMask
        mask to edit
    shade : ShadeMask
        excluded terrain; projected onto the mosaic grid if needed

    Returns
    -------
    WaterMask
    """
    if shade.grid != mosaic.grid:
        shade = project_mask(shade, mosaic.grid)
    return mosaic.replace(data=np.where(shade.data[0] > 0, 0,
                                        mosaic.data[0]))


def _counts(series):
    stack = series.stack()
    return stack == 1, stack != NODATA


def occurrence(series):
    """Percent of valid dates on which each pixel is water.

    Returns
    -------
    PercentRaster
        NaN where a pixel has no valid date
    """
    water, valid = _counts(series)
    nvalid = valid.sum(axis=0)
    nwater = water.sum(axis=0)
    with np.errstate(invalid='ignore', divide='ignore'):
        out = np.where(nvalid > 0, 100.0 * nwater / nvalid, np.nan)
    return PercentRaster(out.astype('f4'), series.grid)


def recurrence(series):
    """Percent of observed calendar years in which each pixel is water at
    least once.

    Returns
    -------
    PercentRaster
        NaN where a pixel has no valid date
    """
    water, valid = _counts(series)
    yrs = years(series.dates)
    water_years = np.zeros(series.grid.shape, dtype='i4')
    valid_years = np.zeros(series.grid.shape, dtype='i4')
    for year in np.unique(yrs):
        sel = yrs == year
        water_years += np.any(water[sel], axis=0)
        valid_years += np.any(valid[sel], axis=0)
    with np.errstate(invalid='ignore', divide='ignore'):
        out = np.where(valid_years > 0, 100.0 * water_years / valid_years,
                       np.nan)
    return PercentRaster(out.astype('f4'), series.grid)


def annual_presence(series, year):
    """Water present at least once during a calendar year.

    Returns
    -------
    WaterMask
        1 if water on any date of the year, 0 if observed but never water,
        255 if never observed
    """
    sel = years(series.dates) == year
    if not np.any(sel):
        raise ValueError(f'series has no dates in {year}')
    water, valid = _counts(series)
    out = np.where(np.any(water[sel], axis=0), 1,
                   np.where(np.any(valid[sel], axis=0), 0, NODATA))
    return WaterMask(out.astype('u1'), series.grid,
                     timestamp=f'{year:04d}-01-01')


def occurrence_summary(occ, region=None, percentiles=(20, 50)):
    """Permanent-water share and percentiles of an occurrence raster.

    Statistics run over the support: valid pixels with occurrence > 0,
    restricted to region if given.

    Returns
    -------
    dict
        support_px, permanent_px, permanent_pct and p<q> per percentile;
        percentages are NaN for an empty support
    """
    values = occ.data[0]
    support = occ.valid & (values > 0)
    if region is not None:
        support &= np.asarray(region, dtype=bool)
    picked = values[support].astype('f8')
    out = dict(support_px=int(picked.size),
               permanent_px=int(np.count_nonzero(picked == 100)))
    out['permanent_pct'] = (100.0 * out['permanent_px'] / picked.size
                            if picked.size else np.nan)
    for q in percentiles:
        out[f'p{q}'] = (float(np.percentile(picked, q)) if picked.size
                        else np.nan)
    return out


def window_index(dates, epoch_start, cadence_days):
    """Cadence window of each date: floor((date - epoch) / cadence)."""
    if cadence_days < 1:
        raise ValueError(f'cadence must be at least 1 day, got {cadence_days}')
    days = (to_dates(dates) - to_dates(epoch_start)).astype('i8')
    return np.floor_divide(days, cadence_days)


def assign_windows(scenes, epoch_start=parameters.mosaic['epoch_start'],
                   cadence_days=parameters.mosaic['cadence_days']):
    """Group scenes by cadence window.

    Returns
    -------
    dict[int, list[Scene]]
        window index -> scenes, in increasing window order; scenes keep
        their manifest order within a window
    """
    scenes = list(scenes)
    if not scenes:
        return {}
    index = window_index([s.date for s in scenes], epoch_start, cadence_days)
    if np.any(index < 0):
        raise ValueError(f'scenes acquired before the epoch {epoch_start}')
    windows = {}
    for k, s in sorted(zip(index.tolist(), scenes), key=lambda t: t[0]):
        windows.setdefault(k, []).append(s)
    return windows


def build_series(scenes, model, grid,
                 epoch_start=parameters.mosaic['epoch_start'],
                 cadence_days=parameters.mosaic['cadence_days'],
                 shade=None, tile=parameters.prediction['tile'],
                 border=parameters.prediction['border'],
                 batch_size=parameters.prediction['batch_size'],
                 t=parameters.probability_threshold, workers=1):
    """Predict, threshold, composite, gap-fill and shade-mask a manifest.

    Every window from the first to the last one holding a scene is present;
    windows without scenes are filled from their predecessor.

    Parameters
    ----------
    scenes : iterable of Scene
        scenes to predict
    model : UNetModel
        trained model
    grid : GridRef
        mosaic grid
    epoch_start : str or np.datetime64
        start of window 0
    cadence_days : int
        window length
    shade : ShadeMask or None
        terrain to set to non-water
    tile, border, batch_size
        passed to predict_scene
    t : float
        probability threshold
    workers : int
        threads running scene predictions

    Returns
    -------
    MosaicSeries
    """
    windows = assign_windows(scenes, epoch_start, cadence_days)
    if not windows:
        raise ValueError('no scenes to mosaic')
    ordered = [s for k in windows for s in windows[k]]

    def job(scene):
        prob = predict_scene(scene.load(), model, tile, border, batch_size)
        mask = unet.threshold(prob, t)
        log_record('predict', scene_id=scene.scene_id,
                   date=str(scene.date),
                   water_px=int(np.count_nonzero(mask.water)))
        return mask

    with ThreadPoolExecutor(max_workers=max(int(workers), 1)) as pool:
        predicted = dict(zip((s.scene_id for s in ordered),
                             pool.map(job, ordered)))
    epoch = to_dates(epoch_start)
    masks, provs, ids = [], [], []
    for k in range(min(windows), max(windows) + 1):
        members = windows.get(k, [])
        date = epoch + np.timedelta64(k * cadence_days, 'D')
        m, p = composite([predicted[s.scene_id] for s in members], grid,
                         timestamp=date)
        masks.append(m)
        provs.append(p)
        ids.append([s.scene_id for s in members])
    series = gap_fill(MosaicSeries(masks, provs, ids, cadence_days, epoch))
    if shade is not None:
        if shade.grid != grid:
            shade = project_mask(shade, grid)
        series = series.replace_masks([apply_shade(m, shade)
                                       for m in series.masks])
    log_record('mosaic', windows=len(series.masks), scenes=len(ordered),
               empty_windows=sum(1 for i in ids if not i))
    return series


def write_series(series, outdir):
    """Write mosaics, provenance rasters and tables, and series.asdf.

    Files are ``mosaic_<date>.aqmr``, ``provenance_<date>.aqmr`` and
    ``provenance_<date>.csv`` (code, scene_id) per window.

    Returns
    -------
    list[str]
        paths written
    """
    os.makedirs(outdir, exist_ok=True)
    written = []
    for date, m, p, ids in zip(date_strings(series.dates), series.masks,
                               series.provenance, series.scene_ids):
        fn = os.path.join(outdir, f'mosaic_{date}.aqmr')
        write_raster(m, fn)
        written.append(fn)
        fn = os.path.join(outdir, f'provenance_{date}.aqmr')
        write_raster(p, fn)
        written.append(fn)
        codes = table.Table()
        codes['code'] = np.arange(1, len(ids) + 1, dtype='i4')
        codes['scene_id'] = np.array(ids, dtype='U64')
        fn = os.path.join(outdir, f'provenance_{date}.csv')
        codes.write(fn, format='ascii.csv', overwrite=True)
        written.append(fn)
    af = asdf.AsdfFile()
    af.tree = {'cadence_days': series.cadence_days,
               'epoch_start': (None if series.epoch_start is None
                               else str(series.epoch_start)),
               'dates': date_strings(series.dates),
               'scene_ids': [list(i) for i in series.scene_ids]}
    fn = os.path.join(outdir, 'series.asdf')
    af.write_to(fn)
    written.append(fn)
    return written


_MOSAIC_NAME = re.compile(r'mosaic_(\d{4}-\d{2}-\d{2})\.aqmr$')


def read_series(outdir):
    """Read a series written by write_series.

    Dates come from the file names; cadence and scene lists from
    series.asdf when present.  Missing provenance rasters read as all 0.
    """
    found = []
    for fn in glob.glob(os.path.join(outdir, 'mosaic_*.aqmr')):
        match = _MOSAIC_NAME.search(os.path.basename(fn))
        if match:
            found.append((match.group(1), fn))
    if not found:
        raise FileNotFoundError(f'no mosaics in {outdir}')
    found.sort()
    meta = {}
    meta_fn = os.path.join(outdir, 'series.asdf')
    if os.path.exists(meta_fn):
        with asdf.open(meta_fn) as af:
            meta = {'cadence_days': af.tree.get('cadence_days'),
                    'epoch_start': af.tree.get('epoch_start'),
                    'scene_ids': {d: list(i) for d, i in
                                  zip(af.tree['dates'], af.tree['scene_ids'])}}
    masks, provs, ids = [], [], []
    for date, fn in found:
        m = read_raster(fn, kind=WaterMask).replace(timestamp=date)
        pfn = os.path.join(outdir, f'provenance_{date}.aqmr')
        if os.path.exists(pfn):
            p = read_raster(pfn, kind=ProvenanceRaster).replace(timestamp=date)
        else:
            p = ProvenanceRaster(np.zeros(m.grid.shape, dtype='u1'), m.grid,
                                 timestamp=date)
        masks.append(m)
        provs.append(p)
        ids.append(meta.get('scene_ids', {}).get(date, []))
    return MosaicSeries(masks, provs, ids, meta.get('cadence_days'),
                        meta.get('epoch_start'))
