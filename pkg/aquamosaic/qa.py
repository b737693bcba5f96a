"""Cloud-artifact screening of mosaic series.

Dense rain cells brighten the radar return over water, so a mosaic
affected by one shows a sudden deficit of water on the river.  The series
is cut into square tiles; tiles holding enough river (pixels water at least
once in the occurrence layer) get a per-date water count on that support,
and the dates falling furthest below the median are flagged.  Flagged
tile-dates are either replaced by the last clean earlier date or only
reported, with crops written for visual review.
"""

import dataclasses
import os
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from astropy import table

from . import log, parameters
from .raster import write_raster
from .util import to_dates, log_record

__all__ = ["TileRef",
           "TileWaterSeries",
           "AnomalyFlag",
           "select_river_tiles",
           "tile_water_series",
           "anomaly_scores",
           "detect_anomalies",
           "correct",
           "audit_table",
           "write_audit",
           "write_review_crops",
           "screen_series",
]

MODES = ('auto', 'report-only')

TileRef = namedtuple('TileRef', ['tile_id', 'x0', 'y0', 'width', 'height'])


def tile_id(ty, tx):
    return f'r{ty:03d}c{tx:03d}'


@dataclasses.dataclass
class TileWaterSeries:
    """Water pixel count per date on a tile's river support."""
    tile_id: str
    dates: np.ndarray
    counts: np.ndarray
    support_px: int

    def __post_init__(self):
        self.dates = to_dates(self.dates)
        self.counts = np.asarray(self.counts, dtype='i8')
        if len(self.dates) != len(self.counts):
            raise ValueError('dates and counts differ in length')
        if np.any(self.counts < 0) or np.any(self.counts > self.support_px):
            raise ValueError(f'{self.tile_id}: counts must lie in '
                             f'[0, {self.support_px}]')


@dataclasses.dataclass
class AnomalyFlag:
    """One flagged tile-date and what was done with it."""
    tile_id: str
    date: np.datetime64
    score: float
    action: str = 'flagged'
    replaced_from_date: np.datetime64 = None

    def __post_init__(self):
        self.date = to_dates(self.date)
        if not self.score >= 0:
            raise ValueError(f'anomaly score must be >= 0, got {self.score}')
        if self.action not in ('flagged', 'corrected', 'dismissed'):
            raise ValueError(f'unknown action {self.action!r}')


def select_river_tiles(occ, tile_size=parameters.mosaic['tile_size'],
                       min_water=None,
                       min_water_frac=parameters.qa['min_water_frac']):
    """Tiles holding more than min_water river pixels.

    Parameters
    ----------
    occ : PercentRaster
        occurrence layer of the series
    tile_size : int
        tile side in pixels; tiles start at the grid origin, edge tiles may
        be smaller
    min_water : int or None
        support size a tile must exceed; None uses min_water_frac of the
        full tile area
    min_water_frac : float
        threshold as a fraction of tile_size**2

    Returns
    -------
    list[TileRef]
        selected tiles in row-major order
    """
    if tile_size < 1:
        raise ValueError(f'tile_size must be >= 1, got {tile_size}')
    if min_water is None:
        min_water = min_water_frac * tile_size ** 2
    support = occ.valid & (np.nan_to_num(occ.data[0]) > 0)
    height, width = support.shape
    tiles = []
    for ty, y0 in enumerate(range(0, height, tile_size)):
        for tx, x0 in enumerate(range(0, width, tile_size)):
            sub = support[y0:y0 + tile_size, x0:x0 + tile_size]
            if np.count_nonzero(sub) > min_water:
                tiles.append(TileRef(tile_id(ty, tx), x0, y0, sub.shape[1],
                                     sub.shape[0]))
    log_record('qa_tiles', selected=len(tiles), min_water=float(min_water))
    return tiles


def _support(occ, tile):
    sub = occ.data[0, tile.y0:tile.y0 + tile.height,
                   tile.x0:tile.x0 + tile.width]
    return np.nan_to_num(sub) > 0


def tile_water_series(series, occ, tile):
    """Per-date water count of one tile on its occurrence support."""
    support = _support(occ, tile)
    stack = series.stack()[:, tile.y0:tile.y0 + tile.height,
                           tile.x0:tile.x0 + tile.width]
    counts = np.count_nonzero((stack == 1) & support[None], axis=(1, 2))
    return TileWaterSeries(tile.tile_id, series.dates, counts,
                           int(np.count_nonzero(support)))


def anomaly_scores(series):
    """Support-relative deficit below the median count, clamped at 0."""
    if series.support_px == 0:
        return np.zeros(len(series.counts))
    med = np.median(series.counts)
    return np.clip((med - series.counts) / series.support_px, 0, None)


def detect_anomalies(series, k=parameters.qa['top_k'],
                     min_dry_dates=parameters.qa['min_dry_dates'],
                     min_score=parameters.qa['min_score'],
                     dry_fraction=parameters.qa['dry_fraction']):
    """Flag the dates of a tile with the largest water deficits.

    Parameters
    ----------
    series : TileWaterSeries
        counts of one tile
    k : int
        maximum number of flags
    min_dry_dates : int
        tiles with at least this many near-dry dates are left alone
    min_score : float
        scores must exceed 0 and reach this value to be flagged
    dry_fraction : float
        a date is near-dry when its count is below this fraction of the
        support

    Returns
    -------
    list[AnomalyFlag]
        at most k flags, by decreasing score; equal scores keep the earlier
        date first
    """
    if len(series.counts) < 3:
        raise ValueError(f'{series.tile_id}: anomaly screening needs at '
                         f'least 3 dates, got {len(series.counts)}')
    if series.support_px == 0:
        return []
    dry = np.count_nonzero(series.counts < dry_fraction * series.support_px)
    if dry >= min_dry_dates:
        log.info(f'{series.tile_id}: {dry} near-dry dates, not screened')
        return []
    scores = anomaly_scores(series)
    order = np.lexsort((np.arange(len(scores)), -scores))
    flags = []
    for i in order[:k]:
        if scores[i] > 0 and scores[i] >= min_score:
            flags.append(AnomalyFlag(series.tile_id, series.dates[i],
                                     float(scores[i])))
    return flags


def correct(series, flags, tiles, mode='auto'):
    """Apply or report flags.

    In auto mode each flagged tile-date takes the tile content of the most
    recent earlier date of the same tile that is not itself flagged; the
    replaced pixels get the gap-filled provenance code.  A flag with no
    such date is dismissed.  report-only leaves the series untouched.

    Parameters
    ----------
    series : MosaicSeries
        mosaics to correct
    flags : list[AnomalyFlag]
        flags from detect_anomalies
    tiles : list[TileRef]
        tiles the flags refer to
    mode : {'auto', 'report-only'}
        what to do

    Returns
    -------
    series : MosaicSeries
        corrected series (the input itself in report-only mode)
    flags : list[AnomalyFlag]
        flags with their final action
    """
    if mode not in MODES:
        raise ValueError(f'mode must be one of {MODES}, got {mode!r}')
    if mode == 'report-only':
        return series, [dataclasses.replace(f, action='flagged')
                        for f in flags]
    by_id = {t.tile_id: t for t in tiles}
    index = {d: i for i, d in enumerate(series.dates)}
    flagged = {(f.tile_id, f.date) for f in flags}
    data = [m.data[0].copy() for m in series.masks]
    prov = [p.data[0].copy() for p in series.provenance]
    out = []
    for f in flags:
        if f.tile_id not in by_id or f.date not in index:
            raise ValueError(f'flag {f.tile_id} {f.date} does not match the '
                             'series')
        t = by_id[f.tile_id]
        j = index[f.date] - 1
        while j >= 0 and (f.tile_id, series.dates[j]) in flagged:
            j -= 1
        if j < 0:
            log.warning(f'{f.tile_id} {f.date}: no clean earlier date, '
                        f'flag dismissed')
            out.append(dataclasses.replace(f, action='dismissed'))
            continue
        win = (slice(t.y0, t.y0 + t.height), slice(t.x0, t.x0 + t.width))
        # source is the uncorrected series; the chosen date is unflagged
        data[index[f.date]][win] = series.masks[j].data[0][win]
        prov[index[f.date]][win] = parameters.provenance['gap_filled']
        out.append(dataclasses.replace(f, action='corrected',
                                       replaced_from_date=series.dates[j]))
    masks = [m.replace(data=d) for m, d in zip(series.masks, data)]
    provs = [p.replace(data=d) for p, d in zip(series.provenance, prov)]
    return series.replace_masks(masks, provs), out


def audit_table(flags):
    """Audit log: tile_id, date, score, action, replaced_from_date."""
    out = table.Table(names=('tile_id', 'date', 'score', 'action',
                             'replaced_from_date'),
                      dtype=('U16', 'U10', 'f8', 'U9', 'U10'))
    for f in flags:
        out.add_row((f.tile_id, str(f.date), f.score, f.action,
                     '' if f.replaced_from_date is None
                     else str(f.replaced_from_date)))
    return out


def write_audit(flags, path):
    audit = audit_table(flags)
    audit.write(path, format='ascii.csv', overwrite=True)
    return audit


def write_review_crops(series, flags, tiles, outdir):
    """Write the mosaic tile of each flag for visual review.

    Files are named ``qa_<tile_id>_<date>.aqmr``.

    Returns
    -------
    list[str]
        paths written
    """
    os.makedirs(outdir, exist_ok=True)
    by_id = {t.tile_id: t for t in tiles}
    index = {d: i for i, d in enumerate(series.dates)}
    written = []
    for f in flags:
        t = by_id[f.tile_id]
        crop = series.masks[index[f.date]].crop(t.x0, t.y0, t.width,
                                                 t.height)
        fn = os.path.join(outdir, f'qa_{f.tile_id}_{f.date}.aqmr')
        write_raster(crop, fn)
        written.append(fn)
    return written


def screen_series(series, occ, tile_size=parameters.mosaic['tile_size'],
                  min_water=None,
                  min_water_frac=parameters.qa['min_water_frac'],
                  k=parameters.qa['top_k'],
                  min_dry_dates=parameters.qa['min_dry_dates'],
                  min_score=parameters.qa['min_score'], mode='auto',
                  workers=1):
    """Select river tiles, detect anomalies on each and correct or report.

    Returns
    -------
    series : MosaicSeries
    flags : list[AnomalyFlag]
        ordered by tile, then by decreasing score
    tiles : list[TileRef]
        screened tiles
    """
    tiles = select_river_tiles(occ, tile_size, min_water, min_water_frac)

    def job(tile):
        return detect_anomalies(tile_water_series(series, occ, tile), k,
                                min_dry_dates, min_score)

    with ThreadPoolExecutor(max_workers=max(int(workers), 1)) as pool:
        flags = [f for found in pool.map(job, tiles) for f in found]
    series, flags = correct(series, flags, tiles, mode)
    actions = [f.action for f in flags]
    log_record('qa', tiles=len(tiles), flagged=len(flags),
               corrected=actions.count('corrected'),
               dismissed=actions.count('dismissed'), mode=mode)
    return series, flags, tiles
