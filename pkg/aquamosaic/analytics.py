"""Accuracy metrics, class cross-tabulations, water-area series and gauge
correlation.

Comparisons between water products are pixel-wise.  Masks on different
resolutions are first brought to the coarser grid with
:func:`aquamosaic.raster.resample_mask`.
"""

import dataclasses

import numpy as np
from astropy import table
from scipy import stats

from . import log, parameters
from .raster import ClassRaster
from .util import to_dates, date_strings, log_record

__all__ = ["ConfusionCounts",
           "confusion",
           "confusion_arrays",
           "prf",
           "crosstab",
           "read_class_labels",
           "AreaSeries",
           "area_series",
           "pixels_to_km2",
           "GaugeSeries",
           "read_gauge",
           "write_gauge",
           "align_gauge",
           "correlate",
           "Correlation",
           "write_metrics",
           "write_plot_data",
]


@dataclasses.dataclass(frozen=True)
class ConfusionCounts:
    """Pixel counts of a binary comparison."""
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ('tp', 'fp', 'fn', 'tn'):
            value = int(getattr(self, name))
            if value < 0:
                raise ValueError(f'{name} must be non-negative, got {value}')
            object.__setattr__(self, name, value)

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self):
        """Pixel accuracy: fraction of compared pixels that agree."""
        if self.total == 0:
            raise ValueError('no compared pixels')
        return (self.tp + self.tn) / self.total

    def swapped(self):
        """Counts with prediction and reference exchanged."""
        return ConfusionCounts(self.tp, self.fn, self.fp, self.tn)


def confusion_arrays(pred, ref, valid=None):
    """Confusion counts of two boolean arrays.

    Parameters
    ----------
    pred, ref : array_like[bool]
        predicted and reference water
    valid : array_like[bool] or None
        pixels to count; None counts all

    Returns
    -------
    ConfusionCounts
    """
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    if pred.shape != ref.shape:
        raise ValueError(f'shape mismatch: {pred.shape} vs {ref.shape}')
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    tp = np.count_nonzero(pred & ref & valid)
    fp = np.count_nonzero(pred & ~ref & valid)
    fn = np.count_nonzero(~pred & ref & valid)
    tn = np.count_nonzero(~pred & ~ref & valid)
    return ConfusionCounts(tp, fp, fn, tn)


def confusion(pred, ref):
    """Pixelwise confusion counts of two water masks on the same grid.

    Pixels that are nodata in either mask are left out of all four counts.

    Parameters
    ----------
    pred : WaterMask
        predicted mask
    ref : WaterMask
        reference mask

    Returns
    -------
    ConfusionCounts
    """
    if pred.grid != ref.grid:
        raise ValueError('masks must share one grid; resample first')
    valid = pred.valid & ref.valid
    return confusion_arrays(pred.water, ref.water, valid)


def prf(counts, zero_division=None):
    """Precision, recall and F1 (harmonic mean of the two).

    Parameters
    ----------
    counts : ConfusionCounts
        pixel counts
    zero_division : float or None
        value returned for a metric whose denominator is zero; None raises

    Returns
    -------
    precision, recall, f1 : float
    """
    def ratio(num, den, what):
        if den == 0:
            if zero_division is None:
                raise ValueError(f'{what} is zero')
            return float(zero_division)
        return num / den

    precision = ratio(counts.tp, counts.tp + counts.fp, 'tp + fp')
    recall = ratio(counts.tp, counts.tp + counts.fn, 'tp + fn')
    if precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def read_class_labels(path):
    """Read a class label CSV (code, label_low_water, label_high_water)."""
    labels = table.Table.read(path, format='ascii.csv')
    missing = {'code', 'label_low_water', 'label_high_water'} - set(
        labels.colnames)
    if missing:
        raise ValueError(f'class label file lacks columns {sorted(missing)}')
    return labels


def crosstab(selection, classes, labels=None):
    """Count and percentage of selected pixels per class.

    Parameters
    ----------
    selection : np.ndarray[bool] or WaterMask
        pixels to tabulate; for a mask, its water pixels
    classes : ClassRaster
        integer class codes on the same grid; 0 is nodata
    labels : astropy.table.Table or None
        class labels as from read_class_labels; fixes the class list and
        order.  None lists the codes present in classes, ascending.

    Returns
    -------
    astropy.table.Table
        columns code, label_low_water, label_high_water, count, percent;
        percentages are 0 for an empty selection
    """
    if not isinstance(classes, ClassRaster):
        classes = ClassRaster(classes.data, classes.grid)
    if hasattr(selection, 'grid'):
        if selection.grid != classes.grid:
            raise ValueError('selection and classes must share one grid')
        selection = selection.water
    selection = np.asarray(selection, dtype=bool)
    code_map = classes.data[0]
    if selection.shape != code_map.shape:
        raise ValueError('selection and classes differ in shape')
    picked = code_map[selection & classes.valid]
    counts = np.bincount(picked, minlength=256)
    if labels is None:
        codes = [c for c in np.unique(code_map)
                 if c != parameters.class_nodata]
        low = high = [''] * len(codes)
    else:
        codes = list(labels['code'])
        bad = [c for c in codes if not 0 <= c < len(counts)]
        if bad:
            raise ValueError(f'label codes out of range 0..255: {bad}')
        low = [str(v) for v in labels['label_low_water']]
        high = [str(v) for v in labels['label_high_water']]
    out = table.Table()
    out['code'] = np.array(codes, dtype='i4')
    out['label_low_water'] = low
    out['label_high_water'] = high
    out['count'] = np.array([counts[c] for c in codes], dtype='i8')
    total = out['count'].sum()
    out['percent'] = (100.0 * out['count'] / total if total > 0
                      else np.zeros(len(codes)))
    return out


def pixels_to_km2(n, pixel_size_x, pixel_size_y=None):
    """Area in km^2 of n pixels of the given size in meters."""
    if pixel_size_y is None:
        pixel_size_y = pixel_size_x
    return n * pixel_size_x * pixel_size_y / 1e6


@dataclasses.dataclass
class AreaSeries:
    """Water area per date.

    Attributes
    ----------
    dates : np.ndarray[datetime64[D]]
        mosaic dates, increasing
    water_px : np.ndarray[int]
        water pixel count per date
    pixel_area_m2 : float
        area of one pixel
    """
    dates: np.ndarray
    water_px: np.ndarray
    pixel_area_m2: float

    def __post_init__(self):
        self.dates = to_dates(self.dates)
        self.water_px = np.asarray(self.water_px, dtype='i8')
        if len(self.dates) != len(self.water_px):
            raise ValueError('dates and counts differ in length')
        order = np.argsort(self.dates, kind='stable')
        self.dates = self.dates[order]
        self.water_px = self.water_px[order]

    @property
    def area_km2(self):
        return self.water_px * self.pixel_area_m2 / 1e6

    @property
    def min_km2(self):
        return float(np.min(self.area_km2))

    @property
    def max_km2(self):
        return float(np.max(self.area_km2))

    @property
    def median_km2(self):
        return float(np.median(self.area_km2))

    @property
    def date_of_min(self):
        return self.dates[np.argmin(self.water_px)]

    @property
    def date_of_max(self):
        return self.dates[np.argmax(self.water_px)]

    @property
    def min_max_ratio_pct(self):
        """Minimum area as a percentage of the maximum."""
        return 100.0 * self.min_km2 / self.max_km2

    @property
    def min_median_ratio_pct(self):
        return 100.0 * self.min_km2 / self.median_km2

    @property
    def percent_of_max(self):
        return 100.0 * self.area_km2 / self.max_km2

    def summary(self):
        """Scalar statistics as a dict."""
        return dict(min_km2=self.min_km2, max_km2=self.max_km2,
                    median_km2=self.median_km2,
                    date_of_min=str(self.date_of_min),
                    date_of_max=str(self.date_of_max),
                    min_max_ratio_pct=self.min_max_ratio_pct,
                    min_median_ratio_pct=self.min_median_ratio_pct)

    def to_table(self):
        out = table.Table()
        out['date'] = date_strings(self.dates)
        out['water_px'] = self.water_px
        out['area_km2'] = self.area_km2
        out['percent_of_max'] = self.percent_of_max
        return out


def area_series(series, region=None):
    """Water area per date of a (shade-applied) mosaic series.

    Parameters
    ----------
    series : MosaicSeries or list[WaterMask]
        masks with timestamps, all on one grid
    region : np.ndarray[bool] or None
        restrict the count to these pixels

    Returns
    -------
    AreaSeries
    """
    masks = list(getattr(series, 'masks', series))
    if not masks:
        raise ValueError('empty series')
    grid = masks[0].grid
    counts = []
    for m in masks:
        if m.grid != grid:
            raise ValueError('series masks must share one grid')
        water = m.water
        if region is not None:
            water = water & region
        counts.append(np.count_nonzero(water))
    return AreaSeries([m.timestamp for m in masks], counts,
                      grid.pixel_area_m2)


@dataclasses.dataclass
class GaugeSeries:
    """Water level (meters) per date; dates strictly increasing."""
    dates: np.ndarray
    level_m: np.ndarray

    def __post_init__(self):
        self.dates = to_dates(self.dates)
        self.level_m = np.asarray(self.level_m, dtype='f8')
        if len(self.dates) != len(self.level_m):
            raise ValueError('dates and levels differ in length')
        if np.any(np.diff(self.dates) <= np.timedelta64(0, 'D')):
            raise ValueError('gauge dates must be strictly increasing')


def read_gauge(path):
    """Read a gauge CSV with columns date, level_m."""
    tab = table.Table.read(path, format='ascii.csv')
    return GaugeSeries([str(d) for d in tab['date']], tab['level_m'])


def write_gauge(gauge, path):
    tab = table.Table()
    tab['date'] = date_strings(gauge.dates)
    tab['level_m'] = gauge.level_m
    tab.write(path, format='ascii.csv', overwrite=True)


def align_gauge(gauge, dates,
                window_days=parameters.analytics['gauge_window_days']):
    """Nearest gauge reading for each date.

    Parameters
    ----------
    gauge : GaugeSeries
        gauge readings
    dates : array_like[datetime64]
        dates to match
    window_days : int
        maximum distance in days; farther dates get no reading

    Returns
    -------
    index : np.ndarray[int]
        gauge index per date; -1 where none lies within the window.  On a
        tie the earlier reading wins.
    """
    dates = to_dates(dates)
    if len(gauge.dates) == 0:
        raise ValueError('gauge series is empty')
    gd = gauge.dates.astype('i8')
    d = dates.astype('i8')
    right = np.clip(np.searchsorted(gd, d), 0, len(gd) - 1)
    left = np.clip(right - 1, 0, len(gd) - 1)
    dleft = np.abs(d - gd[left])
    dright = np.abs(gd[right] - d)
    index = np.where(dleft <= dright, left, right)
    dist = np.minimum(dleft, dright)
    return np.where(dist <= window_days, index, -1)


@dataclasses.dataclass
class Correlation:
    """Pearson correlation of gauge levels and water areas."""
    r: float
    n_pairs: int
    pairs: table.Table


def correlate(gauge, areas,
              window_days=parameters.analytics['gauge_window_days']):
    """Pearson correlation between gauge level and water area.

    Each area date is paired with the nearest gauge reading within
    window_days; dates without a reading are dropped.

    Parameters
    ----------
    gauge : GaugeSeries
        levels
    areas : AreaSeries
        areas
    window_days : int
        alignment window

    Returns
    -------
    Correlation
        r, the number of pairs, and the pairs (date, level_m, area_km2)
    """
    index = align_gauge(gauge, areas.dates, window_days)
    keep = index >= 0
    dropped = int(np.sum(~keep))
    if dropped:
        log.warning(f'{dropped} area dates have no gauge reading within '
                    f'{window_days} days')
    if np.sum(keep) < 3:
        raise ValueError(f'need at least 3 aligned pairs, got '
                         f'{int(np.sum(keep))}')
    pairs = table.Table()
    pairs['date'] = date_strings(areas.dates[keep])
    pairs['level_m'] = gauge.level_m[index[keep]]
    pairs['area_km2'] = areas.area_km2[keep]
    r = float(stats.pearsonr(np.asarray(pairs["level_m"]),
                             np.asarray(pairs["area_km2"]))[0])
    log_record('correlate', r=r, n_pairs=int(np.sum(keep)))
    return Correlation(r, int(np.sum(keep)), pairs)


def write_metrics(path, rows):
    """Write metrics rows (name -> ConfusionCounts) to a CSV.

    Columns: name, tp, fp, fn, tn, precision, recall, f1, accuracy.
    Undefined metrics are written as nan.
    """
    out = table.Table(names=('name', 'tp', 'fp', 'fn', 'tn', 'precision',
                             'recall', 'f1', 'accuracy'),
                      dtype=('U64', 'i8', 'i8', 'i8', 'i8', 'f8', 'f8', 'f8',
                             'f8'))
    for name, counts in rows.items():
        precision, recall, f1 = prf(counts, zero_division=np.nan)
        acc = counts.accuracy if counts.total else np.nan
        out.add_row((name, counts.tp, counts.fp, counts.fn, counts.tn,
                     precision, recall, f1, acc))
    out.write(path, format='ascii.csv', overwrite=True)
    return out


def write_plot_data(path, correlation):
    """Write the (date, level_m, area_km2) pairs for external plotting."""
    correlation.pairs.write(path, format='ascii.csv', overwrite=True)
