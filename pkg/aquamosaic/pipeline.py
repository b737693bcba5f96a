"""End-to-end processing: configuration, stages and the run driver.

A run goes shade -> train -> predict -> qa -> stats -> compare.  Every stage
writes its outputs below ``output_dir`` and is skipped when they already
exist, so an interrupted run resumes where it stopped.  The layout is::

    shade.aqmr                 terrain shade mask (when a DEM is given)
    history.csv                training history (when weights are trained)
    predicted/                 model mosaics, occurrence, recurrence
    mosaics/                   the series after cloud screening
    qa/                        qa_audit.csv and review crops
    stats/                     area series, summaries, gauge correlation
    report/                    accuracy metrics and class cross-tabulations
    run_record.asdf            configuration, versions, stages, artifacts
"""

import copy
import glob
import os
import re
import time

import asdf
import jsonschema
import numpy as np
import yaml
from astropy import table

from . import log, parameters, __version__
from . import shade, unet, train, mosaic, qa, analytics
from .raster import (RasterFormatError, WaterMask, DemRaster, ShadeMask,
                     ClassRaster, read_raster, write_raster, resample_mask)
from .util import merge_dicts, log_record, date_strings

__all__ = ["ConfigError",
           "DataError",
           "StageError",
           "exit_code",
           "load_config",
           "check_config",
           "series_grid",
           "run_shade",
           "run_train",
           "run_predict",
           "run_qa",
           "run_stats",
           "run_compare",
           "compare_series",
           "execute",
           "run_pipeline",
]

PATH_KEYS = ('manifest', 'pairs', 'dem', 'shade_override', 'references',
             'classes', 'class_labels', 'gauge', 'weights', 'output_dir')

_DATED = re.compile(r'(\d{4}-\d{2}-\d{2})\.aqmr$')


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


class DataError(ValueError):
    """Missing or unreadable input data."""


class StageError(RuntimeError):
    """A pipeline stage failed."""

    def __init__(self, stage, message):
        super().__init__(f'{stage}: {message}')
        self.stage = stage


def exit_code(exc):
    """Process exit status for an exception raised by a pipeline call."""
    codes = parameters.exit_codes
    if isinstance(exc, ConfigError):
        return codes['config']
    if isinstance(exc, (DataError, RasterFormatError,
                        unet.WeightsFormatError, FileNotFoundError)):
        return codes['data']
    return codes['stage']


def load_config(path=None, overrides=None):
    """Read, merge and validate a pipeline configuration.

    Parameters
    ----------
    path : str or None
        YAML file holding a flat mapping; relative paths in it resolve
        against the file's directory
    overrides : dict or None
        values replacing those of the file (command-line flags); None values
        are ignored

    Returns
    -------
    dict
        complete configuration
    """
    config = copy.deepcopy(parameters.default_pipeline_config)
    base = None
    if path is not None:
        try:
            with open(path) as fp:
                loaded = yaml.safe_load(fp)
        except FileNotFoundError as err:
            raise ConfigError(f'config file not found: {path}') from err
        except yaml.YAMLError as err:
            raise ConfigError(f'could not parse {path}: {err}') from err
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f'{path} must hold a mapping')
        merge_dicts(config, loaded)
        base = os.path.dirname(os.path.abspath(path))
    if overrides:
        merge_dicts(config, {k: v for k, v in overrides.items()
                             if v is not None})
    if base is not None:
        for key in PATH_KEYS:
            value = config.get(key)
            if isinstance(value, str) and not os.path.isabs(value):
                config[key] = os.path.join(base, value)
    return check_config(config)


def check_config(config):
    """Validate a configuration against the schema and the preconditions of
    the stages it drives.

    Raises
    ------
    ConfigError
        on the first violation found
    """
    try:
        jsonschema.validate(config, parameters.pipeline_config_schema)
    except jsonschema.ValidationError as err:
        where = '.'.join(str(p) for p in err.path) or 'config'
        raise ConfigError(f'{where}: {err.message}') from err
    tile, border = config['tile_size_px'], config['border_px']
    if tile <= 2 * border:
        raise ConfigError(f'tile_size_px {tile} must exceed twice border_px '
                          f'{border}')
    scale = 2 ** config['unet_depth']
    for key in ('tile_size_px', 'unet_input_px'):
        if config[key] % scale != 0:
            raise ConfigError(f'{key} {config[key]} is not a multiple of '
                              f'2**unet_depth = {scale}')
    if config['train_crop_px'] % config['unet_input_px'] != 0:
        raise ConfigError(f'train_crop_px {config["train_crop_px"]} is not a '
                          f'multiple of unet_input_px '
                          f'{config["unet_input_px"]}')
    paths = [os.path.abspath(config[k]) for k in PATH_KEYS
             if config.get(k) is not None]
    if len(set(paths)) != len(paths):
        raise ConfigError('configured paths must be distinct')
    return config


def _model_config(config):
    return unet.UNetConfig(depth=config['unet_depth'],
                           base_filters=config['unet_base_filters'],
                           input_size=config['unet_input_px'],
                           seed=config['seed'])


def series_grid(manifest):
    """Smallest grid covering every scene of a manifest."""
    grids = [read_raster(s.path).grid for s in manifest]
    if not grids:
        raise DataError('manifest lists no scenes')
    ref = grids[0]
    x0 = y0 = 0
    x1, y1 = ref.width, ref.height
    for g in grids[1:]:
        if not ref.composable(g):
            raise DataError('scenes do not share one mosaic grid')
        dx, dy = ref.offset_of(g)
        x0, y0 = min(x0, dx), min(y0, dy)
        x1, y1 = max(x1, dx + g.width), max(y1, dy + g.height)
    return ref.subgrid(x0, y0, x1 - x0, y1 - y0)


def run_shade(dem_path, output, factor=parameters.shade['aggregate_factor'],
              threshold=parameters.shade['slope_threshold_deg'],
              override=None):
    """Write the shade mask of a DEM file; override is an optional mask
    file of pixels never shaded."""
    dem = read_raster(dem_path, kind=DemRaster)
    if override is not None:
        override = read_raster(override, kind=ShadeMask)
    mask = shade.make_shade_mask(dem, factor, threshold, override)
    write_raster(mask, output)
    log_record('shade', output=output,
               shaded_px=int(np.count_nonzero(mask.data == 1)))
    return mask


def run_train(pairs_csv, weights, history, config):
    """Train on a pairs index and write the weights and history CSV."""
    pairs = train.load_pairs(pairs_csv, crop=config['train_crop_px'],
                             tile=config['unet_input_px'])
    settings = train.TrainConfig(epochs=config['train_epochs'],
                                 batch_size=config['train_batch_size'],
                                 learning_rate=config['train_learning_rate'],
                                 seed=config['seed'])
    model, hist = train.train(pairs, settings, _model_config(config))
    os.makedirs(os.path.dirname(os.path.abspath(weights)), exist_ok=True)
    unet.save_weights(model, weights)
    train.write_history(hist, history)
    return model, hist


def _write_layers(series, outdir):
    written = mosaic.write_series(series, outdir)
    for name, layer in (('recurrence', mosaic.recurrence(series)),
                        ('occurrence', mosaic.occurrence(series))):
        fn = os.path.join(outdir, f'{name}.aqmr')
        write_raster(layer, fn)
        written.append(fn)
    return written


def run_predict(manifest_path, weights, outdir, config, shade_path=None):
    """Predict every scene of a manifest and write the mosaic series with
    its occurrence and recurrence layers."""
    if not os.path.exists(weights):
        raise DataError(f'weights not found: {weights}')
    manifest = mosaic.read_manifest(manifest_path)
    try:
        model = unet.load_weights(weights, expected=_model_config(config))
    except unet.ConfigMismatchError as err:
        raise DataError(f'weights {weights} do not match the configured '
                        f'network: {err}') from err
    mask = None
    if shade_path is not None:
        mask = read_raster(shade_path, kind=ShadeMask)
    series = mosaic.build_series(
        manifest, model, series_grid(manifest),
        epoch_start=config['epoch_start'],
        cadence_days=config['cadence_days'], shade=mask,
        tile=config['tile_size_px'], border=config['border_px'],
        workers=config['workers'])
    _write_layers(series, outdir)
    return series


def run_qa(mosaic_dir, outdir, audit_dir, config):
    """Screen a written series for cloud artifacts.

    The screened series goes to outdir with fresh occurrence and recurrence
    layers; the audit log and review crops go to audit_dir.
    """
    series = mosaic.read_series(mosaic_dir)
    occ = mosaic.occurrence(series)
    screened, flags, tiles = qa.screen_series(
        series, occ, tile_size=config['mosaic_tile_px'],
        min_water_frac=config['qa_min_water_frac'], k=config['qa_top_k'],
        min_dry_dates=config['qa_min_dry_dates'],
        min_score=config['qa_min_score'], mode=config['qa_mode'],
        workers=config['workers'])
    os.makedirs(audit_dir, exist_ok=True)
    qa.write_review_crops(series, flags, tiles,
                          os.path.join(audit_dir, 'review'))
    _write_layers(screened, outdir)
    qa.write_audit(flags, os.path.join(audit_dir, 'qa_audit.csv'))
    return screened, flags


def run_stats(mosaic_dir, outdir, gauge_path=None,
              window_days=parameters.analytics['gauge_window_days']):
    """Area series, occurrence summary and, with a gauge, the correlation.

    Returns
    -------
    areas : AreaSeries
    corr : Correlation or None
    """
    series = mosaic.read_series(mosaic_dir)
    os.makedirs(outdir, exist_ok=True)
    corr = None
    if gauge_path is not None:
        gauge = analytics.read_gauge(gauge_path)
        try:
            corr = analytics.correlate(gauge, analytics.area_series(series),
                                       window_days)
        except ValueError as err:
            log.warning(f'no gauge correlation: {err}')
    if corr is not None:
        analytics.write_plot_data(os.path.join(outdir, 'plot_data.csv'), corr)
        table.Table(rows=[(corr.r, corr.n_pairs)],
                    names=('r', 'n_pairs')).write(
            os.path.join(outdir, 'correlation.csv'), format='ascii.csv',
            overwrite=True)
    occ = mosaic.occurrence(series)
    summary = mosaic.occurrence_summary(occ)
    table.Table(rows=[tuple(summary.values())], names=tuple(summary)).write(
        os.path.join(outdir, 'occurrence_summary.csv'), format='ascii.csv',
        overwrite=True)
    areas = analytics.area_series(series)
    stats = areas.summary()
    table.Table(rows=[tuple(stats.values())], names=tuple(stats)).write(
        os.path.join(outdir, 'area_summary.csv'), format='ascii.csv',
        overwrite=True)
    areas.to_table().write(os.path.join(outdir, 'area_series.csv'),
                           format='ascii.csv', overwrite=True)
    log_record('stats', dates=len(areas.dates),
               median_km2=float(areas.median_km2),
               r=float('nan') if corr is None else corr.r)
    return areas, corr


def _dated_files(directory):
    found = {}
    for fn in sorted(glob.glob(os.path.join(directory, '*.aqmr'))):
        match = _DATED.search(os.path.basename(fn))
        if match:
            found[match.group(1)] = fn
    return found


def _sum_crosstabs(tabs):
    out = tabs[0].copy()
    out['count'] = np.sum([t['count'] for t in tabs], axis=0)
    total = out['count'].sum()
    out['percent'] = (100.0 * out['count'] / total if total > 0
                      else np.zeros(len(out)))
    return out


def compare_series(series, references, factor=1, rule='majority',
                   classes=None, labels=None):
    """Compare mosaics with reference masks of the same dates.

    Parameters
    ----------
    series : MosaicSeries
        model mosaics
    references : dict
        date string -> reference WaterMask
    factor : int
        mosaics are aggregated factor x factor before counting; references
        on the mosaic grid are aggregated alike, coarser references must
        already have the aggregated pixel size
    rule : {'majority', 'any-water'}
        aggregation rule
    classes : ClassRaster or None
        class map on the mosaic grid for cross-tabulations
    labels : astropy.table.Table or None
        class labels

    Returns
    -------
    counts : dict
        date string -> ConfusionCounts, plus 'all' for their sum
    crosstabs : dict
        'water' (model water) and 'false_negative' (reference water the
        model missed) tables summed over the compared dates; empty without
        classes
    """
    counts = {}
    water_tabs, fn_tabs = [], []
    for date, pred in zip(date_strings(series.dates), series.masks):
        if date not in references:
            continue
        ref = references[date]
        if classes is not None and ref.grid == pred.grid:
            both = pred.valid & ref.valid
            water_tabs.append(analytics.crosstab(pred.water & both, classes,
                                                 labels))
            fn_tabs.append(analytics.crosstab(ref.water & ~pred.water & both,
                                              classes, labels))
        if factor > 1:
            if ref.grid == pred.grid:
                ref = resample_mask(ref, factor, rule)
            pred = resample_mask(pred, factor, rule)
        if ref.grid != pred.grid:
            raise DataError(f'reference {date} is not on the compared grid')
        counts[date] = analytics.confusion(pred, ref)
    if not counts:
        raise DataError('no reference shares a date with the mosaics')
    counts['all'] = sum(counts.values(), analytics.ConfusionCounts())
    crosstabs = {}
    if water_tabs:
        crosstabs = {'water': _sum_crosstabs(water_tabs),
                     'false_negative': _sum_crosstabs(fn_tabs)}
    elif classes is not None:
        log.warning('class raster not on the mosaic grid, no crosstabs')
    return counts, crosstabs


def run_compare(mosaic_dir, references_dir, outdir, factor=1,
                rule='majority', classes_path=None, labels_path=None):
    """Write metrics.csv and the class cross-tabulations."""
    series = mosaic.read_series(mosaic_dir)
    references = {d: read_raster(fn, kind=WaterMask).replace(timestamp=d)
                  for d, fn in _dated_files(references_dir).items()}
    classes = labels = None
    if classes_path is not None:
        classes = read_raster(classes_path, kind=ClassRaster)
    if labels_path is not None:
        labels = analytics.read_class_labels(labels_path)
    counts, crosstabs = compare_series(series, references, factor, rule,
                                       classes, labels)
    os.makedirs(outdir, exist_ok=True)
    for name, tab in crosstabs.items():
        tab.write(os.path.join(outdir, f'crosstab_{name}.csv'),
                  format='ascii.csv', overwrite=True)
    analytics.write_metrics(os.path.join(outdir, 'metrics.csv'), counts)
    precision, recall, f1 = analytics.prf(counts['all'], zero_division=np.nan)
    log_record('compare', dates=len(counts) - 1, precision=precision,
               recall=recall, f1=f1)
    return counts


def _layout(config):
    out = config['output_dir']
    weights = config['weights'] or os.path.join(out, 'weights.aqmw')
    return dict(
        shade=os.path.join(out, 'shade.aqmr'),
        weights=weights,
        history=os.path.join(out, 'history.csv'),
        predicted=os.path.join(out, 'predicted'),
        mosaics=os.path.join(out, 'mosaics'),
        qa=os.path.join(out, 'qa'),
        stats=os.path.join(out, 'stats'),
        report=os.path.join(out, 'report'),
        record=os.path.join(out, 'run_record.asdf'))


def _stage_plan(config, paths):
    """(stage, sentinel, action) for every stage that applies."""
    def do_shade():
        run_shade(config['dem'], paths['shade'], config['shade_factor'],
                  config['shade_threshold_deg'], config['shade_override'])

    def do_train():
        if config['pairs'] is None:
            raise DataError(f'weights not found: {paths["weights"]}')
        run_train(config['pairs'], paths['weights'], paths['history'],
                  config)

    def do_predict():
        run_predict(config['manifest'], paths['weights'], paths['predicted'],
                    config, paths['shade'] if config['dem'] else None)

    def do_qa():
        run_qa(paths['predicted'], paths['mosaics'], paths['qa'], config)

    def do_stats():
        run_stats(paths['mosaics'], paths['stats'], config['gauge'],
                  config['gauge_window_days'])

    def do_compare():
        run_compare(paths['mosaics'], config['references'], paths['report'],
                    config['compare_factor'], config['compare_rule'],
                    config['classes'], config['class_labels'])

    plan = []
    if config['dem'] is not None:
        plan.append(('shade', paths['shade'], do_shade))
    plan.append(('train', paths['weights'], do_train))
    plan.append(('predict', os.path.join(paths['predicted'],
                                         'occurrence.aqmr'), do_predict))
    plan.append(('qa', os.path.join(paths['qa'], 'qa_audit.csv'), do_qa))
    plan.append(('stats', os.path.join(paths['stats'], 'area_series.csv'),
                 do_stats))
    if config['references'] is not None:
        plan.append(('compare', os.path.join(paths['report'], 'metrics.csv'),
                     do_compare))
    return plan


def _run_stage(stage, sentinel, action):
    if os.path.exists(sentinel):
        log_record(stage, status='skipped', output=sentinel)
        return 'skipped'
    log_record(stage, status='start')
    start = time.perf_counter()
    try:
        action()
    except (ConfigError, DataError) as err:
        err.stage = stage
        raise
    except Exception as err:
        if exit_code(err) == parameters.exit_codes['data']:
            wrapped = DataError(f'{stage}: {err}')
            wrapped.stage = stage
            raise wrapped from err
        raise StageError(stage, err) from err
    log_record(stage, status='done', seconds=time.perf_counter() - start)
    return 'done'


def _artifacts(output_dir):
    found = []
    for root, _, files in os.walk(output_dir):
        for name in files:
            if name != 'run_record.asdf':
                found.append(os.path.relpath(os.path.join(root, name),
                                             output_dir))
    return sorted(found)


def _write_record(config, paths, statuses):
    history = None
    if os.path.exists(paths['history']):
        hist = table.Table.read(paths['history'], format='ascii.csv')
        history = {name: hist[name].tolist() for name in hist.colnames}
    af = asdf.AsdfFile()
    af.tree = {'aquamosaic': {
        'version': __version__,
        'config': dict(config),
        'stages': statuses,
        'artifacts': _artifacts(config['output_dir']),
        'history': history}}
    af.write_to(paths['record'])


def execute(config):
    """Run every applicable stage; raise on the first failure.

    Returns
    -------
    dict
        stage -> 'done' or 'skipped'
    """
    for key in ('manifest', 'output_dir'):
        if config.get(key) is None:
            raise ConfigError(f'{key} must be set to run the pipeline')
    for key in ('manifest', 'pairs', 'dem', 'shade_override', 'references',
                'classes', 'class_labels', 'gauge'):
        if config.get(key) is not None and not os.path.exists(config[key]):
            raise DataError(f'{key} not found: {config[key]}')
    paths = _layout(config)
    os.makedirs(config['output_dir'], exist_ok=True)
    statuses = {}
    start = time.perf_counter()
    for stage, sentinel, action in _stage_plan(config, paths):
        statuses[stage] = _run_stage(stage, sentinel, action)
    _write_record(config, paths, statuses)
    log_record('run', status='done', seconds=time.perf_counter() - start,
               **statuses)
    return statuses


def run_pipeline(config):
    """Run the pipeline and return the process exit status.

    Parameters
    ----------
    config : dict
        configuration from load_config

    Returns
    -------
    int
        0 on success, otherwise the code of the failure class
    """
    try:
        execute(config)
    except (ConfigError, DataError, StageError) as err:
        stage = getattr(err, 'stage', None)
        log_record('run', level='error', status='failed',
                   stage=stage or '-', error=str(err))
        return exit_code(err)
    return parameters.exit_codes['ok']
