"""Command-line interface.

Subcommands run single stages on explicit files, ``demo`` writes a
synthetic basin with its configuration and ``run`` drives the whole
pipeline from a configuration file.  Exit status is 0 on success, 2 for
configuration errors, 3 for missing or unreadable data and 4 when a stage
fails.
"""

import argparse
import os

from . import log, parameters, __version__
from . import pipeline, synthetic

__all__ = ["build_parser", "main"]


def build_parser():
    parser = argparse.ArgumentParser(
        prog='aquamosaic',
        description='Water-surface mosaics from SAR backscatter.')
    parser.add_argument('--version', action='version', version=__version__)
    parser.add_argument('--config', default=None,
                        help='YAML pipeline configuration')
    parser.add_argument('--workers', type=int, default=None,
                        help='worker threads for prediction and screening')
    parser.add_argument('--seed', type=int, default=None,
                        help='random seed')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('shade', help='terrain shade mask from a DEM')
    p.add_argument('--dem', required=True, help='DEM raster')
    p.add_argument('--factor', type=int, default=None,
                   help='DEM aggregation factor')
    p.add_argument('--threshold', type=float, default=None,
                   help='slope threshold in degrees')
    p.add_argument('--override', default=None,
                   help='mask of pixels never shaded')
    p.add_argument('-o', '--output', required=True, help='shade mask file')

    p = sub.add_parser('train', help='train the U-Net')
    p.add_argument('--pairs', required=True, help='pairs index CSV')
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--batch', type=int, default=None, help='batch size')
    p.add_argument('--history', default=None,
                   help='history CSV (default: next to the weights)')
    p.add_argument('-o', '--output', required=True, help='weights file')

    p = sub.add_parser('predict', help='predict and mosaic a manifest')
    p.add_argument('--manifest', required=True, help='scene manifest CSV')
    p.add_argument('--weights', required=True, help='weights file')
    p.add_argument('--shade', default=None, help='shade mask file')
    p.add_argument('--cadence', type=int, default=None,
                   help='window length in days')
    p.add_argument('--epoch-start', default=None,
                   help='start of the first window (YYYY-MM-DD)')
    p.add_argument('-o', '--output', required=True, help='output directory')

    p = sub.add_parser('qa', help='screen mosaics for cloud artifacts')
    p.add_argument('--mosaics', required=True, help='mosaic directory')
    p.add_argument('--min-water-frac', type=float, default=None)
    p.add_argument('--top-k', type=int, default=None)
    p.add_argument('--min-score', type=float, default=None)
    p.add_argument('--tile-size', type=int, default=None,
                   help='screening tile side in pixels')
    p.add_argument('--mode', choices=('auto', 'report-only'), default=None)
    p.add_argument('-o', '--output', required=True,
                   help='directory for the screened series and audit log')

    p = sub.add_parser('compare', help='accuracy against reference masks')
    p.add_argument('--pred', required=True, help='mosaic directory')
    p.add_argument('--ref', required=True, help='reference mask directory')
    p.add_argument('--classes', default=None, help='class raster')
    p.add_argument('--labels', default=None, help='class label CSV')
    p.add_argument('--factor', type=int, default=None,
                   help='aggregation factor before counting')
    p.add_argument('--rule', choices=('majority', 'any-water'), default=None)
    p.add_argument('-o', '--output', required=True, help='report directory')

    p = sub.add_parser('stats', help='water area series and gauge '
                       'correlation')
    p.add_argument('--mosaics', required=True, help='mosaic directory')
    p.add_argument('--gauge', default=None, help='gauge CSV (date,level_m)')
    p.add_argument('-o', '--output', required=True, help='stats directory')

    p = sub.add_parser('demo', help='write a synthetic basin')
    p.add_argument('--n-dates', type=int,
                   default=parameters.synthetic['n_dates'])
    p.add_argument('--size', type=int, default=parameters.synthetic['size'])
    p.add_argument('--n-train', type=int,
                   default=parameters.synthetic['n_train'])
    p.add_argument('-o', '--output', required=True, help='basin directory')

    sub.add_parser('run', help='run the pipeline from --config')
    return parser


def _overrides(args):
    """Configuration values given on the command line."""
    names = dict(workers='workers', seed='seed', factor=None,
                 threshold='shade_threshold_deg', epochs='train_epochs',
                 batch='train_batch_size', cadence='cadence_days',
                 epoch_start='epoch_start',
                 min_water_frac='qa_min_water_frac', top_k='qa_top_k',
                 min_score='qa_min_score', tile_size='mosaic_tile_px',
                 mode='qa_mode', rule='compare_rule')
    if args.command == 'shade':
        names['factor'] = 'shade_factor'
    elif args.command == 'compare':
        names['factor'] = 'compare_factor'
    out = {}
    for attr, key in names.items():
        value = getattr(args, attr, None)
        if key is not None and value is not None:
            out[key] = value
    return out


def _dispatch(args):
    if args.command == 'demo':
        seed = 0 if args.seed is None else args.seed
        basin = synthetic.gen_synthetic_basin(args.output, seed=seed,
                                              n_dates=args.n_dates,
                                              size=args.size,
                                              n_train=args.n_train)
        log.info(f'wrote synthetic basin; run it with '
                 f'aquamosaic --config {basin.config} run')
        return parameters.exit_codes['ok']
    if args.command == 'run' and args.config is None:
        raise pipeline.ConfigError('run needs --config')
    config = pipeline.load_config(args.config, _overrides(args))
    if args.command == 'run':
        return pipeline.run_pipeline(config)
    if args.command == 'shade':
        pipeline.run_shade(args.dem, args.output, config['shade_factor'],
                           config['shade_threshold_deg'], args.override)
    elif args.command == 'train':
        history = args.history or os.path.splitext(args.output)[0] + '.csv'
        pipeline.run_train(args.pairs, args.output, history, config)
    elif args.command == 'predict':
        pipeline.run_predict(args.manifest, args.weights, args.output,
                             config, args.shade)
    elif args.command == 'qa':
        pipeline.run_qa(args.mosaics, args.output, args.output, config)
    elif args.command == 'compare':
        pipeline.run_compare(args.pred, args.ref, args.output,
                             config['compare_factor'],
                             config['compare_rule'], args.classes,
                             args.labels)
    elif args.command == 'stats':
        pipeline.run_stats(args.mosaics, args.output, args.gauge,
                           config['gauge_window_days'])
    return parameters.exit_codes['ok']


def main(argv=None):
    """Parse arguments, run the command and return the exit status."""
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as err:
        code = pipeline.exit_code(err)
        if code == parameters.exit_codes['stage'] and isinstance(
                err, ValueError):
            code = parameters.exit_codes['data']
        log.error(f'{args.command}: {err}')
        return code
