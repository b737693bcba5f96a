"""Parameters module storing constants and defaults for aquamosaic.
"""

# backscatter quantization: (clip(x, db_min, db_max) - db_offset) * db_scale
db_min = -49.0
db_max = 1.0
db_offset = -50.0
db_scale = 5

# nodata conventions
backscatter_nodata = 0
mask_nodata = 255
class_nodata = 0
# float rasters (probabilities, DEM, occurrence) use NaN

# provenance codes for composited mosaics; 1..254 index the window's scenes
provenance = dict(nodata=0, gap_filled=255, max_scenes=254)

# raster container file
raster_magic = b'AQMR'
raster_version = 1
raster_dtypes = {1: 'u1', 2: 'f4'}

# U-Net weight file
weights_magic = b'AQMW'
weights_version = 1

# U-Net presets.  The full preset is the 256-pixel, four-level
# production network; the desk preset is small enough to train on one CPU in minutes.
unet = {
    'full': dict(depth=4, base_filters=64, input_size=256),
    'desk': dict(depth=2, base_filters=8, input_size=32),
    'in_channels': 2,
    'out_channels': 1,
    'seed': 0,
}

# Adam; Keras defaults
adam = dict(learning_rate=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-7)

loss = dict(dice_smooth=1.0, bce_clip=1e-7)

probability_threshold = 0.5

training = {
    # production values: 2000 epochs at batch 32 on 1792-pixel crops retiled to 256
    'epochs': 2000,
    'batch_size': 32,
    'crop': 1792,
    'tile': 256,
    'flip_probability': 0.5,
    'queue_size': 4,
}

prediction = {
    # production: 4224-pixel sub-images with a 128-pixel border removed
    'tile': 4224,
    'border': 128,
    'batch_size': 4,
}

mosaic = {
    'cadence_days': 12,
    'epoch_start': '2022-01-01',
    'tile_size': 4096,
}

shade = {
    'aggregate_factor': 3,
    'slope_threshold_deg': 20.0,
}

qa = {
    'min_water': 500000,
    'min_water_frac': 500000 / 4096**2,
    'top_k': 5,
    'min_dry_dates': 2,
    'dry_fraction': 0.01,
    'min_score': 0.0,
}

analytics = {
    'gauge_window_days': 6,
    'resample_rule': 'majority',
}

exit_codes = dict(ok=0, config=2, data=3, stage=4)

# synthetic basin: mean backscatter (dB) per surface, speckle looks, the
# brightening of a rain cell and the acquisition layout
synthetic = {
    'water_db': dict(vh=-26.0, vv=-20.0),
    'land_db': dict(vh=-15.0, vv=-8.0),
    'shadow_db': dict(vh=-27.0, vv=-21.0),
    'looks': 5,
    'cloud_db': 14.0,
    'naive_vv_threshold_db': -14.0,
    'n_dates': 48,
    'size': 144,
    'start': '2022-07-01',
    'revisit_days': 6,
    'pixel_size': 10.0,
    'origin': (500000.0, 9800000.0),
    'crs_tag': 'EPSG:32720',
    'orbit_cover': 0.61,
    'n_train': 8,
}

# Default pipeline configuration; keys carry their units.  Paths are None
# until a config file or the command line provides them.
default_pipeline_config = {
    'manifest': None,
    'pairs': None,
    'dem': None,
    'shade_override': None,
    'references': None,
    'classes': None,
    'class_labels': None,
    'gauge': None,
    'weights': None,
    'output_dir': None,
    'cadence_days': mosaic['cadence_days'],
    'epoch_start': mosaic['epoch_start'],
    'tile_size_px': prediction['tile'],
    'border_px': prediction['border'],
    'mosaic_tile_px': mosaic['tile_size'],
    'unet_depth': unet['full']['depth'],
    'unet_base_filters': unet['full']['base_filters'],
    'unet_input_px': unet['full']['input_size'],
    'train_epochs': training['epochs'],
    'train_batch_size': training['batch_size'],
    'train_learning_rate': adam['learning_rate'],
    'train_crop_px': training['crop'],
    'shade_factor': shade['aggregate_factor'],
    'shade_threshold_deg': shade['slope_threshold_deg'],
    'qa_min_water_frac': qa['min_water_frac'],
    'qa_top_k': qa['top_k'],
    'qa_min_dry_dates': qa['min_dry_dates'],
    'qa_min_score': 0.05,
    'qa_mode': 'auto',
    'compare_factor': 1,
    'compare_rule': analytics['resample_rule'],
    'gauge_window_days': analytics['gauge_window_days'],
    'seed': 0,
    'workers': 1,
}

_path = {'type': ['string', 'null']}
_posint = {'type': 'integer', 'minimum': 1}

pipeline_config_schema = {
    'type': 'object',
    'additionalProperties': False,
    'properties': {
        'manifest': _path,
        'pairs': _path,
        'dem': _path,
        'shade_override': _path,
        'references': _path,
        'classes': _path,
        'class_labels': _path,
        'gauge': _path,
        'weights': _path,
        'output_dir': _path,
        'cadence_days': _posint,
        'epoch_start': {'type': 'string',
                        'pattern': r'^\d{4}-\d{2}-\d{2}$'},
        'tile_size_px': _posint,
        'border_px': {'type': 'integer', 'minimum': 0},
        'mosaic_tile_px': _posint,
        'unet_depth': _posint,
        'unet_base_filters': _posint,
        'unet_input_px': _posint,
        'train_epochs': _posint,
        'train_batch_size': _posint,
        'train_learning_rate': {'type': 'number', 'exclusiveMinimum': 0},
        'train_crop_px': _posint,
        'shade_factor': _posint,
        'shade_threshold_deg': {'type': 'number', 'minimum': 0,
                                'exclusiveMaximum': 90},
        'qa_min_water_frac': {'type': 'number', 'minimum': 0, 'maximum': 1},
        'qa_top_k': _posint,
        'qa_min_dry_dates': _posint,
        'qa_min_score': {'type': 'number', 'minimum': 0},
        'qa_mode': {'enum': ['auto', 'report-only']},
        'compare_factor': _posint,
        'compare_rule': {'enum': ['majority', 'any-water']},
        'gauge_window_days': {'type': 'integer', 'minimum': 0},
        'seed': {'type': 'integer', 'minimum': 0},
        'workers': _posint,
    },
}
