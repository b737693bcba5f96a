"""aquamosaic: water-surface mosaics from dual-polarization SAR backscatter.

aquamosaic turns time-stamped VH/VV backscatter rasters into per-date water
masks with a U-Net written directly in numpy, composites them into
fixed-cadence mosaics with temporal gap-filling, removes terrain shadows
derived from a DEM, screens out cloud-artifact dates, and reports
occurrence, water area time series, gauge correlation and accuracy
against reference masks.
"""
# Licensed under a 3-clause BSD style license - see LICENSE.rst

from importlib.metadata import version, PackageNotFoundError
import logging

log = logging.getLogger(__name__)
logging.basicConfig(format='%(asctime)s %(levelname)-8s %(message)s',
                    datefmt='%Y-%m-%d %H:%M:%S', level=logging.INFO)
log.setLevel('INFO')

try:
    __version__ = version(__name__)
except PackageNotFoundError:  # running from a source checkout
    __version__ = '0.0.0'
