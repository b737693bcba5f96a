"""Georeferenced raster containers and grid algebra.

Every stage of aquamosaic exchanges rasters: quantized backscatter,
probabilities, water masks, elevations and terrain-shade masks.  They all
share one container, :class:`Raster`, holding a band-sequential
``(nbands, height, width)`` array tied to a :class:`GridRef`.  The typed
subclasses only fix the band count, dtype and nodata convention and check
the value domain.

Raster values are read-only after construction; every operation in this
module returns a new raster.  That makes them safe to share between worker
threads.

The on-disk container is a flat little-endian binary file::

    magic 'AQMR' | version u16 | dtype u8 | band_count u8 | width u32 |
    height u32 | nodata f64 | origin_x f64 | origin_y f64 |
    pixel_size_x f64 | pixel_size_y f64 | crs_tag_len u16 | crs_tag |
    payload | crc32(payload) u32

Rasters with no nodata value store NaN in the nodata field.
"""

import dataclasses
import math
import struct
import zlib
from collections import namedtuple

import numpy as np

from . import parameters

__all__ = ["GridRef",
           "Raster",
           "BackscatterRaster",
           "ProbabilityRaster",
           "WaterMask",
           "DemRaster",
           "ShadeMask",
           "ClassRaster",
           "Placement",
           "quantize_db",
           "dequantize",
           "retile",
           "pad_to",
           "resample_mask",
           "read_raster",
           "write_raster",
           "RasterFormatError",
           "BadMagicError",
           "UnsupportedVersionError",
           "TruncatedPayloadError",
           "ChecksumError",
]

_HEADER = struct.Struct('<4sHBBIIdddddH')
_CRC = struct.Struct('<I')
_OFFSET_TOL = 1e-6


@dataclasses.dataclass(frozen=True)
class GridRef:
    """Georeferencing of a raster: upper-left corner, pixel size, shape.

    Rows run towards decreasing map y; columns towards increasing map x.
    """
    origin_x: float
    origin_y: float
    pixel_size_x: float
    pixel_size_y: float
    width: int
    height: int
    crs_tag: str = ''

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f'grid must be at least 1x1, got '
                             f'{self.width}x{self.height}')
        if not (self.pixel_size_x > 0 and self.pixel_size_y > 0):
            raise ValueError('pixel sizes must be strictly positive, got '
                             f'{self.pixel_size_x}, {self.pixel_size_y}')
        object.__setattr__(self, 'width', int(self.width))
        object.__setattr__(self, 'height', int(self.height))
        object.__setattr__(self, 'origin_x', float(self.origin_x))
        object.__setattr__(self, 'origin_y', float(self.origin_y))
        object.__setattr__(self, 'pixel_size_x', float(self.pixel_size_x))
        object.__setattr__(self, 'pixel_size_y', float(self.pixel_size_y))

    @property
    def shape(self):
        """(height, width)"""
        return (self.height, self.width)

    @property
    def pixel_area_m2(self):
        return self.pixel_size_x * self.pixel_size_y

    def composable(self, other):
        """True if other lies in the same mosaic space as this grid.

        That needs the same crs_tag and pixel sizes, and origins that differ
        by whole pixels.
        """
        if (self.crs_tag != other.crs_tag
                or not math.isclose(self.pixel_size_x, other.pixel_size_x)
                or not math.isclose(self.pixel_size_y, other.pixel_size_y)):
            return False
        dx = (other.origin_x - self.origin_x) / self.pixel_size_x
        dy = (self.origin_y - other.origin_y) / self.pixel_size_y
        return (abs(dx - round(dx)) < _OFFSET_TOL
                and abs(dy - round(dy)) < _OFFSET_TOL)

    def offset_of(self, other):
        """Pixel offset (column, row) of other's upper-left corner.

        Parameters
        ----------
        other : GridRef
            a grid composable with this one

        Returns
        -------
        (int, int)
            column and row of other's origin in this grid's pixel frame
        """
        if not self.composable(other):
            raise ValueError('grids are not composable')
        dx = (other.origin_x - self.origin_x) / self.pixel_size_x
        dy = (self.origin_y - other.origin_y) / self.pixel_size_y
        return int(round(dx)), int(round(dy))

    def subgrid(self, x0, y0, width, height):
        """Grid of the window starting at pixel (x0, y0).

        The window may extend beyond this grid.
        """
        return dataclasses.replace(
            self,
            origin_x=self.origin_x + x0 * self.pixel_size_x,
            origin_y=self.origin_y - y0 * self.pixel_size_y,
            width=width, height=height)

    def coarsened(self, factor):
        """Grid with pixels factor times larger covering this grid."""
        return dataclasses.replace(
            self,
            pixel_size_x=self.pixel_size_x * factor,
            pixel_size_y=self.pixel_size_y * factor,
            width=-(-self.width // factor),
            height=-(-self.height // factor))


def _same_nodata(a, b):
    if a is None or b is None:
        return a is None and b is None
    if np.isnan(a) or np.isnan(b):
        return bool(np.isnan(a) and np.isnan(b))
    return a == b


class Raster:
    """Read-only band-sequential raster tied to a grid.

    Parameters
    ----------
    data : array_like[nbands, height, width] or [height, width]
        pixel values; copied and frozen
    grid : GridRef
        georeferencing; its shape must match data
    nodata : float or None
        value marking missing pixels; NaN for float rasters, None if the
        raster has no nodata
    timestamp : np.datetime64 or str or None
        acquisition or window date, if any
    """
    nbands = None
    dtype = None
    default_nodata = None

    def __init__(self, data, grid, nodata=None, timestamp=None):
        data = np.array(data, dtype=self.dtype)
        if data.ndim == 2:
            data = data[None, :, :]
        if data.ndim != 3:
            raise ValueError(f'raster data must be 2D or 3D, got {data.ndim}D')
        if data.shape[1:] != grid.shape:
            raise ValueError(f'data shape {data.shape[1:]} does not match '
                             f'grid shape {grid.shape}')
        if self.nbands is not None and data.shape[0] != self.nbands:
            raise ValueError(f'{type(self).__name__} needs {self.nbands} '
                             f'bands, got {data.shape[0]}')
        if nodata is None:
            nodata = self.default_nodata
        data.flags.writeable = False
        self.data = data
        self.grid = grid
        self.nodata = nodata
        if timestamp is not None:
            timestamp = np.datetime64(timestamp, 'D')
        self.timestamp = timestamp
        self._check_values()

    def _check_values(self):
        pass

    @property
    def shape(self):
        return self.data.shape

    @property
    def valid(self):
        """Boolean (height, width) map of pixels valid in every band."""
        if self.nodata is None:
            return np.ones(self.grid.shape, dtype=bool)
        if np.isnan(self.nodata):
            return ~np.any(np.isnan(self.data), axis=0)
        return ~np.any(self.data == self.nodata, axis=0)

    def band(self, i=0):
        return self.data[i]

    def replace(self, data=None, grid=None, timestamp=None):
        """New raster of the same type with some fields replaced."""
        return type(self)(self.data if data is None else data,
                          self.grid if grid is None else grid,
                          nodata=self.nodata,
                          timestamp=(self.timestamp if timestamp is None
                                     else timestamp))

    def crop(self, x0, y0, width, height):
        """Window of this raster; the window must lie inside the raster."""
        if (x0 < 0 or y0 < 0 or x0 + width > self.grid.width
                or y0 + height > self.grid.height):
            raise ValueError('crop window extends beyond raster')
        return self.replace(
            data=self.data[:, y0:y0 + height, x0:x0 + width],
            grid=self.grid.subgrid(x0, y0, width, height))

    def fill_value(self):
        """Value used for padding: nodata if defined, else 0."""
        return 0 if self.nodata is None else self.nodata

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        if (self.grid != other.grid or self.data.shape != other.data.shape
                or self.data.dtype != other.data.dtype
                or not _same_nodata(self.nodata, other.nodata)):
            return False
        if self.data.dtype.kind == 'f':
            return bool(np.array_equal(self.data, other.data, equal_nan=True))
        return bool(np.array_equal(self.data, other.data))

    __hash__ = None

    def __repr__(self):
        return (f'{type(self).__name__}(shape={self.data.shape}, '
                f'dtype={self.data.dtype}, timestamp={self.timestamp})')


class BackscatterRaster(Raster):
    """Quantized two-band (VH, VV) backscatter; 0 marks nodata."""
    nbands = 2
    dtype = 'u1'
    default_nodata = parameters.backscatter_nodata

    @classmethod
    def from_db(cls, vh_db, vv_db, grid, timestamp=None):
        """Quantize decibel bands; non-finite pixels become nodata.

        Parameters
        ----------
        vh_db, vv_db : np.ndarray[height, width] (float)
            calibrated backscatter in dB
        grid : GridRef
            grid of the bands

        Returns
        -------
        BackscatterRaster
        """
        db = np.stack([np.asarray(vh_db, dtype='f8'),
                       np.asarray(vv_db, dtype='f8')])
        bad = ~np.isfinite(db)
        quantized = quantize_db(np.where(bad, 0.0, db))
        bad = np.any(bad, axis=0)
        quantized[:, bad] = parameters.backscatter_nodata
        return cls(quantized, grid, timestamp=timestamp)

    def to_db(self):
        """Dequantized dB bands, NaN where nodata."""
        out = self.data / parameters.db_scale + parameters.db_offset
        out[:, ~self.valid] = np.nan
        return out


class ProbabilityRaster(Raster):
    """Per-pixel water probability in [0, 1]; NaN marks nodata."""
    nbands = 1
    dtype = 'f4'
    default_nodata = np.nan

    def _check_values(self):
        vals = self.data[~np.isnan(self.data)]
        if vals.size and (vals.min() < 0 or vals.max() > 1):
            raise ValueError('probabilities must lie in [0, 1]')


class WaterMask(Raster):
    """Binary water mask: 0 non-water, 1 water, 255 nodata."""
    nbands = 1
    dtype = 'u1'
    default_nodata = parameters.mask_nodata

    def _check_values(self):
        bad = ((self.data != 0) & (self.data != 1)
               & (self.data != parameters.mask_nodata))
        if np.any(bad):
            raise ValueError('water mask values must be 0, 1 or 255')

    @property
    def water(self):
        """Boolean (height, width) map of water pixels."""
        return self.data[0] == 1


class DemRaster(Raster):
    """Elevation in meters; NaN marks nodata."""
    nbands = 1
    dtype = 'f4'
    default_nodata = np.nan


class ShadeMask(Raster):
    """Terrain-shade exclusion mask: 1 excluded, 0 kept; no nodata."""
    nbands = 1
    dtype = 'u1'
    default_nodata = None

    def _check_values(self):
        if np.any(self.data > 1):
            raise ValueError('shade mask must be binary')


class ClassRaster(Raster):
    """Integer class codes (e.g. wetland classes); 0 marks nodata."""
    nbands = 1
    dtype = 'u1'
    default_nodata = parameters.class_nodata


def quantize_db(x):
    """Scale decibel backscatter to the 8-bit storage range.

    Computes ``(max(-49, min(1, x)) + 50) * 5`` rounded half away from zero,
    so results lie in [5, 255] and 0 stays free for nodata.

    Parameters
    ----------
    x : float or np.ndarray
        backscatter in dB; must be finite

    Returns
    -------
    np.uint8 or np.ndarray[uint8]
        quantized values
    """
    x = np.asarray(x, dtype='f8')
    if not np.all(np.isfinite(x)):
        raise ValueError('invalid backscatter')
    scaled = ((np.clip(x, parameters.db_min, parameters.db_max)
               - parameters.db_offset) * parameters.db_scale)
    # scaled is positive, so floor(v + 0.5) rounds half away from zero
    out = np.floor(scaled + 0.5).astype('u1')
    return out[()] if out.ndim == 0 else out


def dequantize(v):
    """Decibel value of a quantized backscatter value.

    Parameters
    ----------
    v : int or np.ndarray
        quantized values in [1, 255]

    Returns
    -------
    float or np.ndarray[float]
        ``v / 5 - 50``
    """
    v = np.asarray(v)
    if np.any(v == parameters.backscatter_nodata):
        raise ValueError('nodata pixel')
    if np.any(v < 0) or np.any(v > 255):
        raise ValueError('quantized value out of range')
    out = v / parameters.db_scale + parameters.db_offset
    return out[()] if np.ndim(out) == 0 else out


Placement = namedtuple('Placement', ['x0', 'y0'])


def tile_origins(size, tile_size, overlap):
    """Origins of tiles along one axis.

    Origins advance by ``tile_size - 2 * overlap`` and continue while the
    tile's core starts inside the raster content.
    """
    stride = tile_size - 2 * overlap
    return list(range(0, max(size - 2 * overlap, 1), stride))


def retile(r, tile_size, overlap):
    """Cut a raster into overlapping square tiles.

    Parameters
    ----------
    r : Raster
        raster to cut
    tile_size : int
        tile side in pixels
    overlap : int
        border each tile shares with its neighbours; consecutive origins
        advance by tile_size - 2 * overlap

    Returns
    -------
    list[(Raster, Placement)]
        tiles in row-major order and the pixel offset of each tile's
        upper-left corner in r.  Tiles reaching past r are filled with r's
        fill value.
    """
    if overlap < 0 or tile_size <= 2 * overlap:
        raise ValueError(f'tile_size {tile_size} must exceed twice the '
                         f'overlap {overlap}')
    xs = tile_origins(r.grid.width, tile_size, overlap)
    ys = tile_origins(r.grid.height, tile_size, overlap)
    need_w = xs[-1] + tile_size
    need_h = ys[-1] + tile_size
    data = r.data
    if need_w > r.grid.width or need_h > r.grid.height:
        data = np.pad(data, ((0, 0), (0, max(need_h - r.grid.height, 0)),
                             (0, max(need_w - r.grid.width, 0))),
                      constant_values=r.fill_value())
    out = []
    for y0 in ys:
        for x0 in xs:
            tile = r.replace(
                data=data[:, y0:y0 + tile_size, x0:x0 + tile_size],
                grid=r.grid.subgrid(x0, y0, tile_size, tile_size))
            out.append((tile, Placement(x0, y0)))
    return out


def pad_to(r, target_w, target_h, border=0, fill=None):
    """Pad a raster to a target size plus a border on every side.

    Parameters
    ----------
    r : Raster
        raster to pad
    target_w, target_h : int
        size of the padded content area; at least r's size
    border : int
        extra pixels added on every side
    fill : float or None
        value of added pixels; defaults to r's nodata (0 if none)

    Returns
    -------
    Raster
        raster of size (target_h + 2 * border, target_w + 2 * border) with
        r's content at offset (border, border)
    """
    if target_w < r.grid.width or target_h < r.grid.height:
        raise ValueError(f'target {target_w}x{target_h} smaller than source '
                         f'{r.grid.width}x{r.grid.height}')
    if border < 0:
        raise ValueError('border must be non-negative')
    if fill is None:
        fill = r.fill_value()
    pad = ((0, 0), (border, target_h - r.grid.height + border),
           (border, target_w - r.grid.width + border))
    data = np.pad(r.data, pad, constant_values=fill)
    grid = r.grid.subgrid(-border, -border, target_w + 2 * border,
                          target_h + 2 * border)
    return r.replace(data=data, grid=grid)


def _blocks(a, factor, fill):
    ny, nx = a.shape
    py, px = -ny % factor, -nx % factor
    if py or px:
        a = np.pad(a, ((0, py), (0, px)), constant_values=fill)
    ny, nx = a.shape
    return a.reshape(ny // factor, factor, nx // factor, factor)


def resample_mask(m, factor, rule='majority'):
    """Aggregate a water mask into factor x factor blocks.

    Parameters
    ----------
    m : WaterMask
        mask to aggregate; padded with nodata when factor does not divide it
    factor : int
        block size, at least 1
    rule : {'majority', 'any-water'}
        'any-water': 1 if any pixel of the block is water; 'majority': 1 if
        strictly more than half of the block's valid pixels are water.
        All-nodata blocks are nodata under both rules.

    Returns
    -------
    WaterMask
        aggregated mask on the coarsened grid
    """
    if factor < 1:
        raise ValueError(f'factor must be >= 1, got {factor}')
    if rule not in ('majority', 'any-water'):
        raise ValueError(f'unknown resampling rule {rule}')
    blocks = _blocks(m.data[0], factor, parameters.mask_nodata)
    water = np.sum(blocks == 1, axis=(1, 3))
    valid = np.sum(blocks != parameters.mask_nodata, axis=(1, 3))
    if rule == 'any-water':
        out = (water > 0).astype('u1')
    else:
        out = (2 * water > valid).astype('u1')
    out[valid == 0] = parameters.mask_nodata
    return WaterMask(out, m.grid.coarsened(factor), timestamp=m.timestamp)


class RasterFormatError(ValueError):
    """Malformed raster file."""
    code = 'format error'

    def __init__(self, message=None):
        super().__init__(message or self.code)


class BadMagicError(RasterFormatError):
    code = 'bad magic'


class UnsupportedVersionError(RasterFormatError):
    code = 'unsupported version'


class TruncatedPayloadError(RasterFormatError):
    code = 'truncated payload'


class ChecksumError(RasterFormatError):
    code = 'checksum mismatch'


def to_bytes(r):
    """Serialize a raster to the container format."""
    dtype_code = {v: k for k, v in parameters.raster_dtypes.items()}
    code = dtype_code.get(r.data.dtype.str[1:])
    if code is None:
        raise ValueError(f'cannot store dtype {r.data.dtype}')
    crs = r.grid.crs_tag.encode('utf-8')
    nodata = np.nan if r.nodata is None else float(r.nodata)
    header = _HEADER.pack(
        parameters.raster_magic, parameters.raster_version, code,
        r.data.shape[0], r.grid.width, r.grid.height, nodata,
        r.grid.origin_x, r.grid.origin_y,
        r.grid.pixel_size_x, r.grid.pixel_size_y, len(crs))
    payload = np.ascontiguousarray(
        r.data, dtype='<' + parameters.raster_dtypes[code]).tobytes()
    return header + crs + payload + _CRC.pack(zlib.crc32(payload))


def from_bytes(buf, kind=None):
    """Parse the container format.

    Parameters
    ----------
    buf : bytes
        file contents
    kind : type or None
        Raster subclass to build; None picks Raster

    Returns
    -------
    Raster
    """
    if len(buf) < 4 or buf[:4] != parameters.raster_magic:
        raise BadMagicError()
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError('truncated header')
    (_, version, code, nbands, width, height, nodata, ox, oy, psx, psy,
     crslen) = _HEADER.unpack_from(buf)
    if version != parameters.raster_version:
        raise UnsupportedVersionError(f'unsupported version {version}')
    if code not in parameters.raster_dtypes:
        raise RasterFormatError(f'unsupported dtype code {code}')
    dtype = np.dtype('<' + parameters.raster_dtypes[code])
    start = _HEADER.size + crslen
    nbytes = nbands * width * height * dtype.itemsize
    if len(buf) < start + nbytes + _CRC.size:
        raise TruncatedPayloadError()
    try:
        crs = buf[_HEADER.size:start].decode('utf-8')
    except UnicodeDecodeError:
        raise RasterFormatError('crs is not valid utf-8')
    payload = buf[start:start + nbytes]
    (crc,) = _CRC.unpack_from(buf, start + nbytes)
    if crc != zlib.crc32(payload):
        raise ChecksumError()
    data = np.frombuffer(payload, dtype=dtype).reshape(nbands, height, width)
    grid = GridRef(ox, oy, psx, psy, width, height, crs)
    if np.isnan(nodata) and dtype.kind != 'f':
        nodata = None
    elif dtype.kind != 'f':
        nodata = int(nodata)
    if kind is None:
        kind = Raster
    if kind is Raster:
        return Raster(data.astype(data.dtype.newbyteorder('=')), grid,
                      nodata=nodata)
    return kind(data.astype(kind.dtype), grid, nodata=nodata)


def write_raster(r, path):
    """Write a raster to path in the container format."""
    with open(path, 'wb') as fp:
        fp.write(to_bytes(r))


def read_raster(path, kind=None):
    """Read a raster written by write_raster.

    Parameters
    ----------
    path : str or pathlib.Path
        file to read
    kind : type or None
        Raster subclass to build (e.g. WaterMask); None returns a Raster

    Returns
    -------
    Raster
    """
    with open(path, 'rb') as fp:
        return from_bytes(fp.read(), kind=kind)
