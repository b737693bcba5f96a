"""Terrain-shade exclusion masks from a digital elevation model.

Radar shadow behind steep slopes is as dark as open water, so steep terrain
is excluded from the water masks.  The chain is:

1. aggregate the DEM to a coarser grid keeping the block minimum,
2. compute the Horn eight-neighbour slope,
3. flag slopes strictly over the threshold,
4. fill holes in the flagged regions,
5. replace each 8-connected region by its convex hull,
6. release pixels listed in an optional user override,
7. project onto the grid of the water masks.

All steps work in raster space.
"""

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

from . import parameters
from .raster import DemRaster, ShadeMask
from .util import log_record

__all__ = ["aggregate_min",
           "slope_deg",
           "threshold_slope",
           "fill_holes",
           "convex_hull_components",
           "project_mask",
           "apply_override",
           "make_shade_mask",
]

_HULL_TOL = 1e-9


def aggregate_min(dem, factor=parameters.shade['aggregate_factor']):
    """Aggregate a DEM into factor x factor blocks keeping the minimum.

    Nodata pixels are ignored; all-nodata blocks become nodata.  DEMs whose
    size is not a multiple of factor are padded with nodata.

    Parameters
    ----------
    dem : DemRaster
        elevations in meters
    factor : int
        block size

    Returns
    -------
    DemRaster
        aggregated DEM on the coarsened grid
    """
    if factor < 1:
        raise ValueError(f'factor must be >= 1, got {factor}')
    z = dem.data[0].astype('f8')
    ny, nx = z.shape
    z = np.pad(z, ((0, -ny % factor), (0, -nx % factor)),
               constant_values=np.nan)
    z = np.where(np.isnan(z), np.inf, z)
    blocks = z.reshape(z.shape[0] // factor, factor,
                       z.shape[1] // factor, factor)
    out = blocks.min(axis=(1, 3))
    out[np.isinf(out)] = np.nan
    return DemRaster(out, dem.grid.coarsened(factor))


def slope_deg(dem):
    """Slope in degrees by Horn's eight-neighbour method.

    dz/dx and dz/dy are the (1, 2, 1)-weighted differences across the 3x3
    neighbourhood divided by 8 times the cell size.  Borders use edge
    replication.

    Parameters
    ----------
    dem : DemRaster
        elevations; pixels must be square

    Returns
    -------
    np.ndarray[height, width] (float64)
        slope in [0, 90) degrees; NaN where the neighbourhood has nodata
    """
    if not np.isclose(dem.grid.pixel_size_x, dem.grid.pixel_size_y):
        raise ValueError('slope needs square pixels, got '
                         f'{dem.grid.pixel_size_x} x {dem.grid.pixel_size_y}')
    z = dem.data[0].astype('f8')
    cell = dem.grid.pixel_size_x
    dzdx = ndimage.sobel(z, axis=1, mode='nearest') / (8 * cell)
    dzdy = ndimage.sobel(z, axis=0, mode='nearest') / (8 * cell)
    return np.degrees(np.arctan(np.sqrt(dzdx ** 2 + dzdy ** 2)))


def threshold_slope(slope, grid, threshold=parameters.shade[
        'slope_threshold_deg']):
    """Flag pixels whose slope is strictly over threshold.

    Parameters
    ----------
    slope : np.ndarray[height, width]
        slope in degrees, as from slope_deg
    grid : GridRef
        grid of the slope array
    threshold : float
        slope threshold in degrees

    Returns
    -------
    ShadeMask
        1 where slope > threshold; NaN slopes are 0
    """
    with np.errstate(invalid='ignore'):
        flag = np.asarray(slope) > threshold
    return ShadeMask(flag.astype('u1'), grid)


def fill_holes(mask):
    """Set 4-connected background regions not touching the border to 1."""
    filled = ndimage.binary_fill_holes(mask.data[0].astype(bool))
    return mask.replace(data=filled.astype('u1'))


def _hull_pixels(rows, cols):
    """Pixels whose centres lie inside or on the hull of the given pixels."""
    pts = np.stack([cols, rows], axis=1).astype('f8')
    if len(pts) < 3 or np.linalg.matrix_rank(pts - pts[0]) < 2:
        # 8-connected collinear pixels already contain every lattice
        # point of their segment
        return rows, cols
    hull = ConvexHull(pts)
    r0, r1 = rows.min(), rows.max() + 1
    c0, c1 = cols.min(), cols.max() + 1
    yy, xx = np.mgrid[r0:r1, c0:c1]
    cand = np.stack([xx.ravel(), yy.ravel()], axis=1).astype('f8')
    # equations: normal . p + offset <= 0 inside
    inside = np.all(cand @ hull.equations[:, :2].T + hull.equations[:, 2]
                    <= _HULL_TOL, axis=1)
    return yy.ravel()[inside], xx.ravel()[inside]


def convex_hull_components(mask):
    """Replace each 8-connected component by its rasterized convex hull.

    Hulls of neighbouring components can touch once filled, forming larger
    components; the operation repeats until nothing changes, so the result
    is its own fixed point.

    Parameters
    ----------
    mask : ShadeMask
        binary mask

    Returns
    -------
    ShadeMask
        superset of mask in which every component is convex
    """
    out = mask.data[0].astype(bool)
    structure = np.ones((3, 3), dtype=bool)
    while True:
        labels, _ = ndimage.label(out, structure=structure)
        new = out.copy()
        for i, sl in enumerate(ndimage.find_objects(labels)):
            rows, cols = np.nonzero(labels[sl] == i + 1)
            rows = rows + sl[0].start
            cols = cols + sl[1].start
            hr, hc = _hull_pixels(rows, cols)
            new[hr, hc] = True
        if np.array_equal(new, out):
            break
        out = new
    return mask.replace(data=out.astype('u1'))


def _overlap_ranges(t_origin, t_size, n, s_origin, s_size, s_n, sign):
    """Source index ranges [lo, hi) overlapped by each target pixel."""
    start = sign * (t_origin - s_origin) / s_size + np.arange(n) * (
        t_size / s_size)
    stop = start + t_size / s_size
    lo = np.floor(start + _HULL_TOL).astype(int)
    hi = np.ceil(stop - _HULL_TOL).astype(int)
    return np.clip(lo, 0, s_n), np.clip(hi, 0, s_n)


def project_mask(mask, target):
    """Project a shade mask onto another grid of the same crs.

    A target pixel is excluded if its footprint overlaps any excluded source
    pixel; footprints outside the source are kept (0).

    Parameters
    ----------
    mask : ShadeMask
        source mask
    target : GridRef
        grid to project onto

    Returns
    -------
    ShadeMask
        mask on the target grid
    """
    src = mask.grid
    if src.crs_tag != target.crs_tag:
        raise ValueError(f'crs mismatch: {src.crs_tag!r} vs '
                         f'{target.crs_tag!r}')
    x_lo, x_hi = _overlap_ranges(target.origin_x, target.pixel_size_x,
                                 target.width, src.origin_x,
                                 src.pixel_size_x, src.width, 1)
    y_lo, y_hi = _overlap_ranges(target.origin_y, target.pixel_size_y,
                                 target.height, src.origin_y,
                                 src.pixel_size_y, src.height, -1)
    integral = np.zeros((src.height + 1, src.width + 1), dtype='i8')
    integral[1:, 1:] = np.cumsum(np.cumsum(mask.data[0] > 0, axis=0), axis=1)
    total = (integral[y_hi[:, None], x_hi[None, :]]
             - integral[y_lo[:, None], x_hi[None, :]]
             - integral[y_hi[:, None], x_lo[None, :]]
             + integral[y_lo[:, None], x_lo[None, :]])
    return ShadeMask((total > 0).astype('u1'), target)


def apply_override(mask, override):
    """Release pixels flagged in override (mask AND NOT override)."""
    if override.grid != mask.grid:
        override = project_mask(override, mask.grid)
    keep = override.data[0] > 0
    return mask.replace(data=np.where(keep, 0, mask.data[0]))


def make_shade_mask(dem, factor=parameters.shade['aggregate_factor'],
                    threshold=parameters.shade['slope_threshold_deg'],
                    override=None, target=None):
    """Run the full terrain-shade chain on a DEM.

    Parameters
    ----------
    dem : DemRaster
        elevations in meters
    factor : int
        minimum-aggregation factor
    threshold : float
        slope threshold in degrees
    override : ShadeMask or None
        pixels forced to be kept
    target : GridRef or None
        grid to project the result onto; None keeps the aggregated grid

    Returns
    -------
    ShadeMask
    """
    coarse = aggregate_min(dem, factor)
    slope = slope_deg(coarse)
    steep = threshold_slope(slope, coarse.grid, threshold)
    mask = convex_hull_components(fill_holes(steep))
    if override is not None:
        mask = apply_override(mask, override)
    log_record('shade', steep_px=int(steep.data.sum()),
               excluded_px=int(mask.data.sum()),
               max_slope_deg=float(np.nanmax(slope)) if np.any(
                   np.isfinite(slope)) else float('nan'))
    if target is not None:
        mask = project_mask(mask, target)
    return mask
