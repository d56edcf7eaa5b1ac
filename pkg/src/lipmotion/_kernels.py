"""Raster inner loops: supersampled polygon coverage and anti-aliased disc splats.

Each kernel has a numba ``@njit`` version and a pure-numpy version with
identical results. ``LIPMOTION_NUMBA=0`` in the environment selects the numpy
path (also used automatically when numba is not importable).
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("LIPMOTION_NUMBA", "1") not in ("0", "false", "no")

SUPERSAMPLE = 4


def _bbox(poly, h, w):
    x0 = max(int(np.floor(poly[:, 0].min())), 0)
    x1 = min(int(np.ceil(poly[:, 0].max())) + 1, w)
    y0 = max(int(np.floor(poly[:, 1].min())), 0)
    y1 = min(int(np.ceil(poly[:, 1].max())) + 1, h)
    return x0, x1, y0, y1


# ---- numpy ---------------------------------------------------------------


def polygon_coverage_numpy(poly, h, w, ss=SUPERSAMPLE):
    """Fraction of each pixel covered by ``poly`` (pixel units, x right, y down)."""
    poly = np.asarray(poly, dtype=np.float64)
    out = np.zeros((h, w), dtype=np.float64)
    if poly.shape[0] < 3:
        return out
    x0, x1, y0, y1 = _bbox(poly, h, w)
    if x0 >= x1 or y0 >= y1:
        return out
    offs = (np.arange(ss) + 0.5) / ss
    sx = (np.arange(x0, x1)[:, None] + offs[None, :]).ravel()
    sy = (np.arange(y0, y1)[:, None] + offs[None, :]).ravel()
    px, py = np.meshgrid(sx, sy)
    inside = np.zeros(px.shape, dtype=bool)
    n = poly.shape[0]
    for i in range(n):
        xa, ya = poly[i]
        xb, yb = poly[(i + 1) % n]
        if ya == yb:
            continue
        crosses = (ya > py) != (yb > py)
        xint = (xb - xa) * (py - ya) / (yb - ya) + xa
        inside ^= crosses & (px < xint)
    cov = inside.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    out[y0:y1, x0:x1] = cov
    return out


def splat_discs_numpy(points, h, w, radius=1.0):
    """Max-combined anti-aliased discs of ``radius`` pixels at ``points``."""
    out = np.zeros((h, w), dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    reach = int(np.ceil(radius + 1.0))
    for cx, cy in pts:
        ix, iy = int(np.floor(cx)), int(np.floor(cy))
        xs = np.arange(max(ix - reach, 0), min(ix + reach + 1, w))
        ys = np.arange(max(iy - reach, 0), min(iy + reach + 1, h))
        if xs.size == 0 or ys.size == 0:
            continue
        dx = xs[None, :] + 0.5 - cx
        dy = ys[:, None] + 0.5 - cy
        val = np.clip(radius + 0.5 - np.sqrt(dx * dx + dy * dy), 0.0, 1.0)
        block = out[ys[0]: ys[-1] + 1, xs[0]: xs[-1] + 1]
        np.maximum(block, val, out=block)
    return out


# ---- numba ---------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def polygon_coverage_numba(poly, h, w, ss=SUPERSAMPLE):
        out = np.zeros((h, w), dtype=np.float64)
        n = poly.shape[0]
        if n < 3:
            return out
        x0 = max(int(np.floor(poly[:, 0].min())), 0)
        x1 = min(int(np.ceil(poly[:, 0].max())) + 1, w)
        y0 = max(int(np.floor(poly[:, 1].min())), 0)
        y1 = min(int(np.ceil(poly[:, 1].max())) + 1, h)
        inv = 1.0 / (ss * ss)
        for r in range(y0, y1):
            for c in range(x0, x1):
                hits = 0
                for sy in range(ss):
                    py = r + (sy + 0.5) / ss
                    for sx in range(ss):
                        px = c + (sx + 0.5) / ss
                        inside = False
                        for i in range(n):
                            xa = poly[i, 0]
                            ya = poly[i, 1]
                            j = i + 1 if i + 1 < n else 0
                            xb = poly[j, 0]
                            yb = poly[j, 1]
                            if ya == yb:
                                continue
                            if (ya > py) != (yb > py):
                                xint = (xb - xa) * (py - ya) / (yb - ya) + xa
                                if px < xint:
                                    inside = not inside
                        if inside:
                            hits += 1
                out[r, c] = hits * inv
        return out

    @numba.njit(cache=True, nogil=True)
    def splat_discs_numba(points, h, w, radius=1.0):
        out = np.zeros((h, w), dtype=np.float64)
        reach = int(np.ceil(radius + 1.0))
        for k in range(points.shape[0]):
            cx = points[k, 0]
            cy = points[k, 1]
            ix = int(np.floor(cx))
            iy = int(np.floor(cy))
            for r in range(max(iy - reach, 0), min(iy + reach + 1, h)):
                dy = r + 0.5 - cy
                for c in range(max(ix - reach, 0), min(ix + reach + 1, w)):
                    dx = c + 0.5 - cx
                    v = radius + 0.5 - np.sqrt(dx * dx + dy * dy)
                    if v > 1.0:
                        v = 1.0
                    if v > out[r, c]:
                        out[r, c] = v
        return out

else:  # pragma: no cover
    polygon_coverage_numba = polygon_coverage_numpy
    splat_discs_numba = splat_discs_numpy


def polygon_coverage(poly, h, w, ss=SUPERSAMPLE):
    poly = np.ascontiguousarray(poly, dtype=np.float64)
    if USE_NUMBA:
        return polygon_coverage_numba(poly, h, w, ss)
    return polygon_coverage_numpy(poly, h, w, ss)


def splat_discs(points, h, w, radius=1.0):
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    if USE_NUMBA:
        return splat_discs_numba(pts, h, w, float(radius))
    return splat_discs_numpy(pts, h, w, radius)
