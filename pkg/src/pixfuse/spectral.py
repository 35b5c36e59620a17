"""Spectral index images (NDVI, NDWI, BI) and the SAR backscatter summary.

The index formulas are the standard ones: NDVI = (nir - red)/(nir + red),
NDWI (McFeeters) = (green - nir)/(green + nir),
BI = ((swir + red) - (nir + blue)) / ((swir + red) + (nir + blue)),
and BS is the arithmetic mean of the VV and VH channels in dB.
Pixels with a zero denominator get index 0 instead of NaN so downstream
clustering never sees non-finite values; the count is logged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .scenes import Scene

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IndexMaps:
    ndvi: np.ndarray
    ndwi: np.ndarray
    bi: np.ndarray
    bs: np.ndarray


def _safe_ratio(num: np.ndarray, den: np.ndarray, name: str) -> np.ndarray:
    zero = den == 0
    n_zero = int(zero.sum())
    if n_zero:
        log.debug("%s: %d pixels with zero denominator set to 0", name, n_zero)
    out = np.zeros_like(num, dtype=np.float32)
    np.divide(num, den, out=out, where=~zero)
    return out


def compute_indices(scene: Scene) -> IndexMaps:
    bm = scene.band_map
    try:
        blue = scene.optical[bm.blue].astype(np.float32)
        green = scene.optical[bm.green].astype(np.float32)
        red = scene.optical[bm.red].astype(np.float32)
        nir = scene.optical[bm.nir].astype(np.float32)
        swir = scene.optical[bm.swir].astype(np.float32)
    except IndexError as exc:
        raise ConfigError(f"band_map does not fit optical tensor: {exc}") from exc

    ndvi = _safe_ratio(nir - red, nir + red, "ndvi")
    ndwi = _safe_ratio(green - nir, green + nir, "ndwi")
    bright = swir + red
    dark = nir + blue
    bi = _safe_ratio(bright - dark, bright + dark, "bi")
    bs = scene.sar.mean(axis=0).astype(np.float32)
    return IndexMaps(ndvi=ndvi, ndwi=ndwi, bi=bi, bs=bs)
