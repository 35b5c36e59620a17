"""View-generating transforms and their replay on feature maps.

The default augmentation is an integer (dx, dy) shift plus optional flips.
The exact same operation is applied to input tiles and, later, to the
untransformed branch's output features, so per-pixel features of the two
branches line up on the overlap region.  Affine and photometric transforms
exist only for the ablation configuration; the default pipeline never uses
them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError


@dataclass(frozen=True)
class ShiftSpec:
    dx: int
    dy: int
    flip_h: bool = False
    flip_v: bool = False

    @property
    def is_identity(self) -> bool:
        return self.dx == 0 and self.dy == 0 and not self.flip_h and not self.flip_v


def sample_shift(rng: np.random.Generator, max_shift: int, enable_flips: bool) -> ShiftSpec:
    dx = int(rng.integers(-max_shift, max_shift + 1))
    dy = int(rng.integers(-max_shift, max_shift + 1))
    fh = bool(rng.integers(0, 2)) if enable_flips else False
    fv = bool(rng.integers(0, 2)) if enable_flips else False
    return ShiftSpec(dx=dx, dy=dy, flip_h=fh, flip_v=fv)


def apply_shift(x: np.ndarray, spec: ShiftSpec, fill: float = 0.0) -> np.ndarray:
    """out[..., i, j] = x_flipped[..., i - dy, j - dx], fill outside.

    Flips are applied before the shift so one recorded spec replays
    identically on inputs and feature maps.  Works on any [..., H, W] array;
    integer arrays replay exactly (used to transport segment-id maps).
    """
    h, w = x.shape[-2], x.shape[-1]
    if abs(spec.dx) >= w or abs(spec.dy) >= h:
        raise ConfigError(f"shift {spec.dx, spec.dy} out of range for {h}x{w}")
    if spec.flip_h:
        x = x[..., :, ::-1]
    if spec.flip_v:
        x = x[..., ::-1, :]
    out = np.full_like(x, fill)
    dy, dx = spec.dy, spec.dx
    src_i = slice(max(0, -dy), h - max(0, dy))
    src_j = slice(max(0, -dx), w - max(0, dx))
    dst_i = slice(max(0, dy), h - max(0, -dy))
    dst_j = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_i, dst_j] = x[..., src_i, src_j]
    return np.ascontiguousarray(out)


def invert(spec: ShiftSpec) -> ShiftSpec:
    """Spec whose application undoes `spec` on the overlap region.

    apply_shift does flips first, and a horizontal flip conjugates a dx
    shift into -dx (same for vertical/dy), so the inverse keeps the flips
    and negates the shift in the flipped frame.
    """
    return ShiftSpec(
        dx=spec.dx if spec.flip_h else -spec.dx,
        dy=spec.dy if spec.flip_v else -spec.dy,
        flip_h=spec.flip_h,
        flip_v=spec.flip_v,
    )


def overlap_mask(spec: ShiftSpec, h: int, w: int) -> np.ndarray:
    """True where apply_shift introduced no fill pixels in either view."""
    if abs(spec.dx) >= w or abs(spec.dy) >= h:
        raise ConfigError(f"shift {spec.dx, spec.dy} out of range for {h}x{w}")
    mask = np.zeros((h, w), dtype=bool)
    dy, dx = spec.dy, spec.dx
    mask[max(0, dy):h - max(0, -dy), max(0, dx):w - max(0, -dx)] = True
    return mask


# --------------------------------------------------------------------------
# ablation transforms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineParams:
    angle: float = 0.0    # radians, about the tile center
    scale: float = 1.0
    shear: float = 0.0


def _affine_matrix(params: AffineParams) -> np.ndarray:
    c, s = np.cos(params.angle), np.sin(params.angle)
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, params.shear], [0.0, 1.0]])
    m = params.scale * rot @ shear
    if abs(np.linalg.det(m)) < 1e-8:
        raise ConfigError(f"singular affine matrix for {params}")
    return m


def apply_affine(x: np.ndarray, params: AffineParams, fill: float = 0.0) -> np.ndarray:
    """Affine warp about the tile center with bilinear resampling.

    Identity parameters return the input unchanged.  The same call replays
    the transform on feature maps; `affine_valid_mask` gives the pixels that
    were sampled entirely inside the source tile.
    """
    if params == AffineParams():
        return x.copy()
    m = _affine_matrix(params)  # forward map in (row, col) coordinates
    h, w = x.shape[-2], x.shape[-1]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    # ndimage pulls: input_coord = matrix @ output_coord + offset
    minv = np.linalg.inv(m)
    offset = center - minv @ center
    flat = x.reshape(-1, h, w)
    out = np.stack(
        [
            ndimage.affine_transform(
                ch.astype(np.float64), minv, offset=offset, order=1,
                mode="constant", cval=fill,
            ).astype(x.dtype)
            for ch in flat
        ]
    )
    return out.reshape(x.shape)


def affine_valid_mask(params: AffineParams, h: int, w: int) -> np.ndarray:
    ones = np.ones((h, w), dtype=np.float32)
    warped = apply_affine(ones, params, fill=0.0)
    return warped > 0.999


def inverse_affine(params: AffineParams) -> AffineParams:
    # exact in this parameterization only for shear = 0; the ablation draws
    # shear small enough that the residual stays below resampling error
    return AffineParams(angle=-params.angle, scale=1.0 / params.scale, shear=-params.shear)


@dataclass(frozen=True)
class PhotometricParams:
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    noise_seed: int = 0


def apply_photometric(x: np.ndarray, params: PhotometricParams) -> np.ndarray:
    """Blur/noise on pixel values only; geometry (and features) untouched."""
    out = x.astype(np.float32, copy=True)
    if params.blur_sigma > 0:
        h, w = x.shape[-2], x.shape[-1]
        flat = out.reshape(-1, h, w)
        for i in range(flat.shape[0]):
            flat[i] = ndimage.gaussian_filter(flat[i], sigma=params.blur_sigma)
    if params.noise_sigma > 0:
        rng = np.random.default_rng(params.noise_seed)
        out += params.noise_sigma * rng.standard_normal(out.shape).astype(np.float32)
    return out
