"""Superpixel pooling and the contrastive objectives.

The pixel-level loss contrasts per-superpixel mean features of the two
branches restricted to the view overlap; the image-level loss contrasts
per-scene encoder embeddings.  Both reduce to the same InfoNCE form: for an
anchor row, the matched positive row and the remaining rows as negatives,
scored by exp(cos/tau) and stabilized with a row-max subtraction before the
softmax (tau = 0.1 overflows float32 without it).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .augment import ShiftSpec, apply_shift
from .errors import ConfigError, DegenerateBatchError, NumericalError
from .scenes import Scene


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    superpixels_per_tile: int = 64
    slic_compactness: float = 0.5
    segment_overlap_min_frac: float = 0.5
    negatives_scope: str = "batch"           # "batch" | "image"
    weights: dict = field(default_factory=lambda: {
        "pixel": 1.0, "global": 1.0, "global_concat": 1.0,
    })

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.superpixels_per_tile < 2:
            raise ConfigError("superpixels_per_tile must be >= 2")
        if self.negatives_scope not in ("batch", "image"):
            raise ConfigError(f"unknown negatives_scope {self.negatives_scope!r}")


@dataclass(frozen=True)
class SuperpixelMap:
    labels: np.ndarray        # [H, W] int32 segment ids; -1 = outside the view
    n_segments: int
    sizes: np.ndarray         # [K] original pixel count per segment

    def __post_init__(self):
        if self.labels.max() >= self.n_segments:
            raise ConfigError("segment id out of range")


def segment_superpixels(scene_or_image: "Scene | np.ndarray", k: int,
                        compactness: float = 0.5, n_iters: int = 10) -> SuperpixelMap:
    """SLIC-style segmentation: local k-means in (color, position) space.

    Deterministic (grid seeding, no rng), returns exactly `k` nonempty,
    contiguous segments partitioning the tile.  Runs on the standardized
    optical bands; `compactness` scales the position term.
    """
    img = scene_or_image.optical if isinstance(scene_or_image, Scene) else scene_or_image
    c, h, w = img.shape
    if k > h * w:
        raise ConfigError(f"cannot make {k} segments from {h * w} pixels")
    if k < 1:
        raise ConfigError("k must be >= 1")
    if k == h * w:
        labels = np.arange(h * w, dtype=np.int32).reshape(h, w)
        return SuperpixelMap(labels, k, np.ones(k, dtype=np.int64))

    feats = img.reshape(c, -1).astype(np.float64)
    mu, sd = feats.mean(axis=1, keepdims=True), feats.std(axis=1, keepdims=True)
    feats = (feats - mu) / np.where(sd < 1e-12, 1.0, sd)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    spacing = np.sqrt(h * w / k)
    pos_scale = compactness / spacing
    color = feats.T.reshape(h, w, c)

    centers = _grid_centers(h, w, k)
    center_color = np.array([
        color[min(h - 1, int(round(cy))), min(w - 1, int(round(cx)))]
        for cy, cx in centers
    ])
    centers = centers.astype(np.float64)

    labels = np.full((h, w), -1, dtype=np.int32)
    for _ in range(n_iters):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for sid in range(k):
            cy, cx = centers[sid]
            r = int(np.ceil(2 * spacing))
            i0, i1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
            j0, j1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
            dc = ((color[i0:i1, j0:j1] - center_color[sid]) ** 2).sum(axis=-1)
            dp = (yy[i0:i1, j0:j1] - cy) ** 2 + (xx[i0:i1, j0:j1] - cx) ** 2
            d = dc + (pos_scale ** 2) * dp
            win = best[i0:i1, j0:j1]
            better = d < win
            win[better] = d[better]
            labels[i0:i1, j0:j1][better] = sid
        _assign_orphans(labels, best, color, centers, center_color, yy, xx, pos_scale)
        for sid in range(k):
            members = labels == sid
            if members.any():
                centers[sid] = (yy[members].mean(), xx[members].mean())
                center_color[sid] = color[members].mean(axis=(0))
            else:
                far = np.unravel_index(np.argmax(best), best.shape)
                centers[sid] = (float(far[0]), float(far[1]))
                center_color[sid] = color[far]
                best[far] = 0.0
    _fix_empty(labels, best, k)
    labels = _enforce_contiguity(labels, k)
    sizes = np.bincount(labels.ravel(), minlength=k).astype(np.int64)
    assert sizes.min() > 0 and labels.min() >= 0
    return SuperpixelMap(labels.astype(np.int32), k, sizes)


def _grid_centers(h: int, w: int, k: int) -> np.ndarray:
    rows = max(1, int(round(np.sqrt(k * h / w))))
    cols = int(np.ceil(k / rows))
    ys = (np.arange(rows) + 0.5) * h / rows
    xs = (np.arange(cols) + 0.5) * w / cols
    grid = [(y, x) for y in ys for x in xs]
    return np.array(grid[:k])


def _assign_orphans(labels, best, color, centers, center_color, yy, xx, pos_scale):
    orphan = labels < 0
    if not orphan.any():
        return
    oc = color[orphan]
    oy, ox = yy[orphan], xx[orphan]
    d = ((oc[:, None, :] - center_color[None]) ** 2).sum(-1) + (pos_scale ** 2) * (
        (oy[:, None] - centers[:, 0][None]) ** 2 + (ox[:, None] - centers[:, 1][None]) ** 2
    )
    labels[orphan] = d.argmin(axis=1)
    best[orphan] = d.min(axis=1)


def _fix_empty(labels: np.ndarray, best: np.ndarray, k: int) -> None:
    counts = np.bincount(labels.ravel(), minlength=k)
    for sid in np.flatnonzero(counts == 0):
        donor_px = np.unravel_index(np.argmax(best), best.shape)
        if counts[labels[donor_px]] <= 1:
            order = np.argsort(best.ravel())[::-1]
            for flat in order:
                px = np.unravel_index(flat, best.shape)
                if counts[labels[px]] > 1:
                    donor_px = px
                    break
        counts[labels[donor_px]] -= 1
        labels[donor_px] = sid
        counts[sid] = 1
        best[donor_px] = 0.0


def _enforce_contiguity(labels: np.ndarray, k: int) -> np.ndarray:
    """Keep each segment's largest connected component; absorb the rest."""
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    for _ in range(8):
        changed = False
        for sid in range(k):
            mask = labels == sid
            comp, n = ndimage.label(mask, structure=structure)
            if n <= 1:
                continue
            sizes = ndimage.sum_labels(mask, comp, index=np.arange(1, n + 1))
            keep = int(sizes.argmax()) + 1
            for other in range(1, n + 1):
                if other == keep:
                    continue
                region = comp == other
                # vote among 4-neighbor labels outside the region
                dil = ndimage.binary_dilation(region, structure=structure) & ~region
                neighbors = labels[dil]
                neighbors = neighbors[neighbors != sid]
                if len(neighbors) == 0:
                    continue
                vals, counts = np.unique(neighbors, return_counts=True)
                labels[region] = vals[counts.argmax()]
                changed = True
        if not changed:
            return labels
    return labels


def transport_superpixels(sp: SuperpixelMap, spec: ShiftSpec) -> SuperpixelMap:
    """Replay the view transform on the segment map (fill = -1 outside)."""
    moved = apply_shift(sp.labels, spec, fill=-1)
    return SuperpixelMap(moved, sp.n_segments, sp.sizes)


@dataclass(frozen=True)
class PooledFeatures:
    rows: "torch.Tensor"        # [K', d] L2-normalized segment means
    segment_ids: tuple[int, ...]
    scene_index: int = 0


def pool_over_superpixels(
    fm: "torch.Tensor",
    sp: SuperpixelMap,
    mask: np.ndarray,
    min_frac: float = 0.5,
    scene_index: int = 0,
) -> PooledFeatures:
    """Mean-pool features over each surviving segment, then L2-normalize.

    A segment survives when at least ``min_frac`` of its original pixels lie
    inside the overlap mask; only in-mask pixels enter the mean, so fill
    pixels never reach a loss.  Segments are visited in ascending id order
    for a fixed reduction order.
    """
    if fm.shape[-2:] != sp.labels.shape or mask.shape != sp.labels.shape:
        raise ConfigError("feature map, segment map and mask must share H, W")
    valid = mask & (sp.labels >= 0)
    ids = torch.from_numpy(sp.labels[valid].astype(np.int64))
    counts = np.bincount(sp.labels[valid].ravel(), minlength=sp.n_segments)
    keep = (counts > 0) & (counts >= min_frac * sp.sizes)
    if not keep.any():
        raise DegenerateBatchError("no superpixel survives the overlap mask")
    feats = fm[..., torch.from_numpy(valid)].T  # [n_valid, d]
    sums = fm.new_zeros((sp.n_segments, fm.shape[0]))
    sums = sums.index_add(0, ids, feats)
    keep_t = torch.from_numpy(keep)
    rows = sums[keep_t] / torch.from_numpy(counts[keep]).to(fm.dtype)[:, None]
    norms = rows.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return PooledFeatures(rows=rows / norms,
                          segment_ids=tuple(int(i) for i in np.flatnonzero(keep)),
                          scene_index=scene_index)


# --------------------------------------------------------------------------
# contrastive scores and losses
# --------------------------------------------------------------------------

def pair_score(f1: np.ndarray, f2: np.ndarray, tau: float) -> float:
    """exp(cos(f1, f2) / tau), the similarity score of one candidate pair."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    n1, n2 = np.linalg.norm(f1), np.linalg.norm(f2)
    if n1 == 0.0 or n2 == 0.0:
        raise NumericalError("pair_score of a zero-norm vector")
    return float(np.exp(float(f1 @ f2) / (n1 * n2) / tau))


def info_nce(
    anchors: "torch.Tensor | np.ndarray",
    positives: "torch.Tensor | np.ndarray",
    tau: float,
    groups: "np.ndarray | None" = None,
) -> "torch.Tensor":
    """Mean over anchors of -log(score(a_i, p_i) / sum_j score(a_i, p_j)).

    Candidates for anchor i are all rows of `positives` (its own row is the
    positive).  With `groups`, candidates are restricted to rows of the same
    group (per-image negatives).  Stabilized by subtracting the row max of
    cos/tau before exponentiation.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    a = torch.as_tensor(anchors)
    p = torch.as_tensor(positives)
    if a.ndim != 2 or a.shape != p.shape:
        raise ConfigError(f"anchors/positives must be matching [N, d], got {a.shape} {p.shape}")
    n = a.shape[0]
    if n < 2:
        raise DegenerateBatchError("info_nce needs at least 2 pairs")
    a = a / a.norm(dim=1, keepdim=True).clamp_min(1e-12)
    p = p / p.norm(dim=1, keepdim=True).clamp_min(1e-12)
    logits = (a @ p.T) / tau
    if groups is not None:
        groups = np.asarray(groups)
        if len(groups) != n:
            raise ConfigError("groups must label every row")
        same = torch.from_numpy(groups[:, None] == groups[None, :])
        if (same.sum(dim=1) < 2).any():
            raise DegenerateBatchError("a group has fewer than 2 pairs")
        logits = logits.masked_fill(~same, float("-inf"))
    logits = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_denominator = torch.logsumexp(logits, dim=1)
    return (log_denominator - logits.diagonal()).mean()


def composite_loss(
    fusion_mode: str,
    dense_anchor: "torch.Tensor",
    dense_positive: "torch.Tensor",
    global_pairs: dict,
    cfg: LossConfig,
    dense_groups: "np.ndarray | None" = None,
) -> tuple["torch.Tensor", dict]:
    """Weighted sum of the mode's InfoNCE terms.

    pixef/pixlf: pixel term + one global term; pixif: pixel term + the
    cross-modal global term + the concatenated-embedding global term;
    mcl: global term only.  Missing terms for the mode raise ConfigError.
    """
    required = {
        "pixef": ("pixel", "global"),
        "pixlf": ("pixel", "global"),
        "pixif": ("pixel", "global", "global_concat"),
        "mcl": ("global",),
    }
    if fusion_mode not in required:
        raise ConfigError(f"unknown fusion mode {fusion_mode!r}")
    parts = {}
    groups = dense_groups if cfg.negatives_scope == "image" else None
    for term in required[fusion_mode]:
        weight = cfg.weights.get(term, 1.0)
        if term == "pixel":
            if dense_anchor is None:
                raise ConfigError("pixel term requires pooled dense features")
            if weight != 0.0:
                parts[term] = weight * info_nce(dense_anchor, dense_positive, cfg.tau, groups)
            else:
                parts[term] = dense_anchor.sum() * 0.0
        else:
            if term not in global_pairs:
                raise ConfigError(f"{fusion_mode} requires global term {term!r}")
            ga, gp = global_pairs[term]
            parts[term] = weight * info_nce(ga, gp, cfg.tau) if weight != 0.0 else ga.sum() * 0.0
    total = sum(parts.values())
    return total, {k: float(v.detach()) for k, v in parts.items()}
