"""Rule-based collection of sparse, high-confidence training samples.

Per pixel the rules are evaluated in a fixed first-match-wins order using
the pixel's optical and SAR cluster memberships, the marker clusters and
the per-marker mean-index thresholds:

    water  <- S2 cluster is the top-NDWI cluster, S1 cluster is the
              lowest-backscatter cluster, and ndwi > V_ndwi
    forest <- S2 top-NDVI, S1 highest-backscatter, ndvi > V_ndvi
    grass  <- S2 top-NDVI, S1 lowest-backscatter, ndvi > V_ndvi
    urban  <- S1 highest-backscatter and bs > V_bs
    bare   <- S2 top-BI, S1 lowest-backscatter, bi > V_bi
    sparse <- S2 cluster matches the medium NDVI/BI markers and ndvi < V_ndvi
    else   -> unlabeled sentinel 255

V_x is the mean of index x over its marker cluster, computed per scene.
A single pixel has one optical cluster, so the sparse rule's two medium
markers are combined per ``medium_marker_mode``: ``"strict"`` requires the
medium-NDVI and medium-BI markers to be the same cluster (the default;
the permissive variant fires on noticeably lower-precision pixels),
``"either"`` accepts membership in either marker.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cluster import ClusterAssignment, ClusterStats, MarkerClusters
from .errors import ConfigError
from .scenes import BARE, FOREST, GRASS, SPARSE, UNLABELED, URBAN, WATER, Scene
from .spectral import IndexMaps

RULE_NAMES = ("water", "forest", "grass", "urban", "bare", "sparse")
NO_RULE = 255


@dataclass(frozen=True)
class SparseLabelMap:
    labels: np.ndarray     # [H, W] u8 class ids, 255 = unlabeled
    rule_ids: np.ndarray   # [H, W] u8 index into RULE_NAMES, 255 = none
    thresholds: dict
    rule_counts: dict

    def class_count(self, cls: int) -> int:
        return int((self.labels == cls).sum())


def collect_samples(
    scene: Scene,
    idx: IndexMaps,
    assign_s2: ClusterAssignment,
    assign_s1: ClusterAssignment,
    markers: MarkerClusters,
    stats_s2: ClusterStats,
    stats_s1: ClusterStats,
    medium_marker_mode: str = "strict",
) -> SparseLabelMap:
    h, w = scene.height, scene.width
    for name, arr in (("s2 labels", assign_s2.labels), ("s1 labels", assign_s1.labels)):
        if arr.shape != (h, w):
            raise ConfigError(f"{name} shape {arr.shape} does not match scene {h}x{w}")
    if idx.ndvi.shape != (h, w):
        raise ConfigError("index maps do not match scene shape")
    if medium_marker_mode not in ("strict", "either"):
        raise ConfigError(f"unknown medium_marker_mode {medium_marker_mode!r}")

    v_ndvi = float(stats_s2.mean_ndvi[markers.h_ndvi])
    v_ndwi = float(stats_s2.mean_ndwi[markers.h_ndwi])
    v_bi = float(stats_s2.mean_bi[markers.h_bi])
    v_bs = float(stats_s1.mean_bs[markers.h_bs])

    s2 = assign_s2.labels
    s1 = assign_s1.labels
    in_h_ndwi = s2 == markers.h_ndwi
    in_h_ndvi = s2 == markers.h_ndvi
    in_h_bi = s2 == markers.h_bi
    in_h_bs = s1 == markers.h_bs
    in_l_bs = s1 == markers.l_bs
    if medium_marker_mode == "strict":
        in_medium = (s2 == markers.m_bi) & (markers.m_bi == markers.m_ndvi)
    else:
        in_medium = (s2 == markers.m_bi) | (s2 == markers.m_ndvi)

    rules = (
        (WATER, in_h_ndwi & in_l_bs & (idx.ndwi > v_ndwi)),
        (FOREST, in_h_ndvi & in_h_bs & (idx.ndvi > v_ndvi)),
        (GRASS, in_h_ndvi & in_l_bs & (idx.ndvi > v_ndvi)),
        (URBAN, in_h_bs & (idx.bs > v_bs)),
        (BARE, in_h_bi & in_l_bs & (idx.bi > v_bi)),
        (SPARSE, in_medium & (idx.ndvi < v_ndvi)),
    )
    labels = np.full((h, w), UNLABELED, dtype=np.uint8)
    rule_ids = np.full((h, w), NO_RULE, dtype=np.uint8)
    undecided = np.ones((h, w), dtype=bool)
    for rule_id, (cls, cond) in enumerate(rules):
        fire = undecided & cond
        labels[fire] = cls
        rule_ids[fire] = rule_id
        undecided &= ~fire

    counts = {
        name: int((rule_ids == i).sum()) for i, name in enumerate(RULE_NAMES)
    }
    thresholds = {"v_ndvi": v_ndvi, "v_ndwi": v_ndwi, "v_bi": v_bi, "v_bs": v_bs}
    return SparseLabelMap(labels=labels, rule_ids=rule_ids,
                          thresholds=thresholds, rule_counts=counts)


def sparsify(labels: SparseLabelMap, cap: int, rng: np.random.Generator) -> SparseLabelMap:
    """Keep exactly `cap` pixels per class, dropping classes with fewer.

    Sampling is uniform without replacement and deterministic given the rng
    state, so a fixed seed reproduces the same sparse set.
    """
    if cap < 1:
        raise ConfigError(f"cap must be >= 1, got {cap}")
    out_labels = np.full_like(labels.labels, UNLABELED)
    out_rules = np.full_like(labels.rule_ids, NO_RULE)
    flat = labels.labels.ravel()
    for cls in np.unique(flat):
        if cls == UNLABELED:
            continue
        positions = np.flatnonzero(flat == cls)
        if len(positions) < cap:
            continue
        keep = rng.choice(positions, size=cap, replace=False)
        out_labels.ravel()[keep] = cls
        out_rules.ravel()[keep] = labels.rule_ids.ravel()[keep]
    counts = {
        name: int((out_rules == i).sum()) for i, name in enumerate(RULE_NAMES)
    }
    return SparseLabelMap(labels=out_labels, rule_ids=out_rules,
                          thresholds=dict(labels.thresholds), rule_counts=counts)


def save_pseudo_labels(dir_path: str | Path, labels: SparseLabelMap) -> None:
    """Serialize into a scene directory as pseudo.bin + pseudo_meta.json."""
    dir_path = Path(dir_path)
    (dir_path / "pseudo.bin").write_bytes(labels.labels.astype(np.uint8).tobytes(order="C"))
    meta = {
        "rule_counts": labels.rule_counts,
        "thresholds": labels.thresholds,
        "shape": list(labels.labels.shape),
    }
    (dir_path / "pseudo_meta.json").write_text(
        json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8"
    )


def load_pseudo_labels(dir_path: str | Path) -> np.ndarray:
    dir_path = Path(dir_path)
    meta = json.loads((dir_path / "pseudo_meta.json").read_text(encoding="utf-8"))
    raw = (dir_path / "pseudo.bin").read_bytes()
    return np.frombuffer(raw, dtype=np.uint8).reshape(meta["shape"]).copy()
