"""Training phases, segmentation metrics and gradient checking.

Phases: self-supervised pretraining, the linear protocol on frozen
features, and two-step self-training (sparse pseudo labels -> linear
classifier -> dense prediction -> full fine-tune).  Desk-scale defaults keep
every phase CPU-feasible; the named "fullscale" preset in `config` restores
the full-scale reference hyperparameters for users with real data and hardware.

Determinism: every phase reseeds torch/numpy from its TrainConfig.  With
PIXFUSE_DETERMINISTIC=1 (or deterministic=True) torch is switched to
deterministic algorithms on a single thread, making checkpoints and metric
files byte-identical across reruns.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .augment import (
    AffineParams, PhotometricParams, ShiftSpec, affine_valid_mask,
    apply_affine, apply_photometric, apply_shift, overlap_mask, sample_shift,
)
from .cluster import cluster_stats, overcluster_scene, select_markers
from .contrastive import (
    LossConfig, SuperpixelMap, composite_loss, pool_over_superpixels,
    segment_superpixels, transport_superpixels,
)
from .errors import ConfigError, DegenerateBatchError, EvalError, PipelineError
from .fusionnet import NetworkConfig, build_network, load_checkpoint, save_checkpoint
from .pseudolabel import collect_samples, sparsify
from .scenes import UNLABELED, ClassScheme, Scene
from .spectral import compute_indices

log = logging.getLogger(__name__)


def set_determinism(seed: int, deterministic: bool | None = None) -> bool:
    if deterministic is None:
        deterministic = os.environ.get("PIXFUSE_DETERMINISTIC", "") == "1"
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    return deterministic


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"       # pretrain | linear | selftrain1 | selftrain2-finetune
    optimizer: str = "adam"
    lr: float = 3e-4
    weight_decay: float = 4e-4
    momentum: float = 0.9         # SGD momentum / Adam beta1
    batch_size: int = 16
    epochs: int = 50
    lr_schedule: str = "step"     # "step" (x gamma at the milestones) | "constant"
    step_gamma: float = 0.5
    step_milestones: tuple[float, ...] = (0.6, 0.85)
    seed: int = 0
    checkpoint_interval: int = 0  # epochs between checkpoints; 0 = final only
    max_shift: int | None = None  # default tile_size // 4
    enable_flips: bool = True
    augment_mode: str = "shift"   # shift | affine | photometric (ablations)
    encoder_lr: float = 1e-4      # self-training group lr for pretrained encoders
    finetune_lr: float = 1e-4     # step-2 fine-tune lr for all parameters
    deterministic: bool | None = None

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.lr_schedule not in ("step", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.augment_mode not in ("shift", "affine", "photometric"):
            raise ConfigError(f"unknown augment_mode {self.augment_mode!r}")


# --------------------------------------------------------------------------
# normalization and tensor assembly
# --------------------------------------------------------------------------

def compute_norm_stats(scenes: list[Scene]) -> dict:
    """Per-channel mean/std over the corpus for the stacked [sar|optical] tensor."""
    acc = None
    acc2 = None
    n = 0
    for s in scenes:
        x = np.concatenate([s.sar, s.optical], axis=0).reshape(
            s.sar.shape[0] + s.optical.shape[0], -1)
        acc = x.sum(axis=1) if acc is None else acc + x.sum(axis=1)
        acc2 = (x ** 2).sum(axis=1) if acc2 is None else acc2 + (x ** 2).sum(axis=1)
        n += x.shape[1]
    mean = acc / n
    var = np.maximum(acc2 / n - mean ** 2, 1e-12)
    return {"mean": mean.tolist(), "std": np.sqrt(var).tolist()}


def scene_tensor(scene: Scene, norm_stats: dict) -> np.ndarray:
    x = np.concatenate([scene.sar, scene.optical], axis=0).astype(np.float32)
    mean = np.asarray(norm_stats["mean"], dtype=np.float32)[:, None, None]
    std = np.asarray(norm_stats["std"], dtype=np.float32)[:, None, None]
    return (x - mean) / std


def apply_shift_torch(x: torch.Tensor, spec: ShiftSpec, fill: float = 0.0) -> torch.Tensor:
    """Differentiable twin of augment.apply_shift for [..., H, W] tensors."""
    h, w = x.shape[-2], x.shape[-1]
    if abs(spec.dx) >= w or abs(spec.dy) >= h:
        raise ConfigError(f"shift {spec.dx, spec.dy} out of range for {h}x{w}")
    if spec.flip_h:
        x = torch.flip(x, dims=[-1])
    if spec.flip_v:
        x = torch.flip(x, dims=[-2])
    out = x.new_full(x.shape, fill)
    dy, dx = spec.dy, spec.dx
    src_i = slice(max(0, -dy), h - max(0, dy))
    src_j = slice(max(0, -dx), w - max(0, dx))
    dst_i = slice(max(0, dy), h - max(0, -dy))
    dst_j = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_i, dst_j] = x[..., src_i, src_j]
    return out


def _make_optimizer(params, cfg: TrainConfig, lr: float | None = None):
    lr = cfg.lr if lr is None else lr
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr, betas=(cfg.momentum, 0.999),
                                weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def _make_scheduler(optimizer, cfg: TrainConfig):
    if cfg.lr_schedule == "constant":
        return None
    milestones = sorted({max(1, int(round(f * cfg.epochs))) for f in cfg.step_milestones})
    return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=milestones,
                                                gamma=cfg.step_gamma)


# --------------------------------------------------------------------------
# view construction for pretraining
# --------------------------------------------------------------------------

@dataclass
class _ViewSpec:
    shift: ShiftSpec
    affine: AffineParams | None = None


def _sample_view_spec(rng, cfg: TrainConfig, h: int, w: int) -> _ViewSpec:
    max_shift = cfg.max_shift if cfg.max_shift is not None else min(h, w) // 4
    if cfg.augment_mode == "photometric":
        return _ViewSpec(shift=ShiftSpec(0, 0))
    shift = sample_shift(rng, max_shift, cfg.enable_flips)
    if cfg.augment_mode == "affine":
        aff = AffineParams(angle=float(rng.uniform(-0.2, 0.2)),
                           scale=float(rng.uniform(0.9, 1.1)),
                           shear=float(rng.uniform(-0.1, 0.1)))
        return _ViewSpec(shift=shift, affine=aff)
    return _ViewSpec(shift=shift)


def _build_second_view(x1: np.ndarray, vs: _ViewSpec, cfg: TrainConfig, rng) -> np.ndarray:
    if cfg.augment_mode == "photometric":
        params = PhotometricParams(blur_sigma=float(rng.uniform(0.0, 1.0)),
                                   noise_sigma=float(rng.uniform(0.0, 0.05)),
                                   noise_seed=int(rng.integers(1 << 31)))
        return apply_photometric(x1, params)
    x2 = apply_shift(x1, vs.shift, fill=0.0)
    if vs.affine is not None:
        x2 = apply_affine(x2, vs.affine, fill=0.0)
    return x2


def _replay_on_features(fm: torch.Tensor, vs: _ViewSpec) -> torch.Tensor:
    out = apply_shift_torch(fm, vs.shift, fill=0.0)
    if vs.affine is not None:
        out = _apply_affine_torch(out, vs.affine)
    return out


def _apply_affine_torch(fm: torch.Tensor, params: AffineParams) -> torch.Tensor:
    from .augment import _affine_matrix
    h, w = fm.shape[-2], fm.shape[-1]
    minv = torch.tensor(np.linalg.inv(_affine_matrix(params)), dtype=fm.dtype)
    # normalized, center-origin coords with align_corners=True match the
    # index-space map used on the input images
    d = torch.tensor([2.0 / (h - 1), 2.0 / (w - 1)], dtype=fm.dtype)
    n = torch.diag(d) @ minv @ torch.diag(1.0 / d)
    theta = torch.zeros(1, 2, 3, dtype=fm.dtype)
    theta[0, 0, 0], theta[0, 0, 1] = n[1, 1], n[1, 0]
    theta[0, 1, 0], theta[0, 1, 1] = n[0, 1], n[0, 0]
    grid = torch.nn.functional.affine_grid(theta, (1, 1, h, w), align_corners=True)
    x = fm.unsqueeze(0)
    return torch.nn.functional.grid_sample(
        x, grid.to(fm.dtype), mode="bilinear", padding_mode="zeros",
        align_corners=True).squeeze(0)


def _view_mask_and_segments(sp: SuperpixelMap, vs: _ViewSpec, h: int, w: int):
    mask = overlap_mask(vs.shift, h, w)
    sp_t = transport_superpixels(sp, vs.shift)
    if vs.affine is not None:
        mask = mask & affine_valid_mask(vs.affine, h, w)
        from scipy import ndimage as ndi
        from .augment import _affine_matrix
        minv = np.linalg.inv(_affine_matrix(vs.affine))
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        moved = ndi.affine_transform(
            sp_t.labels.astype(np.float64), minv, offset=center - minv @ center,
            order=0, mode="constant", cval=-1.0)
        sp_t = SuperpixelMap(moved.astype(np.int32), sp.n_segments, sp.sizes)
    return mask, sp_t


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint_dir: Path
    epoch_losses: list[float]
    norm_stats: dict


def pretrain(
    scenes: list[Scene],
    net_cfg: NetworkConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
) -> PretrainResult:
    """Self-supervised pretraining; writes checkpoints and a metrics CSV."""
    if len(scenes) < 2:
        raise ConfigError("pretraining needs at least 2 scenes for negatives")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_determinism(train_cfg.seed, train_cfg.deterministic)
    rng = np.random.default_rng(train_cfg.seed)

    norm_stats = compute_norm_stats(scenes)
    tensors = [scene_tensor(s, norm_stats) for s in scenes]
    h, w = scenes[0].height, scenes[0].width

    need_pixels = net_cfg.fusion_mode != "mcl"
    segments = None
    if need_pixels:
        segments = [
            segment_superpixels(s, loss_cfg.superpixels_per_tile,
                                loss_cfg.slic_compactness)
            for s in scenes
        ]

    net = build_network(net_cfg, seed=train_cfg.seed)
    net.train()
    optimizer = _make_optimizer(net.parameters(), train_cfg)
    scheduler = _make_scheduler(optimizer, train_cfg)

    epoch_losses: list[float] = []
    metrics_rows: list[dict] = []
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(scenes))
        step_losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            if len(batch) < 2:
                continue
            specs = [_sample_view_spec(rng, train_cfg, h, w) for _ in batch]
            x1 = np.stack([tensors[i] for i in batch])
            x2 = np.stack([
                _build_second_view(tensors[i], vs, train_cfg, rng)
                for i, vs in zip(batch, specs)
            ])
            t1 = torch.from_numpy(x1)
            t2 = torch.from_numpy(np.ascontiguousarray(x2))
            outs = net.pretrain_outputs(t1, t2)

            dense_anchor = dense_positive = None
            dense_groups = None
            if need_pixels:
                try:
                    anchors, positives, groups = [], [], []
                    for b, (i, vs) in enumerate(zip(batch, specs)):
                        mask, sp_t = _view_mask_and_segments(segments[i], vs, h, w)
                        aligned = _replay_on_features(outs.dense1[b], vs)
                        pa = pool_over_superpixels(
                            aligned, sp_t, mask,
                            loss_cfg.segment_overlap_min_frac, scene_index=int(i))
                        pp = pool_over_superpixels(
                            outs.dense2[b], sp_t, mask,
                            loss_cfg.segment_overlap_min_frac, scene_index=int(i))
                        anchors.append(pa.rows)
                        positives.append(pp.rows)
                        groups.append(np.full(pa.rows.shape[0], int(i)))
                    dense_anchor = torch.cat(anchors)
                    dense_positive = torch.cat(positives)
                    dense_groups = np.concatenate(groups)
                except DegenerateBatchError as exc:
                    log.warning("skipping batch at epoch %d: %s", epoch, exc)
                    continue

            loss, parts = composite_loss(
                net_cfg.fusion_mode, dense_anchor, dense_positive,
                outs.global_pairs, loss_cfg, dense_groups)
            if not torch.isfinite(loss):
                dump = {
                    "epoch": epoch,
                    "scene_ids": [scenes[i].id for i in batch],
                    "shifts": [[vs.shift.dx, vs.shift.dy, vs.shift.flip_h, vs.shift.flip_v]
                               for vs in specs],
                    "parts": parts,
                }
                (out_dir / "diagnostic_batch.json").write_text(json.dumps(dump, indent=1))
                raise PipelineError(f"non-finite loss at epoch {epoch}; diagnostics dumped")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step_losses.append(float(loss.detach()))
        if scheduler is not None:
            scheduler.step()
        epoch_loss = float(np.mean(step_losses)) if step_losses else math.nan
        epoch_losses.append(epoch_loss)
        metrics_rows.append({"epoch": epoch, "phase": "pretrain", "loss": epoch_loss})
        log.info("pretrain epoch %d/%d loss %.5f", epoch + 1, train_cfg.epochs, epoch_loss)
        if (train_cfg.checkpoint_interval
                and (epoch + 1) % train_cfg.checkpoint_interval == 0
                and epoch + 1 < train_cfg.epochs):
            save_checkpoint(out_dir / f"ckpt-epoch{epoch + 1:04d}", net, net_cfg,
                            train_cfg.seed, epoch + 1, norm_stats)

    ckpt = save_checkpoint(out_dir / "ckpt-final", net, net_cfg,
                           train_cfg.seed, train_cfg.epochs, norm_stats)
    write_metrics_csv(out_dir / "metrics.csv", metrics_rows)
    return PretrainResult(checkpoint_dir=ckpt, epoch_losses=epoch_losses,
                          norm_stats=norm_stats)


# --------------------------------------------------------------------------
# features, linear probe
# --------------------------------------------------------------------------

def extract_features(net: nn.Module, scenes: list[Scene], norm_stats: dict,
                     batch: int = 8) -> torch.Tensor:
    net.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(scenes), batch):
            x = torch.from_numpy(np.stack([
                scene_tensor(s, norm_stats) for s in scenes[start:start + batch]]))
            chunks.append(net.dense_features(x))
    return torch.cat(chunks)


def _gt_tensor(scenes: list[Scene]) -> torch.Tensor:
    return torch.from_numpy(np.stack([
        s.gt if s.gt is not None else np.full((s.height, s.width), UNLABELED, np.uint8)
        for s in scenes
    ]).astype(np.int64))


@dataclass
class ProbeResult:
    classifier_state: dict
    metrics: "EvalResult"
    backbone_fingerprint: bytes


def _backbone_fingerprint(net: nn.Module) -> bytes:
    blobs = [t.detach().cpu().numpy().tobytes() for _, t in sorted(net.state_dict().items())]
    return b"".join(blobs)


def linear_probe(
    checkpoint_dir: str | Path | tuple,
    train_scenes: list[Scene],
    eval_scenes: list[Scene],
    train_cfg: TrainConfig,
    labels_override: list[np.ndarray] | None = None,
) -> ProbeResult:
    """Linear protocol: per-pixel linear classifier on frozen features."""
    if isinstance(checkpoint_dir, tuple):
        net, net_cfg, meta = checkpoint_dir
    else:
        net, net_cfg, meta = load_checkpoint(checkpoint_dir)
    norm_stats = meta["norm_stats"]
    set_determinism(train_cfg.seed, train_cfg.deterministic)
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    fingerprint_before = _backbone_fingerprint(net)

    scheme = train_scenes[0].class_scheme
    n_classes = scheme.num_classes
    feats = extract_features(net, train_scenes, norm_stats)
    labels = (_gt_tensor(train_scenes) if labels_override is None
              else torch.from_numpy(np.stack(labels_override).astype(np.int64)))
    present = torch.unique(labels[labels != UNLABELED])
    if len(present) < n_classes:
        log.warning("probe training labels cover %d/%d classes; absent classes "
                    "are excluded from AA", len(present), n_classes)

    torch.manual_seed(train_cfg.seed)
    classifier = nn.Conv2d(feats.shape[1], n_classes, 1)
    optimizer = _make_optimizer(classifier.parameters(), train_cfg)
    scheduler = _make_scheduler(optimizer, train_cfg)
    ce = nn.CrossEntropyLoss(ignore_index=UNLABELED)
    rng = np.random.default_rng(train_cfg.seed)
    for _ in range(train_cfg.epochs):
        order = rng.permutation(len(train_scenes))
        for start in range(0, len(order), train_cfg.batch_size):
            sel = torch.from_numpy(order[start:start + train_cfg.batch_size].copy())
            logits = classifier(feats[sel])
            loss = ce(logits, labels[sel])
            if torch.isnan(loss):
                continue  # batch without any labeled pixel
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        if scheduler is not None:
            scheduler.step()

    assert _backbone_fingerprint(net) == fingerprint_before
    preds = predict_dense((net, net_cfg, meta), classifier, eval_scenes, norm_stats)
    metrics = evaluate(preds, [s.gt for s in eval_scenes], scheme)
    return ProbeResult(classifier_state={k: v.detach().clone()
                                         for k, v in classifier.state_dict().items()},
                       metrics=metrics,
                       backbone_fingerprint=fingerprint_before)


def predict_dense(checkpoint, classifier: nn.Module, scenes: list[Scene],
                  norm_stats: dict, batch: int = 8) -> list[np.ndarray]:
    net = checkpoint[0] if isinstance(checkpoint, tuple) else load_checkpoint(checkpoint)[0]
    net.eval()
    classifier.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(scenes), batch):
            x = torch.from_numpy(np.stack([
                scene_tensor(s, norm_stats) for s in scenes[start:start + batch]]))
            logits = classifier(net.dense_features(x))
            preds.extend(p.numpy().astype(np.uint8) for p in logits.argmax(dim=1))
    classifier.train()
    return preds


# --------------------------------------------------------------------------
# self-training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PseudoLabelConfig:
    k_s2: int = 8
    k_s1: int = 4
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-4
    kmeans_seed: int = 0
    cap: int = 10
    medium_marker_mode: str = "strict"


def pseudo_label_scene(scene: Scene, cfg: PseudoLabelConfig,
                       rng: np.random.Generator, sparsify_labels: bool = True):
    idx = compute_indices(scene)
    a2, a1 = overcluster_scene(scene, cfg.k_s2, cfg.k_s1, seed=cfg.kmeans_seed,
                               max_iters=cfg.kmeans_max_iters, tol=cfg.kmeans_tol)
    st2, st1 = cluster_stats(a2, idx), cluster_stats(a1, idx)
    markers = select_markers(st2, st1)
    full = collect_samples(scene, idx, a2, a1, markers, st2, st1,
                           medium_marker_mode=cfg.medium_marker_mode)
    return sparsify(full, cfg.cap, rng) if sparsify_labels else full


@dataclass
class SelftrainResult:
    step1_metrics: "EvalResult"
    step2_metrics: "EvalResult"
    dense_labels: list[np.ndarray]
    checkpoint_dir: Path | None


def selftrain(
    checkpoint_dir: str | Path,
    scenes: list[Scene],
    eval_scenes: list[Scene],
    pseudo_cfg: PseudoLabelConfig,
    step1_cfg: TrainConfig,
    step2_cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> SelftrainResult:
    """Two-step self-training on spectral-index pseudo labels.

    Step 1 trains a linear classifier on frozen features over the sparse
    pseudo-labeled pixels only, then predicts dense labels everywhere.
    Step 2 unfreezes everything and fine-tunes on the predicted labels.
    Metrics for both steps are computed against the eval scenes' ground truth.
    """
    net, net_cfg, meta = load_checkpoint(checkpoint_dir)
    norm_stats = meta["norm_stats"]
    set_determinism(step1_cfg.seed, step1_cfg.deterministic)
    rng = np.random.default_rng(step1_cfg.seed)

    pseudo = [pseudo_label_scene(s, pseudo_cfg, rng) for s in scenes]
    usable = [i for i, p in enumerate(pseudo) if (p.labels != UNLABELED).any()]
    if not usable:
        raise PipelineError("no scene produced any pseudo label")
    if len(usable) < len(scenes):
        log.info("%d/%d scenes had zero pseudo labels; excluded from step 1",
                 len(scenes) - len(usable), len(scenes))

    scheme = scenes[0].class_scheme
    probe = linear_probe(
        (net, net_cfg, meta),
        [scenes[i] for i in usable],
        eval_scenes,
        step1_cfg,
        labels_override=[pseudo[i].labels for i in usable],
    )
    step1_metrics = probe.metrics

    classifier = nn.Conv2d(net_cfg.dense_dim, scheme.num_classes, 1)
    classifier.load_state_dict(probe.classifier_state)
    dense_labels = predict_dense((net, net_cfg, meta), classifier, scenes, norm_stats)

    # step 2: fine-tune everything on the predicted dense labels
    for p in net.parameters():
        p.requires_grad_(True)
    net.train()
    params = [
        {"params": list(net.parameters()), "lr": step2_cfg.finetune_lr},
        {"params": list(classifier.parameters()), "lr": step2_cfg.finetune_lr},
    ]
    optimizer = torch.optim.Adam(params, lr=step2_cfg.finetune_lr,
                                 betas=(step2_cfg.momentum, 0.999),
                                 weight_decay=step2_cfg.weight_decay)
    ce = nn.CrossEntropyLoss(ignore_index=UNLABELED)
    targets = torch.from_numpy(np.stack(dense_labels).astype(np.int64))
    tensors = torch.from_numpy(np.stack([scene_tensor(s, norm_stats) for s in scenes]))
    rng2 = np.random.default_rng(step2_cfg.seed + 1)
    for _ in range(step2_cfg.epochs):
        order = rng2.permutation(len(scenes))
        for start in range(0, len(order), step2_cfg.batch_size):
            sel = torch.from_numpy(order[start:start + step2_cfg.batch_size].copy())
            logits = classifier(net.dense_features(tensors[sel]))
            loss = ce(logits, targets[sel])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    preds = predict_dense((net, net_cfg, meta), classifier, eval_scenes, norm_stats)
    step2_metrics = evaluate(preds, [s.gt for s in eval_scenes], scheme)
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(Path(out_dir) / "ckpt-selftrain", net, net_cfg,
                               step2_cfg.seed, step2_cfg.epochs, norm_stats)
        write_metrics_csv(Path(out_dir) / "metrics.csv", [
            {"epoch": step1_cfg.epochs, "phase": "selftrain1",
             "aa": step1_metrics.aa, "miou": step1_metrics.miou},
            {"epoch": step2_cfg.epochs, "phase": "selftrain2-finetune",
             "aa": step2_metrics.aa, "miou": step2_metrics.miou},
        ])
    return SelftrainResult(step1_metrics=step1_metrics, step2_metrics=step2_metrics,
                           dense_labels=dense_labels, checkpoint_dir=ckpt)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass
class EvalResult:
    confusion: np.ndarray        # [C, C] rows = ground truth, cols = prediction
    per_class_accuracy: np.ndarray
    per_class_iou: np.ndarray
    present: np.ndarray          # classes with ground-truth pixels
    aa: float
    miou: float

    def to_dict(self, scheme: ClassScheme | None = None) -> dict:
        names = (list(scheme.names) if scheme is not None
                 else [f"class_{i}" for i in range(len(self.present))])
        rows = [
            {
                "class": names[c],
                "accuracy": None if not self.present[c] else float(self.per_class_accuracy[c]),
                "iou": None if not self.present[c] else float(self.per_class_iou[c]),
            }
            for c in range(len(names))
        ]
        return {
            "per_class": rows,
            "aa": self.aa,
            "miou": self.miou,
            "confusion": self.confusion.tolist(),
        }


def evaluate(preds: list[np.ndarray], gts: list[np.ndarray],
             scheme: ClassScheme) -> EvalResult:
    """Confusion matrix, per-class recall/IoU, AA and mIoU over present classes."""
    c = scheme.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        if gt is None:
            continue
        if pred.shape != gt.shape:
            raise ConfigError("prediction and ground truth shapes differ")
        valid = gt != UNLABELED
        confusion += np.bincount(
            (gt[valid].astype(np.int64) * c + pred[valid].astype(np.int64)),
            minlength=c * c,
        ).reshape(c, c)
    if confusion.sum() == 0:
        raise EvalError("no labeled pixels to evaluate")
    gt_count = confusion.sum(axis=1)
    present = gt_count > 0
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = gt_count - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(present, tp / np.maximum(gt_count, 1), np.nan)
        iou = np.where(present, tp / np.maximum(tp + fp + fn, 1e-12), np.nan)
    return EvalResult(
        confusion=confusion,
        per_class_accuracy=acc,
        per_class_iou=iou,
        present=present,
        aa=float(np.nanmean(acc[present])),
        miou=float(np.nanmean(iou[present])),
    )


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    lines = ["epoch,phase,loss,aa,miou"]
    for r in rows:
        lines.append("{},{},{},{},{}".format(
            r.get("epoch", ""),
            r.get("phase", ""),
            _fmt(r.get("loss")),
            _fmt(r.get("aa")),
            _fmt(r.get("miou")),
        ))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    return "" if v is None else f"{v:.10g}"


def write_report_json(path: str | Path, result: EvalResult, scheme: ClassScheme) -> None:
    Path(path).write_text(
        json.dumps(result.to_dict(scheme), indent=1, sort_keys=True), encoding="utf-8")


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    mean_rel_err: float
    n_checked: int
    passed: bool
    worst_param: str = ""
    n_nonsmooth: int = 0


def grad_check(
    loss_fn,
    named_params: list[tuple[str, torch.Tensor]],
    eps: float = 1e-5,
    tol: float = 1e-4,
    n_samples: int = 200,
    seed: int = 0,
    relu_modules: "list[nn.Module] | None" = None,
) -> GradCheckReport:
    """Central finite differences against autograd on sampled parameters.

    `loss_fn` must be a pure function of the parameter values (64-bit inputs
    recommended; batch-norm layers should have momentum 0 so repeated
    evaluations do not drift).

    A central difference only estimates a derivative where the loss is
    smooth on [w - eps, w + eps]; if a ReLU pre-activation changes sign
    between the two endpoint evaluations the interval straddles a kink and
    the sample says nothing about the analytic gradient.  Passing the net's
    ReLU modules via `relu_modules` detects exactly that (sign-pattern
    comparison) and replaces such samples.  A wrong analytic gradient is
    never masked by the guard: it does not flip activation signs.
    """
    rng = np.random.default_rng(seed)
    params = [p for _, p in named_params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    sign_trace: list[bytes] = []
    hooks = []
    for m in relu_modules or []:
        hooks.append(m.register_forward_pre_hook(
            lambda _m, inp: sign_trace.append((inp[0] > 0).cpu().numpy().tobytes())
        ))

    def eval_loss():
        sign_trace.clear()
        value = float(loss_fn())
        return value, tuple(sign_trace)

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    n = min(n_samples, total)
    budget = min(total, 3 * n)
    chosen = rng.choice(total, size=budget, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    max_err, sum_err, worst = 0.0, 0.0, ""
    checked = skipped = 0
    try:
        with torch.no_grad():
            for flat in chosen:
                if checked >= n:
                    break
                t = int(np.searchsorted(offsets, flat, side="right") - 1)
                j = int(flat - offsets[t])
                p = params[t]
                orig = p.view(-1)[j].item()
                p.view(-1)[j] = orig + eps
                lp, pat_p = eval_loss()
                p.view(-1)[j] = orig - eps
                lm, pat_m = eval_loss()
                p.view(-1)[j] = orig
                if pat_p != pat_m:
                    skipped += 1
                    continue
                fd = (lp - lm) / (2 * eps)
                an = 0.0 if grads[t] is None else float(grads[t].view(-1)[j])
                checked += 1
                err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
                sum_err += err
                if err > max_err:
                    max_err, worst = err, f"{named_params[t][0]}[{j}]"
    finally:
        for h in hooks:
            h.remove()
    return GradCheckReport(max_rel_err=max_err, mean_rel_err=sum_err / max(checked, 1),
                           n_checked=checked, passed=max_err < tol and checked >= min(n, total),
                           worst_param=worst, n_nonsmooth=skipped)
