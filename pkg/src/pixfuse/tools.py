"""Verification utilities: composite-loss gradient checking.

Builds a tiny 64-bit training problem (2 scenes, 16x16 tiles, eighth-width
network) whose loss is a pure function of the parameters, then compares
autograd gradients against central finite differences on a random parameter
subset.  Batch-norm momentum is forced to 0 so repeated evaluations of the
closure do not drift the running statistics.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .contrastive import LossConfig, composite_loss, pool_over_superpixels, segment_superpixels
from .fusionnet import NetworkConfig, build_network
from .pipeline import (
    GradCheckReport, TrainConfig, _replay_on_features, _sample_view_spec,
    _view_mask_and_segments, compute_norm_stats, grad_check, scene_tensor,
)
from .scenes import generate_synthetic


def _freeze_batchnorm_updates(net: nn.Module) -> None:
    for m in net.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.momentum = 0.0


def build_gradcheck_problem(
    fusion_mode: str,
    seed: int = 0,
    size: int = 16,
    width_mult: float = 0.125,
    superpixels: int = 16,
):
    """Return (loss_fn, named_params) for a deterministic 64-bit problem."""
    scenes = generate_synthetic(seed=seed, n_scenes=2, size=size)
    net_cfg = NetworkConfig(fusion_mode=fusion_mode, width_mult=width_mult)
    loss_cfg = LossConfig(superpixels_per_tile=superpixels)
    train_cfg = TrainConfig(seed=seed, batch_size=2, epochs=1)

    norm = compute_norm_stats(scenes)
    rng = np.random.default_rng(seed)
    h = w = size
    specs = [_sample_view_spec(rng, train_cfg, h, w) for _ in scenes]
    tensors = [scene_tensor(s, norm).astype(np.float64) for s in scenes]
    from .augment import apply_shift
    x1 = torch.from_numpy(np.stack(tensors))
    x2 = torch.from_numpy(np.stack([
        apply_shift(t, vs.shift, fill=0.0) for t, vs in zip(tensors, specs)
    ]))

    need_pixels = fusion_mode != "mcl"
    seg_info = []
    if need_pixels:
        for s, vs in zip(scenes, specs):
            sp = segment_superpixels(s, superpixels, loss_cfg.slic_compactness)
            mask, sp_t = _view_mask_and_segments(sp, vs, h, w)
            seg_info.append((mask, sp_t))

    net = build_network(net_cfg, seed=seed).double()
    net.train()
    _freeze_batchnorm_updates(net)

    def loss_fn():
        outs = net.pretrain_outputs(x1, x2)
        dense_anchor = dense_positive = None
        groups = None
        if need_pixels:
            anchors, positives, gids = [], [], []
            for b, (mask, sp_t) in enumerate(seg_info):
                aligned = _replay_on_features(outs.dense1[b], specs[b])
                pa = pool_over_superpixels(aligned, sp_t, mask,
                                           loss_cfg.segment_overlap_min_frac, b)
                pp = pool_over_superpixels(outs.dense2[b], sp_t, mask,
                                           loss_cfg.segment_overlap_min_frac, b)
                anchors.append(pa.rows)
                positives.append(pp.rows)
                gids.append(np.full(pa.rows.shape[0], b))
            dense_anchor = torch.cat(anchors)
            dense_positive = torch.cat(positives)
            groups = np.concatenate(gids)
        total, _ = composite_loss(fusion_mode, dense_anchor, dense_positive,
                                  outs.global_pairs, loss_cfg, groups)
        return total

    named = [(n, p) for n, p in net.named_parameters()]
    relus = [m for m in net.modules() if isinstance(m, nn.ReLU)]
    return loss_fn, named, relus


def composite_gradcheck(
    fusion_mode: str = "pixif",
    seed: int = 0,
    n_samples: int = 200,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    loss_fn, named, relus = build_gradcheck_problem(fusion_mode, seed=seed)
    return grad_check(loss_fn, named, eps=eps, tol=tol, n_samples=n_samples,
                      seed=seed, relu_modules=relus)
