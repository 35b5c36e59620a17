"""ResUnet backbone and the three fusion architectures (plus the MCL baseline).

The encoder is a ResNet-18-style stem + three residual stages (the fourth
stage is removed), each stage downsampling 2x, so inputs need H, W divisible
by 8.  The decoder has three blocks of upsample/concat-skip/conv-BN-ReLU and
keeps the output at input resolution (same padding throughout).  A 1x1-conv
projector produces the dense per-pixel features; a pooled linear head per
encoder produces the image-level embedding.

Fusion modes
  pixef  one ResUnet on the channel-concatenated SAR+optical input
  pixif  encoder split into an SAR group and an optical group at half width
         (no cross-talk before the bottleneck), skips/bottleneck concatenated
         into one shared decoder
  pixlf  two independent half-width ResUnets whose projected features are
         concatenated for downstream use
  mcl    the pixif topology trained with the image-level loss only; decoder
         and projector stay randomly initialized and serve as the readout

Checkpoints are a directory: manifest.json (config, seed, epoch,
normalization stats, tensor table) plus one little-endian binary blob per
state_dict entry, named after the entry (stable torch names).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, FormatError, ShapeError

FUSION_MODES = ("pixef", "pixif", "pixlf", "mcl")


@dataclass(frozen=True)
class NetworkConfig:
    fusion_mode: str = "pixif"
    width_mult: float = 0.25
    in_channels_sar: int = 2
    in_channels_opt: int = 5
    feature_dim: int = 256
    proj_dim: int = 128
    modality: str = "both"        # "both" | "sar" | "opt" (single-sensor pixef runs)
    padding_mode: str = "zeros"   # "circular" exists for shift-invariance tests

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.width_mult <= 0 or self.feature_dim < 8 or self.proj_dim < 1:
            raise ConfigError("invalid width/feature/projection sizes")
        if self.modality not in ("both", "sar", "opt"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.modality != "both" and self.fusion_mode != "pixef":
            raise ConfigError("single-modality training uses the pixef architecture")

    def scaled(self, base: int) -> int:
        return max(2, int(round(base * self.width_mult)))

    @property
    def stage_widths(self) -> tuple[int, int, int, int]:
        # stem + three residual stages of the truncated ResNet-18
        return (self.scaled(64), self.scaled(64), self.scaled(128), self.scaled(256))

    @property
    def dense_dim(self) -> int:
        return self.scaled(self.feature_dim)

    @property
    def input_channels(self) -> int:
        if self.modality == "sar":
            return self.in_channels_sar
        if self.modality == "opt":
            return self.in_channels_opt
        return self.in_channels_sar + self.in_channels_opt


def _conv3(cin: int, cout: int, stride: int, padding_mode: str) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1,
                     padding_mode=padding_mode, bias=False)


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride, padding_mode):
        super().__init__()
        self.conv1 = _conv3(cin, cout, stride, padding_mode)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = _conv3(cout, cout, 1, padding_mode)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.skip(x))


class Encoder(nn.Module):
    """Stem + 3 two-block residual stages; returns all scales for skips."""

    def __init__(self, in_ch, widths, padding_mode):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stem = nn.Sequential(
            _conv3(in_ch, w0, 1, padding_mode), nn.BatchNorm2d(w0), nn.ReLU(inplace=True)
        )
        self.stage1 = nn.Sequential(
            ResidualBlock(w0, w1, 2, padding_mode), ResidualBlock(w1, w1, 1, padding_mode))
        self.stage2 = nn.Sequential(
            ResidualBlock(w1, w2, 2, padding_mode), ResidualBlock(w2, w2, 1, padding_mode))
        self.stage3 = nn.Sequential(
            ResidualBlock(w2, w3, 2, padding_mode), ResidualBlock(w3, w3, 1, padding_mode))

    def forward(self, x):
        s0 = self.stem(x)
        s1 = self.stage1(s0)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        return s0, s1, s2, s3


class DecoderBlock(nn.Module):
    def __init__(self, cin, skip_ch, cout, padding_mode):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = _conv3(cin + skip_ch, cout, 1, padding_mode)
        self.bn = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x, skip):
        x = self.up(x)
        return self.relu(self.bn(self.conv(torch.cat([x, skip], dim=1))))


class Decoder(nn.Module):
    def __init__(self, in_ch, skip_chs, out_widths, padding_mode):
        super().__init__()
        s2, s1, s0 = skip_chs
        d1, d2, d3 = out_widths
        self.block1 = DecoderBlock(in_ch, s2, d1, padding_mode)
        self.block2 = DecoderBlock(d1, s1, d2, padding_mode)
        self.block3 = DecoderBlock(d2, s0, d3, padding_mode)

    def forward(self, s0, s1, s2, s3):
        x = self.block1(s3, s2)
        x = self.block2(x, s1)
        return self.block3(x, s0)


class GlobalHead(nn.Module):
    """Global average pool over the final encoder stage + one linear layer."""

    def __init__(self, cin, proj_dim):
        super().__init__()
        self.fc = nn.Linear(cin, proj_dim)

    def forward(self, stage_out):
        return self.fc(stage_out.mean(dim=(2, 3)))


def _check_dims(x):
    if x.shape[-1] % 8 or x.shape[-2] % 8:
        raise ShapeError(f"spatial dims must be divisible by 8, got {tuple(x.shape)}")


class PretrainOutputs:
    def __init__(self, dense1, dense2, global_pairs):
        self.dense1 = dense1
        self.dense2 = dense2
        self.global_pairs = global_pairs


class PixEFNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.stage_widths
        pm = cfg.padding_mode
        self.encoder = Encoder(cfg.input_channels, w, pm)
        self.decoder = Decoder(w[3], (w[2], w[1], w[0]), (w[2], w[1], w[0]), pm)
        self.projector = nn.Conv2d(w[0], cfg.dense_dim, 1)
        self.head = GlobalHead(w[3], cfg.proj_dim)

    def _slice(self, x):
        if self.cfg.modality == "sar":
            return x[:, : self.cfg.in_channels_sar]
        if self.cfg.modality == "opt":
            return x[:, self.cfg.in_channels_sar:]
        return x

    def dense_features(self, x):
        _check_dims(x)
        s0, s1, s2, s3 = self.encoder(self._slice(x))
        return self.projector(self.decoder(s0, s1, s2, s3))

    def pretrain_outputs(self, v1, v2) -> PretrainOutputs:
        _check_dims(v1)
        e1 = self.encoder(self._slice(v1))
        e2 = self.encoder(self._slice(v2))
        d1 = self.projector(self.decoder(*e1))
        d2 = self.projector(self.decoder(*e2))
        return PretrainOutputs(d1, d2, {"global": (self.head(e1[3]), self.head(e2[3]))})


class PixIFNet(nn.Module):
    """Split encoder (SAR group / optical group), shared decoder."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.stage_widths
        half = tuple(max(1, wi // 2) for wi in w)
        pm = cfg.padding_mode
        self.encoder_sar = Encoder(cfg.in_channels_sar, half, pm)
        self.encoder_opt = Encoder(cfg.in_channels_opt, half, pm)
        fused = tuple(2 * hi for hi in half)
        self.decoder = Decoder(fused[3], (fused[2], fused[1], fused[0]),
                               (w[2], w[1], w[0]), pm)
        self.projector = nn.Conv2d(w[0], cfg.dense_dim, 1)
        self.head_sar = GlobalHead(half[3], cfg.proj_dim)
        self.head_opt = GlobalHead(half[3], cfg.proj_dim)
        self.head_cat = GlobalHead(2 * half[3], cfg.proj_dim)

    def _split(self, x):
        return x[:, : self.cfg.in_channels_sar], x[:, self.cfg.in_channels_sar:]

    def _encode(self, x):
        xs, xo = self._split(x)
        return self.encoder_sar(xs), self.encoder_opt(xo)

    def dense_features(self, x):
        _check_dims(x)
        es, eo = self._encode(x)
        fused = [torch.cat([a, b], dim=1) for a, b in zip(es, eo)]
        return self.projector(self.decoder(*fused))

    def pretrain_outputs(self, v1, v2) -> PretrainOutputs:
        _check_dims(v1)
        es1, eo1 = self._encode(v1)
        es2, eo2 = self._encode(v2)
        fused1 = [torch.cat([a, b], dim=1) for a, b in zip(es1, eo1)]
        fused2 = [torch.cat([a, b], dim=1) for a, b in zip(es2, eo2)]
        d1 = self.projector(self.decoder(*fused1))
        d2 = self.projector(self.decoder(*fused2))
        pairs = {
            # cross-modal: SAR embedding of view 1 vs optical embedding of view 2
            "global": (self.head_sar(es1[3]), self.head_opt(eo2[3])),
            "global_concat": (self.head_cat(fused1[3]), self.head_cat(fused2[3])),
        }
        return PretrainOutputs(d1, d2, pairs)


class _HalfResUnet(nn.Module):
    def __init__(self, in_ch, cfg: NetworkConfig):
        super().__init__()
        w = tuple(max(1, wi // 2) for wi in cfg.stage_widths)
        pm = cfg.padding_mode
        self.encoder = Encoder(in_ch, w, pm)
        self.decoder = Decoder(w[3], (w[2], w[1], w[0]), (w[2], w[1], w[0]), pm)
        self.projector = nn.Conv2d(w[0], max(1, cfg.dense_dim // 2), 1)
        self.head = GlobalHead(w[3], cfg.proj_dim)

    def dense(self, x):
        stages = self.encoder(x)
        return self.projector(self.decoder(*stages)), stages[3]


class PixLFNet(nn.Module):
    """Two independent half-width branches fused by feature concatenation."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.branch_sar = _HalfResUnet(cfg.in_channels_sar, cfg)
        self.branch_opt = _HalfResUnet(cfg.in_channels_opt, cfg)

    def _split(self, x):
        return x[:, : self.cfg.in_channels_sar], x[:, self.cfg.in_channels_sar:]

    def dense_features(self, x):
        _check_dims(x)
        xs, xo = self._split(x)
        ds, _ = self.branch_sar.dense(xs)
        do, _ = self.branch_opt.dense(xo)
        return torch.cat([ds, do], dim=1)

    def pretrain_outputs(self, v1, v2) -> PretrainOutputs:
        _check_dims(v1)
        xs1, _ = self._split(v1)
        _, xo2 = self._split(v2)
        ds1, s3s = self.branch_sar.dense(xs1)
        do2, s3o = self.branch_opt.dense(xo2)
        pairs = {"global": (self.branch_sar.head(s3s), self.branch_opt.head(s3o))}
        return PretrainOutputs(ds1, do2, pairs)


def build_network(cfg: NetworkConfig, seed: int) -> nn.Module:
    """Instantiate the configured architecture with seed-deterministic init."""
    torch.manual_seed(seed)
    if cfg.fusion_mode == "pixef":
        return PixEFNet(cfg)
    if cfg.fusion_mode in ("pixif", "mcl"):
        return PixIFNet(cfg)
    if cfg.fusion_mode == "pixlf":
        return PixLFNet(cfg)
    raise ConfigError(f"unknown fusion mode {cfg.fusion_mode!r}")


def forward_dense(net: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Full-resolution projected features with normalization in eval mode."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            out = net.dense_features(x)
    finally:
        net.train(was_training)
    return out


def forward_global(net: nn.Module, x: torch.Tensor) -> dict:
    """Per-encoder image embeddings (keys match the loss terms they feed)."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            out = net.pretrain_outputs(x, x)
            return {k: v[0] for k, v in out.global_pairs.items()}
    finally:
        net.train(was_training)


# --------------------------------------------------------------------------
# checkpoint format
# --------------------------------------------------------------------------

_TORCH_DTYPES = {"f32": torch.float32, "i64": torch.int64}
_NP_DTYPES = {"f32": np.dtype("<f4"), "i64": np.dtype("<i8")}


def save_checkpoint(
    dir_path: str | Path,
    net: nn.Module,
    cfg: NetworkConfig,
    seed: int,
    epoch: int,
    norm_stats: dict | None = None,
    extra: dict | None = None,
) -> Path:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, tensor in net.state_dict().items():
        t = tensor.detach().cpu()
        if t.dtype == torch.int64:
            dt = "i64"
        else:
            dt, t = "f32", t.to(torch.float32)
        tensors.append({"name": name, "dtype": dt, "shape": list(t.shape)})
        (dir_path / f"{name}.bin").write_bytes(
            t.numpy().astype(_NP_DTYPES[dt]).tobytes(order="C"))
    manifest = {
        "format_version": 1,
        "config": asdict(cfg),
        "seed": int(seed),
        "epoch": int(epoch),
        "norm_stats": norm_stats or {},
        "extra": extra or {},
        "tensors": tensors,
    }
    (dir_path / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return dir_path


def load_checkpoint(dir_path: str | Path) -> tuple[nn.Module, NetworkConfig, dict]:
    dir_path = Path(dir_path)
    manifest_path = dir_path / "manifest.json"
    if not manifest_path.is_file():
        raise FormatError(f"missing checkpoint manifest in {dir_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt checkpoint manifest: {exc}") from exc
    cfg = NetworkConfig(**manifest["config"])
    net = build_network(cfg, seed=manifest["seed"])
    state = {}
    for entry in manifest["tensors"]:
        name, dt, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
        raw = (dir_path / f"{name}.bin").read_bytes()
        expected = int(np.prod(shape)) * _NP_DTYPES[dt].itemsize if shape else _NP_DTYPES[dt].itemsize
        if len(raw) != expected:
            raise FormatError(f"tensor {name!r}: {len(raw)} bytes, expected {expected}")
        arr = np.frombuffer(raw, dtype=_NP_DTYPES[dt]).reshape(shape).copy()
        state[name] = torch.from_numpy(arr).to(_TORCH_DTYPES[dt])
    net.load_state_dict(state)
    meta = {"seed": manifest["seed"], "epoch": manifest["epoch"],
            "norm_stats": manifest.get("norm_stats", {}),
            "extra": manifest.get("extra", {})}
    return net, cfg, meta
