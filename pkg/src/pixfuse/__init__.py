"""Self-supervised SAR-optical fusion and land-cover mapping toolkit."""

from .augment import ShiftSpec, apply_shift, overlap_mask, sample_shift
from .cluster import cluster_stats, kmeans, overcluster_scene, select_markers
from .contrastive import (
    LossConfig, composite_loss, info_nce, pair_score,
    pool_over_superpixels, segment_superpixels,
)
from .errors import (
    ConfigError, DegenerateBatchError, EvalError, FormatError,
    NumericalError, PipelineError, PixfuseError, ShapeError,
)
from .fusionnet import NetworkConfig, build_network, forward_dense, forward_global
from .pipeline import (
    PseudoLabelConfig, TrainConfig, evaluate, grad_check,
    linear_probe, pretrain, selftrain,
)
from .pseudolabel import collect_samples, sparsify
from .scenes import (
    BandMap, ClassScheme, Scene, SIX_CLASSES, EIGHT_CLASSES,
    generate_synthetic, load_scene, save_scene, split_dataset,
)
from .spectral import IndexMaps, compute_indices

__version__ = "0.1.0"
