"""Graph-guided selective state-space diffusion for longitudinal
image progression prediction.

The package is a small self-contained stack: a reverse-mode autodiff
tape over float64 numpy arrays, a selective state-space sequence layer,
a DDPM noise schedule and sampler, a patch-graph spectral conditioning
pathway injected through zero-initialized projections, a synthetic
longitudinal cohort generator, and evaluation metrics.  The `progdiff`
console script exposes the operator workflow.
"""

from .tensor import Tensor, backward, no_grad, reset_tape
from .optim import AdamW, NonFiniteGradient
from .ssm import SsmParams, bidirectional_scan, selective_scan
from .diffusion import (Condition, NoiseSchedule, forward_noise,
                        make_schedule, sample, training_loss)
from .anatgraph import (build_adjacency, chebyshev_spectral_conv,
                        eigendecompose, normalized_laplacian, patchify,
                        spatial_graph_conv, unpatchify)
from .controlnet import (DualPathModel, ModelConfig, count_parameters,
                         load_checkpoint, load_model, save_checkpoint)
from .synthdata import (DatasetManifest, Geometry, Subject, brain_mask,
                        generate_cohort, generate_subject, make_splits,
                        read_dataset, read_image, read_manifest,
                        write_dataset, write_image, write_manifest)
from .metrics import EvalReport, psnr, region_volume_mae, score_pair, ssim
from .cli import RunConfig, main

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad", "reset_tape",
    "AdamW", "NonFiniteGradient",
    "SsmParams", "selective_scan", "bidirectional_scan",
    "Condition", "NoiseSchedule", "make_schedule", "forward_noise",
    "training_loss", "sample",
    "patchify", "unpatchify", "build_adjacency", "normalized_laplacian",
    "eigendecompose", "spatial_graph_conv", "chebyshev_spectral_conv",
    "ModelConfig", "DualPathModel", "count_parameters",
    "save_checkpoint", "load_checkpoint", "load_model",
    "Geometry", "Subject", "DatasetManifest", "generate_subject",
    "generate_cohort", "brain_mask", "make_splits",
    "write_image", "read_image", "write_dataset", "read_dataset",
    "write_manifest", "read_manifest",
    "psnr", "ssim", "region_volume_mae", "score_pair", "EvalReport",
    "RunConfig", "main",
    "__version__",
]
