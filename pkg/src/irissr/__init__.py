"""Super-resolution (SRCNN, stacked auto-encoder) for low-resolution iris recognition."""

from .image import degrade, downscale, extract_patches, assemble_patches, load_image, resize, save_image
from .iris import (SegmentationAnnotation, compute_eer, hamming_distance, log_gabor_encode, preprocess,
                   run_verification, unwrap)
from .metrics import psnr, ssim, vif
from .nn import Network, grad_check, grad_check_report, load_weights, save_weights
from .sae import SaeModel, SaeTrainConfig, train_sae
from .srcnn import (DESK_INIT, SrcnnModel, SrcnnTrainConfig, TrainRegime, build_default, desk_config,
                    make_training_set, super_resolve, train)

__version__ = "0.1.0"
