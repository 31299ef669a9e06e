"""hyperstain: marker-adaptive hyperconvolutional masked autoencoder for
multiplex images, with calibrated per-pixel uncertainty."""

from .tensor import ConvSpec, Tensor, conv2d, grad_check, pixel_shuffle
from .markers import MarkerSet, MarkerVocabulary
from .hyperconv import (KernelGeneratorTable, assemble_encoder_hyperkernel,
                        decoder_hyperconv, encoder_hyperconv, generate_kernel)
from .network import HeteroPrediction, Model, NetworkConfig, convnext_block
from .masking import (MaskConfig, MaskPlan, apply_mask, build_mask_plan,
                      panel_grouped_batches, sample_dropout_size,
                      sample_target_size)
from .objective import ClampSpec, clamp_grad, hetero_nll
from .preprocess import (PanelPreprocessor, PanelStats, PreprocessConfig,
                         arcsinh_transform, augment_crop, butterworth_lowpass,
                         center_crop, compute_panel_stats, extract_subimages,
                         panel_normalize)
from .synthcohort import CohortSpec, generate_cohort, generate_image
from .trainer import (AdamMoments, Checkpoint, CohortData, TrainConfig,
                      adamw_step, clip_gradients, load_checkpoint, lr_at,
                      save_checkpoint, train)
from .evalsuite import (CalibrationReport, StainRow, bh_fdr, coverage_check,
                        extract_cell_embedding, linear_probe_cv,
                        uncertainty_correlation, virtual_stain_loo,
                        wilcoxon_signed_rank)
from .estimator import HyperconvStainer
from .imxp import read_imxp, read_manifest, write_imxp, write_manifest

__version__ = "0.1.0"
