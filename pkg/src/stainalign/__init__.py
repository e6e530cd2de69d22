"""Paired H&E / IHC slide-embedding alignment with numpy."""

from .aggregator import AggregatorParams, SlideEmbedding, aggregate_forward, embed_slides
from .encoding import EncoderSpec, TileEmbedding, encode_slide, encode_tile
from .errors import (
    DegenerateInputError,
    EmptySlideError,
    FormatError,
    InvalidInputError,
    ManifestError,
    NumericalError,
    StainAlignError,
    UndefinedMetricError,
    UnstableCIError,
)
from .evaluation import alignment_analysis, make_cv_folds, run_nested_eval
from .losses import LossConfig, inter_modality_loss, intra_modality_loss, total_loss
from .metrics import bootstrap_ci, fit_logreg, roc_auc, score_metrics, wilcoxon_signed_rank
from .store import parse_manifest, read_embeddings, read_params, write_embeddings, write_params
from .synth import synth_embeddings, synth_images
from .tiling import StainProfile, TissueMask, build_tissue_mask, extract_patches, otsu_threshold, tile_image
from .trainer import PairedSlide, TrainConfig, fit

__version__ = "0.1.0"
