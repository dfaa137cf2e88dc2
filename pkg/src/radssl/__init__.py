"""Collaborative self-supervised pretraining for radiomic feature maps."""

from .augment import MaskedView, make_views, sample_pair
from .encoder import EncoderConfig, ViewEmbedding, encode, init_encoder, reconstruct
from .features import Dataset, FeatureMap, load_dataset, save_dataset, zscore_normalize
from .losses import LossWeights, discrimination_loss, recon_loss, total_loss
from .metrics import MetricsReport, evaluate
from .pipeline import TrainConfig, ablate, finetune, nested_cv, pretrain

__version__ = "0.1.0"
