"""Few-shot cross-domain segmentation with style augmentation and centroid-based contrastive alignment."""

from .centroids import CentroidSet, MemoryBank, compute_centroids, partition_prediction, update_bank
from .config import ABLATIONS, TrainConfig, profile
from .data import CLASS_NAMES, NUM_CLASSES, Sample, generate_corpus, make_split
from .gradcheck import grad_check
from .losses import ContrastiveConfig, cnr, contrastive_loss, mpccl
from .metrics import MetricsReport, dice, evaluate_masks, hd95
from .segnet import SegNet, seg_loss
from .style import StyleModule, adain, rain_losses

__version__ = "0.1.0"
