"""Numerical laboratory for contrastive-learning loss landscapes and training dynamics."""

from .dataset import ClusterSpec, ClusteredDataset, PerturbationSet, generate, line_clusters
from .losses import LatentConfiguration, SimilarityConfig, full_loss_two_view, generalized_loss, nt_xent_original
from .network import KernelMatrix, NetSpec, OneHiddenNet, init_gaussian, init_invariant, kernel, kernel_infinite

__version__ = "0.1.0"
