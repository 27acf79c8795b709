"""Factorized hierarchical VAE toolkit with a synthetic desk-scale harness."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import SyntheticSpec, Utterance, generate_synthetic, group_sequences_by_label
from .extraction import ExtractionMode, estimate_svector, extract_features
from .model import FHVAE, VAE, ArchConfig, LatentConfig, SVectorTable, build_model
from .objective import dis_lower_bound, segment_lower_bound, vae_elbo
from .trainer import TrainConfig, train_new

__version__ = "0.1.0"
