"""Few-shot episodic benchmark toolkit.

Prototypical-network episodic learning, conventional transfer training, batch
mixing augmentations and a seeded N-way K-shot evaluation harness for
long-tailed class distributions.
"""

from protoshot.dataset import (
    ClassPartition,
    FractionSplit,
    LabeledExample,
    LongTailDataset,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
    save_manifest,
    split_fraction,
    split_longtail,
)
from protoshot.evaluation import EpisodeSpec, EvalReport, evaluate, sample_episode
from protoshot.nn import Embedder, load_checkpoint, save_checkpoint
from protoshot.protonet import compute_prototypes, distance, episode_loss, posterior

__version__ = "0.1.0"

__all__ = [
    "ClassPartition",
    "Embedder",
    "EpisodeSpec",
    "EvalReport",
    "FractionSplit",
    "LabeledExample",
    "LongTailDataset",
    "SyntheticSpec",
    "compute_prototypes",
    "distance",
    "episode_loss",
    "evaluate",
    "generate_synthetic",
    "load_checkpoint",
    "load_manifest",
    "posterior",
    "sample_episode",
    "save_checkpoint",
    "save_manifest",
    "split_fraction",
    "split_longtail",
]
