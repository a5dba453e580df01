from .augment import AugmentationConfig, augment
from .dataset import ReIDDataset, ReIDRecord, Split, load_dataset
from .sampler import PKSampler, pk_sample
from .synthetic import SyntheticSpec, caption_vocabulary, generate_synthetic

__all__ = [
    "AugmentationConfig", "augment", "ReIDDataset", "ReIDRecord", "Split", "load_dataset",
    "PKSampler", "pk_sample", "SyntheticSpec", "caption_vocabulary", "generate_synthetic",
]
