from .dataset import DatasetManifest, Sample, load_dataset, write_samples
from .skeleton import skeletonize
from .synth import BUNDLED_SPLIT, SynthParams, bundled_split, synth_generate, synth_samples, write_synthetic_dataset

__all__ = [
    "BUNDLED_SPLIT",
    "DatasetManifest",
    "Sample",
    "SynthParams",
    "bundled_split",
    "load_dataset",
    "skeletonize",
    "synth_generate",
    "synth_samples",
    "write_samples",
    "write_synthetic_dataset",
]
