"""Multi-omics classification by unrolled multiplex-graph optimization."""
from .dataio import MultiOmicsDataset, SynthSpec, load_dataset, split_semi_supervised, synth_generate
from .model import TrainConfig, evaluate, fit, forward

__all__ = [
    "MultiOmicsDataset", "SynthSpec", "TrainConfig", "evaluate", "fit", "forward",
    "load_dataset", "split_semi_supervised", "synth_generate",
]
