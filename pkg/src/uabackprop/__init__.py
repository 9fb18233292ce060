"""Per-pixel attribution of predictive uncertainty in deep ensembles."""

from .attribution import METHODS, AttributionMap, MethodConfig, attribute, ua_backprop, ua_backprop_all
from .data import LabeledDataset, SyntheticSpec, gen_synthetic, load_idx
from .nn import EnsemblePosterior, Network, TrainConfig, build_network, reference_arch, train, train_ensemble
from .uq import UncertaintyTriple, decompose, quantify

__version__ = "0.1.0"

__all__ = [
    "METHODS", "AttributionMap", "MethodConfig", "attribute", "ua_backprop", "ua_backprop_all",
    "LabeledDataset", "SyntheticSpec", "gen_synthetic", "load_idx",
    "EnsemblePosterior", "Network", "TrainConfig", "build_network", "reference_arch", "train", "train_ensemble",
    "UncertaintyTriple", "decompose", "quantify",
]
