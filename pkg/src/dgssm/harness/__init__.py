"""Data generation, training, evaluation, ablation and benchmarking."""
from .config import RunConfig, load_config, parse_config
from .data import SyntheticSample, generate_dataset

__all__ = ["RunConfig", "SyntheticSample", "generate_dataset", "load_config", "parse_config"]
