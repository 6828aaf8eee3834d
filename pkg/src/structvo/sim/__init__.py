"""Synthetic Manhattan scenes, trajectories and on-disk datasets."""
from .dataset import Dataset, generate_sequence, load_dataset
from .presets import PRESETS, get_preset

__all__ = ["Dataset", "PRESETS", "generate_sequence", "get_preset", "load_dataset"]
